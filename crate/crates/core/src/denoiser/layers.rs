//! Network layers with explicit forward and backward passes.
//!
//! Parameters live in one flat vector; layers hold [`ParamSlot`]s into it.
//! Backward passes accumulate into a gradient vector of the same layout and
//! return the gradient with respect to the layer input.

use rand::Rng as _;

use super::tensor::{gemm, Act, MatMut, MatRef, Scalar};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: ParamSlot,
    pub init: Init,
}

/// Records parameter blocks in allocation order. That order is the on-disk
/// order of checkpoint blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTable {
    entries: Vec<ParamInfo>,
    total: usize,
}

impl ParamTable {
    pub fn alloc(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamSlot {
        let len = shape.iter().product();
        let slot = ParamSlot {
            offset: self.total,
            len,
        };
        self.total += len;
        self.entries.push(ParamInfo {
            name,
            shape,
            slot,
            init,
        });
        slot
    }

    pub fn entries(&self) -> &[ParamInfo] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn initialize(&self, rng: &mut Rng) -> Vec<f32> {
        let mut params = vec![0.0f32; self.total];
        for e in &self.entries {
            let dst = &mut params[e.slot.range()];
            match e.init {
                Init::Uniform(bound) => {
                    for v in dst {
                        *v = rng.random_range(-bound..bound) as f32;
                    }
                }
                Init::Const(c) => dst.fill(c as f32),
            }
        }
        params
    }
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v / (T::one() + (-v).exp())).collect()
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = T::one() / (T::one() + (-v).exp());
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub fn silu_act<T: Scalar>(x: &Act<T>) -> Act<T> {
    Act {
        data: silu(&x.data),
        ..*x
    }
}

pub fn silu_act_backward<T: Scalar>(x: &Act<T>, dy: &Act<T>) -> Act<T> {
    Act {
        data: silu_backward(&x.data, &dy.data),
        ..*x
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

impl Conv2d {
    pub fn new(
        table: &mut ParamTable,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init_scale: f64,
    ) -> Self {
        let bound = init_scale / ((cin * k * k) as f64).sqrt();
        let weight = table.alloc(format!("{name}.weight"), vec![cout, cin, k, k], Init::Uniform(bound));
        let bias = table.alloc(format!("{name}.bias"), vec![cout], Init::Uniform(bound));
        Self {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            weight,
            bias,
        }
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Range of output columns whose input column `ox * stride + kx - pad`
    /// falls inside `0..w`.
    fn valid_range(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let shift = kx as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = ((w as isize - shift) + s - 1) / s;
        (lo.max(0) as usize, hi.clamp(0, wo as isize) as usize)
    }

    fn im2col<T: Scalar>(&self, x: &Act<T>, ho: usize, wo: usize) -> Vec<T> {
        let (k, n, h, w) = (self.k, x.n, x.h, x.w);
        let pcols = n * ho * wo;
        let mut cols = vec![T::zero(); self.kdim() * pcols];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * pcols..(row + 1) * pcols];
                    let (lo, hi) = self.valid_range(kx, w, wo);
                    for ni in 0..n {
                        let src = &x.data[(ci * n + ni) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * w..][..w];
                            let drow = &mut dst[(ni * ho + oy) * wo..][..wo];
                            if self.stride == 1 {
                                let shift = kx as isize - self.pad as isize;
                                let a = (lo as isize + shift) as usize;
                                let b = (hi as isize + shift) as usize;
                                if lo < hi {
                                    drow[lo..hi].copy_from_slice(&srow[a..b]);
                                }
                            } else {
                                for ox in lo..hi {
                                    drow[ox] = srow[ox * self.stride + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Act<T> {
        let k = self.k;
        let pcols = n * ho * wo;
        let mut dx = Act::zeros(self.cin, n, h, w);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * pcols..(row + 1) * pcols];
                    let (lo, hi) = self.valid_range(kx, w, wo);
                    for ni in 0..n {
                        let dst = &mut dx.data[(ci * n + ni) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let drow = &mut dst[iy as usize * w..][..w];
                            let srow = &src[(ni * ho + oy) * wo..][..wo];
                            for ox in lo..hi {
                                let ix = ox * self.stride + kx - self.pad;
                                drow[ix] = drow[ix] + srow[ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Act<T>) -> Act<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let pcols = x.n * ho * wo;
        let mut out = Act::zeros(self.cout, x.n, ho, wo);
        let bias = &p[self.bias.range()];
        for (co, row) in out.data.chunks_mut(pcols).enumerate() {
            row.fill(bias[co]);
        }
        let owned;
        let cols: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, ho, wo);
            &owned
        };
        gemm(
            MatRef::row_major(&p[self.weight.range()], self.cout, self.kdim()),
            MatRef::row_major(cols, self.kdim(), pcols),
            T::one(),
            MatMut::row_major(&mut out.data, pcols),
        );
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        x: &Act<T>,
        dy: &Act<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Act<T>> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let pcols = x.n * ho * wo;
        debug_assert_eq!(dy.data.len(), self.cout * pcols);
        for (co, row) in dy.data.chunks(pcols).enumerate() {
            let g = &mut grads[self.bias.offset + co];
            *g = *g + row.iter().copied().sum::<T>();
        }
        let owned;
        let cols: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, ho, wo);
            &owned
        };
        gemm(
            MatRef::row_major(&dy.data, self.cout, pcols),
            MatRef::row_major(cols, self.kdim(), pcols).t(),
            T::one(),
            MatMut {
                data: grads,
                offset: self.weight.offset,
                rs: self.kdim(),
                cs: 1,
            },
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); self.kdim() * pcols];
        gemm(
            MatRef::row_major(&p[self.weight.range()], self.cout, self.kdim()).t(),
            MatRef::row_major(&dy.data, self.cout, pcols),
            T::zero(),
            MatMut::row_major(&mut dcols, pcols),
        );
        if self.is_pointwise() {
            Some(Act {
                c: self.cin,
                n: x.n,
                h: x.h,
                w: x.w,
                data: dcols,
            })
        } else {
            Some(self.col2im(&dcols, x.n, x.h, x.w, ho, wo))
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma: ParamSlot,
    pub beta: ParamSlot,
}

pub struct GnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(table: &mut ParamTable, name: &str, c: usize, groups: usize) -> Self {
        assert!(c.is_multiple_of(groups), "{c} channels not divisible into {groups} groups");
        let gamma = table.alloc(format!("{name}.gamma"), vec![c], Init::Const(1.0));
        let beta = table.alloc(format!("{name}.beta"), vec![c], Init::Const(0.0));
        Self {
            c,
            groups,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Act<T>) -> (Act<T>, GnCache<T>) {
        assert_eq!(x.c, self.c);
        let (n, plane) = (x.n, x.plane());
        let cg = self.c / self.groups;
        let m = (cg * plane) as f64;
        let gamma = &p[self.gamma.range()];
        let beta = &p[self.beta.range()];
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut out = vec![T::zero(); x.data.len()];
        let mut rstd = vec![T::zero(); n * self.groups];
        for ni in 0..n {
            for g in 0..self.groups {
                let blocks = (g * cg..(g + 1) * cg).map(|ci| (ci, (ci * n + ni) * plane));
                let mut sum = 0.0;
                for (_, off) in blocks.clone() {
                    sum += x.data[off..off + plane].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mean = sum / m;
                let mut var = 0.0;
                for (_, off) in blocks.clone() {
                    var += x.data[off..off + plane]
                        .iter()
                        .map(|v| (v.f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let r = 1.0 / (var / m + GN_EPS).sqrt();
                rstd[ni * self.groups + g] = T::of(r);
                let (mean_t, r_t) = (T::of(mean), T::of(r));
                for (ci, off) in blocks {
                    for i in off..off + plane {
                        let xh = (x.data[i] - mean_t) * r_t;
                        xhat[i] = xh;
                        out[i] = xh * gamma[ci] + beta[ci];
                    }
                }
            }
        }
        (
            Act {
                c: x.c,
                n: x.n,
                h: x.h,
                w: x.w,
                data: out,
            },
            GnCache { xhat, rstd },
        )
    }

    pub fn backward<T: Scalar>(&self, p: &[T], cache: &GnCache<T>, dy: &Act<T>, grads: &mut [T]) -> Act<T> {
        let (n, plane) = (dy.n, dy.plane());
        let cg = self.c / self.groups;
        let m = T::of((cg * plane) as f64);
        let gamma = &p[self.gamma.range()];
        let mut dx = vec![T::zero(); dy.data.len()];
        for ci in 0..self.c {
            let mut dg = T::zero();
            let mut db = T::zero();
            for ni in 0..n {
                let off = (ci * n + ni) * plane;
                for i in off..off + plane {
                    dg = dg + dy.data[i] * cache.xhat[i];
                    db = db + dy.data[i];
                }
            }
            grads[self.gamma.offset + ci] = grads[self.gamma.offset + ci] + dg;
            grads[self.beta.offset + ci] = grads[self.beta.offset + ci] + db;
        }
        for ni in 0..n {
            for g in 0..self.groups {
                let r = cache.rstd[ni * self.groups + g];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for ci in g * cg..(g + 1) * cg {
                    let off = (ci * n + ni) * plane;
                    for i in off..off + plane {
                        let d = dy.data[i] * gamma[ci];
                        s1 = s1 + d;
                        s2 = s2 + d * cache.xhat[i];
                    }
                }
                let (m1, m2) = (s1 / m, s2 / m);
                for ci in g * cg..(g + 1) * cg {
                    let off = (ci * n + ni) * plane;
                    for i in off..off + plane {
                        let d = dy.data[i] * gamma[ci];
                        dx[i] = r * (d - m1 - cache.xhat[i] * m2);
                    }
                }
            }
        }
        Act {
            c: dy.c,
            n: dy.n,
            h: dy.h,
            w: dy.w,
            data: dx,
        }
    }
}

/// Dense layer on row-major `[batch][features]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

impl Linear {
    pub fn new(table: &mut ParamTable, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = table.alloc(format!("{name}.weight"), vec![dout, din], Init::Uniform(bound));
        let bias = table.alloc(format!("{name}.bias"), vec![dout], Init::Uniform(bound));
        Self {
            din,
            dout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * self.din);
        let bias = &p[self.bias.range()];
        let mut out: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            MatRef::row_major(x, batch, self.din),
            MatRef::row_major(&p[self.weight.range()], self.dout, self.din).t(),
            T::one(),
            MatMut::row_major(&mut out, self.dout),
        );
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        x: &[T],
        dy: &[T],
        batch: usize,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        for row in dy.chunks(self.dout) {
            for (o, &d) in row.iter().enumerate() {
                grads[self.bias.offset + o] = grads[self.bias.offset + o] + d;
            }
        }
        gemm(
            MatRef::row_major(dy, batch, self.dout).t(),
            MatRef::row_major(x, batch, self.din),
            T::one(),
            MatMut {
                data: grads,
                offset: self.weight.offset,
                rs: self.din,
                cs: 1,
            },
        );
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); batch * self.din];
        gemm(
            MatRef::row_major(dy, batch, self.dout),
            MatRef::row_major(&p[self.weight.range()], self.dout, self.din),
            T::zero(),
            MatMut::row_major(&mut dx, self.din),
        );
        Some(dx)
    }
}

pub fn upsample2<T: Scalar>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, x.n, h2, w2);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            let srow = &src[(y / 2) * x.w..][..x.w];
            let drow = &mut dst[y * w2..][..w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    for (src, dst) in dy.data.chunks(dy.plane()).zip(dx.data.chunks_mut(h * w)) {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * dy.w + xx];
            }
        }
    }
    dx
}

/// Single-head self-attention over spatial positions with a residual.
#[derive(Debug, Clone)]
pub struct Attention {
    pub c: usize,
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
}

pub struct AttnCache<T> {
    norm: GnCache<T>,
    normed: Act<T>,
    qkv: Act<T>,
    /// Row-softmaxed attention weights, one `P x P` block per sample.
    weights: Vec<T>,
    mixed: Act<T>,
}

impl Attention {
    pub fn new(table: &mut ParamTable, name: &str, c: usize, groups: usize) -> Self {
        Self {
            c,
            norm: GroupNorm::new(table, &format!("{name}.norm"), c, groups),
            qkv: Conv2d::new(table, &format!("{name}.qkv"), c, 3 * c, 1, 1, 1.0),
            proj: Conv2d::new(table, &format!("{name}.proj"), c, c, 1, 1, 1.0),
        }
    }

    /// View of channel block `part` (0 = q, 1 = k, 2 = v) of sample `ni` as a
    /// `c x P` matrix.
    fn view<'a, T>(&self, qkv: &'a Act<T>, part: usize, ni: usize) -> MatRef<'a, T> {
        let plane = qkv.h * qkv.w;
        MatRef {
            data: &qkv.data,
            offset: (part * self.c * qkv.n + ni) * plane,
            rows: self.c,
            cols: plane,
            rs: qkv.n * plane,
            cs: 1,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Act<T>) -> (Act<T>, AttnCache<T>) {
        let (normed, norm) = self.norm.forward(p, x);
        let qkv = self.qkv.forward(p, &normed);
        let (n, plane) = (x.n, x.plane());
        let scale = T::of(1.0 / (self.c as f64).sqrt());
        let mut weights = vec![T::zero(); n * plane * plane];
        let mut mixed = Act::zeros(self.c, n, x.h, x.w);
        for ni in 0..n {
            let a = &mut weights[ni * plane * plane..][..plane * plane];
            gemm(
                self.view(&qkv, 0, ni).t(),
                self.view(&qkv, 1, ni),
                T::zero(),
                MatMut::row_major(a, plane),
            );
            for row in a.chunks_mut(plane) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v * scale - max).exp();
                    sum = sum + *v;
                }
                row.iter_mut().for_each(|v| *v = *v / sum);
            }
            // mixed[c][p] = sum_q v[c][q] a[p][q]
            gemm(
                self.view(&qkv, 2, ni),
                MatRef::row_major(&*a, plane, plane).t(),
                T::zero(),
                MatMut {
                    data: &mut mixed.data,
                    offset: ni * plane,
                    rs: n * plane,
                    cs: 1,
                },
            );
        }
        let mut out = self.proj.forward(p, &mixed);
        out.add_assign(x);
        (
            out,
            AttnCache {
                norm,
                normed,
                qkv,
                weights,
                mixed,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, p: &[T], cache: &AttnCache<T>, dy: &Act<T>, grads: &mut [T]) -> Act<T> {
        let dmixed = self.proj.backward(p, &cache.mixed, dy, grads, true).unwrap();
        let qkv = &cache.qkv;
        let (n, plane) = (qkv.n, qkv.h * qkv.w);
        let scale = T::of(1.0 / (self.c as f64).sqrt());
        let mut dqkv = Act::zeros(3 * self.c, n, qkv.h, qkv.w);
        let mut da = vec![T::zero(); plane * plane];
        let dview = |ni: usize| MatRef {
            data: &dmixed.data,
            offset: ni * plane,
            rows: self.c,
            cols: plane,
            rs: n * plane,
            cs: 1,
        };
        for ni in 0..n {
            let a = &cache.weights[ni * plane * plane..][..plane * plane];
            let a_mat = MatRef::row_major(a, plane, plane);
            // dv = dmixed a
            gemm(
                dview(ni),
                a_mat,
                T::zero(),
                MatMut {
                    data: &mut dqkv.data,
                    offset: (2 * self.c * n + ni) * plane,
                    rs: n * plane,
                    cs: 1,
                },
            );
            // da = dmixed^T v
            gemm(
                dview(ni).t(),
                self.view(qkv, 2, ni),
                T::zero(),
                MatMut::row_major(&mut da, plane),
            );
            // softmax backward, folded with the logit scale
            for (drow, arow) in da.chunks_mut(plane).zip(a.chunks(plane)) {
                let dot: T = drow.iter().zip(arow).map(|(&d, &w)| d * w).sum();
                for (d, &w) in drow.iter_mut().zip(arow) {
                    *d = w * (*d - dot) * scale;
                }
            }
            let ds = MatRef::row_major(&da, plane, plane);
            // dq = k ds^T
            gemm(
                self.view(qkv, 1, ni),
                ds.t(),
                T::zero(),
                MatMut {
                    data: &mut dqkv.data,
                    offset: ni * plane,
                    rs: n * plane,
                    cs: 1,
                },
            );
            // dk = q ds
            gemm(
                self.view(qkv, 0, ni),
                ds,
                T::zero(),
                MatMut {
                    data: &mut dqkv.data,
                    offset: (self.c * n + ni) * plane,
                    rs: n * plane,
                    cs: 1,
                },
            );
        }
        let dnormed = self.qkv.backward(p, &cache.normed, &dqkv, grads, true).unwrap();
        let mut dx = self.norm.backward(p, &cache.norm, &dnormed, grads);
        dx.add_assign(dy);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn random_act(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Act<f64> {
        let mut r = rng(seed);
        Act {
            c,
            n,
            h,
            w,
            data: (0..c * n * h * w).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    fn params(table: &ParamTable, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..table.total()).map(|_| r.random_range(-0.5..0.5)).collect()
    }

    /// Reference direct convolution.
    fn conv_naive(conv: &Conv2d, p: &[f64], x: &Act<f64>) -> Act<f64> {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let mut out = Act::zeros(conv.cout, x.n, ho, wo);
        let w = &p[conv.weight.range()];
        let b = &p[conv.bias.range()];
        for co in 0..conv.cout {
            for ni in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..conv.cin {
                            for ky in 0..conv.k {
                                for kx in 0..conv.k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((ci * x.n + ni) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += w[((co * conv.cin + ci) * conv.k + ky) * conv.k + kx] * xv;
                                }
                            }
                        }
                        out.data[((co * x.n + ni) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (k, stride, h, w) in [(3, 1, 5, 6), (3, 2, 6, 6), (1, 1, 4, 3), (3, 2, 7, 5)] {
            let mut t = ParamTable::default();
            let conv = Conv2d::new(&mut t, "c", 3, 4, k, stride, 1.0);
            let p = params(&t, 1);
            let x = random_act(3, 2, h, w, 2);
            let fast = conv.forward(&p, &x);
            let slow = conv_naive(&conv, &p, &x);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Checks a layer's input and parameter gradients against central
    /// differences of `sum(out * probe)`.
    fn check_grads(
        table: &ParamTable,
        x: &Act<f64>,
        forward: &dyn Fn(&[f64], &Act<f64>) -> Act<f64>,
        backward: &dyn Fn(&[f64], &Act<f64>, &Act<f64>, &mut [f64]) -> Act<f64>,
    ) {
        let p = params(table, 7);
        let y = forward(&p, x);
        let probe = random_act(y.c, y.n, y.h, y.w, 11);
        let objective = |p: &[f64], x: &Act<f64>| -> f64 {
            forward(p, x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut g = vec![0.0; p.len()];
        let dx = backward(&p, x, &probe, &mut g);
        let h = 1e-6;
        for i in (0..p.len()).step_by(p.len() / 13 + 1) {
            let mut pp = p.clone();
            pp[i] += h;
            let up = objective(&pp, x);
            pp[i] -= 2.0 * h;
            let down = objective(&pp, x);
            let num = (up - down) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-6 * (1.0 + num.abs()), "param {i}: {num} vs {}", g[i]);
        }
        for i in (0..x.data.len()).step_by(x.data.len() / 11 + 1) {
            let mut xx = x.clone();
            xx.data[i] += h;
            let up = objective(&p, &xx);
            xx.data[i] -= 2.0 * h;
            let down = objective(&p, &xx);
            let num = (up - down) / (2.0 * h);
            assert!((num - dx.data[i]).abs() < 1e-6 * (1.0 + num.abs()), "input {i}: {num} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut t = ParamTable::default();
            let conv = Conv2d::new(&mut t, "c", 2, 3, k, stride, 1.0);
            let x = random_act(2, 2, 6, 6, 3);
            check_grads(&t, &x, &|p, x| conv.forward(p, x), &|p, x, dy, g| {
                conv.backward(p, x, dy, g, true).unwrap()
            });
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut t = ParamTable::default();
        let gn = GroupNorm::new(&mut t, "gn", 4, 2);
        let x = random_act(4, 2, 3, 3, 5);
        check_grads(&t, &x, &|p, x| gn.forward(p, x).0, &|p, x, dy, g| {
            let (_, cache) = gn.forward(p, x);
            gn.backward(p, &cache, dy, g)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut t = ParamTable::default();
        let attn = Attention::new(&mut t, "attn", 4, 2);
        let x = random_act(4, 2, 2, 3, 6);
        check_grads(&t, &x, &|p, x| attn.forward(p, x).0, &|p, x, dy, g| {
            let (_, cache) = attn.forward(p, x);
            attn.backward(p, &cache, dy, g)
        });
    }

    #[test]
    fn upsample_and_silu_gradients() {
        let t = ParamTable::default();
        let x = random_act(2, 1, 3, 2, 8);
        check_grads(&t, &x, &|_, x| upsample2(x), &|_, _, dy, _| upsample2_backward(dy));
        check_grads(&t, &x, &|_, x| silu_act(x), &|_, x, dy, _| silu_act_backward(x, dy));
    }

    #[test]
    fn linear_gradients() {
        let mut t = ParamTable::default();
        let lin = Linear::new(&mut t, "l", 3, 5);
        // a batch of 2 row vectors, carried in an Act with h = 1
        let x = random_act(1, 1, 2, 3, 9);
        check_grads(
            &t,
            &x,
            &|p, x| Act {
                c: 1,
                n: 1,
                h: 2,
                w: 5,
                data: lin.forward(p, &x.data, 2),
            },
            &|p, x, dy, g| Act {
                c: 1,
                n: 1,
                h: 2,
                w: 3,
                data: lin.backward(p, &x.data, &dy.data, 2, g, true).unwrap(),
            },
        );
    }
}
