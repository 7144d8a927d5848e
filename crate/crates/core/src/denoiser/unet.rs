//! Time-conditioned convolutional UNet noise predictor.
//!
//! Layout: `conv_in`, then per resolution level `res_blocks` residual blocks
//! followed by a stride-2 downsampling conv (all but the deepest level); a
//! middle section of two residual blocks with optional self-attention; then
//! the mirrored decoder, which concatenates the encoder output of each level
//! before its residual blocks and upsamples (nearest + 3x3 conv) between
//! levels. The time step enters through a sinusoidal embedding, a two-layer
//! projection, and a per-block linear bias on the first conv output.

use serde::{Deserialize, Serialize};

use super::layers::{
    silu, silu_act, silu_act_backward, silu_backward, upsample2, upsample2_backward, Attention, AttnCache, Conv2d,
    GnCache, GroupNorm, Linear, ParamInfo, ParamTable,
};
use super::tensor::{Act, Scalar};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level, shallowest first.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub time_dim: usize,
    /// Self-attention in the middle (lowest-resolution) section.
    pub attention: bool,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            time_dim: 256,
            attention: false,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("unet needs positive base_channels and channel_mults".into());
        }
        if self.res_blocks == 0 {
            return bad("unet needs at least one residual block per level".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim must be even and >= 2, got {}", self.time_dim));
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        for level in 0..self.levels() {
            if !self.channels(level).is_multiple_of(self.norm_groups) {
                return bad(format!(
                    "{} channels at level {level} are not divisible by {} norm groups",
                    self.channels(level),
                    self.norm_groups
                ));
            }
        }
        Ok(())
    }

    /// Images must have sides divisible by `2^(levels - 1)`.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let div = 1usize << (self.levels() - 1);
        if height == 0 || width == 0 || !height.is_multiple_of(div) || !width.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "{height}x{width} input is incompatible with {} levels (sides must be multiples of {div})",
                self.levels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<T> {
    x: Act<T>,
    n1: GnCache<T>,
    a1: Act<T>,
    s1: Act<T>,
    n2: GnCache<T>,
    a2: Act<T>,
    s2: Act<T>,
}

impl ResBlock {
    fn new(table: &mut ParamTable, name: &str, cin: usize, cout: usize, time_dim: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(table, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(table, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0),
            time: Linear::new(table, &format!("{name}.time"), time_dim, cout),
            norm2: GroupNorm::new(table, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(table, &format!("{name}.conv2"), cout, cout, 3, 1, 1.0),
            skip: (cin != cout).then(|| Conv2d::new(table, &format!("{name}.skip"), cin, cout, 1, 1, 1.0)),
        }
    }

    fn forward<T: Scalar>(&self, p: &[T], x: Act<T>, st: &[T]) -> (Act<T>, ResCache<T>) {
        let (a1, n1) = self.norm1.forward(p, &x);
        let s1 = silu_act(&a1);
        let mut h = self.conv1.forward(p, &s1);
        let bias = self.time.forward(p, st, x.n);
        let plane = h.plane();
        for (row, chunk) in h.data.chunks_mut(plane).enumerate() {
            let (c, ni) = (row / x.n, row % x.n);
            let b = bias[ni * self.time.dout + c];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        let (a2, n2) = self.norm2.forward(p, &h);
        let s2 = silu_act(&a2);
        let mut y = self.conv2.forward(p, &s2);
        match &self.skip {
            Some(conv) => y.add_assign(&conv.forward(p, &x)),
            None => y.add_assign(&x),
        }
        (
            y,
            ResCache {
                x,
                n1,
                a1,
                s1,
                n2,
                a2,
                s2,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &ResCache<T>,
        dy: &Act<T>,
        st: &[T],
        grads: &mut [T],
        dst: &mut [T],
    ) -> Act<T> {
        let n = dy.n;
        let ds2 = self.conv2.backward(p, &cache.s2, dy, grads, true).unwrap();
        let da2 = silu_act_backward(&cache.a2, &ds2);
        let dh = self.norm2.backward(p, &cache.n2, &da2, grads);
        let cout = self.time.dout;
        let mut dbias = vec![T::zero(); n * cout];
        for (row, chunk) in dh.data.chunks(dh.plane()).enumerate() {
            let (c, ni) = (row / n, row % n);
            dbias[ni * cout + c] = dbias[ni * cout + c] + chunk.iter().copied().sum::<T>();
        }
        let d_st = self.time.backward(p, st, &dbias, n, grads, true).unwrap();
        for (a, b) in dst.iter_mut().zip(d_st) {
            *a = *a + b;
        }
        let ds1 = self.conv1.backward(p, &cache.s1, &dh, grads, true).unwrap();
        let da1 = silu_act_backward(&cache.a1, &ds1);
        let mut dx = self.norm1.backward(p, &cache.n1, &da1, grads);
        match &self.skip {
            Some(conv) => dx.add_assign(&conv.backward(p, &cache.x, dy, grads, true).unwrap()),
            None => dx.add_assign(dy),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    blocks: Vec<ResBlock>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    skip_channels: usize,
    blocks: Vec<ResBlock>,
    up: Option<Conv2d>,
}

/// Network structure and parameter layout, independent of the parameter
/// values and their precision.
#[derive(Debug, Clone)]
pub struct UNetArch {
    config: UNetConfig,
    table: ParamTable,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    attn: Option<Attention>,
    mid2: ResBlock,
    /// Deepest level first, in execution order.
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

struct Tape<T> {
    emb: Vec<T>,
    t1: Vec<T>,
    st1: Vec<T>,
    temb: Vec<T>,
    st: Vec<T>,
    x: Act<T>,
    down: Vec<(Vec<ResCache<T>>, Option<Act<T>>)>,
    mid1: ResCache<T>,
    attn: Option<AttnCache<T>>,
    mid2: ResCache<T>,
    up: Vec<(Vec<ResCache<T>>, Option<Act<T>>)>,
    out_n: GnCache<T>,
    out_a: Act<T>,
    out_s: Act<T>,
}

/// Sinusoidal embedding of integer steps, `[sin(t f_i) .., cos(t f_i) ..]`
/// with `f_i = 10000^(-i / half)`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(angles.iter().map(|a| T::of(a.sin())));
        out.extend(angles.iter().map(|a| T::of(a.cos())));
    }
    out
}

impl UNetArch {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut t = ParamTable::default();
        let td = config.time_dim;
        let g = config.norm_groups;
        let time1 = Linear::new(&mut t, "time.0", td, td);
        let time2 = Linear::new(&mut t, "time.1", td, td);
        let conv_in = Conv2d::new(&mut t, "conv_in", 1, config.channels(0), 3, 1, 1.0);
        let mut cur = config.channels(0);
        let mut down = Vec::new();
        for level in 0..config.levels() {
            let ch = config.channels(level);
            let blocks = (0..config.res_blocks)
                .map(|b| {
                    let block = ResBlock::new(&mut t, &format!("down.{level}.{b}"), cur, ch, td, g);
                    cur = ch;
                    block
                })
                .collect();
            let down_conv = (level + 1 < config.levels())
                .then(|| Conv2d::new(&mut t, &format!("down.{level}.downsample"), cur, cur, 3, 2, 1.0));
            down.push(DownLevel {
                blocks,
                down: down_conv,
            });
        }
        let mid1 = ResBlock::new(&mut t, "mid.0", cur, cur, td, g);
        let attn = config.attention.then(|| Attention::new(&mut t, "mid.attn", cur, g));
        let mid2 = ResBlock::new(&mut t, "mid.1", cur, cur, td, g);
        let mut up = Vec::new();
        for level in (0..config.levels()).rev() {
            let ch = config.channels(level);
            let blocks = (0..config.res_blocks)
                .map(|b| {
                    let cin = if b == 0 { cur + ch } else { ch };
                    ResBlock::new(&mut t, &format!("up.{level}.{b}"), cin, ch, td, g)
                })
                .collect();
            cur = ch;
            let up_conv = (level > 0).then(|| Conv2d::new(&mut t, &format!("up.{level}.upsample"), cur, cur, 3, 1, 1.0));
            up.push(UpLevel {
                skip_channels: ch,
                blocks,
                up: up_conv,
            });
        }
        let out_norm = GroupNorm::new(&mut t, "out.norm", cur, g);
        let conv_out = Conv2d::new(&mut t, "out.conv", cur, 1, 3, 1, 0.1);
        Ok(Self {
            config,
            table: t,
            time1,
            time2,
            conv_in,
            down,
            mid1,
            attn,
            mid2,
            up,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.table.total()
    }

    /// Parameter blocks in storage order.
    pub fn param_layout(&self) -> &[ParamInfo] {
        self.table.entries()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        self.table.initialize(&mut rng(seed))
    }

    fn run<T: Scalar>(&self, p: &[T], x: Act<T>, ts: &[usize], keep: bool) -> (Act<T>, Option<Tape<T>>) {
        let n = x.n;
        let td = self.config.time_dim;
        let emb = timestep_embedding::<T>(ts, td);
        let t1 = self.time1.forward(p, &emb, n);
        let st1 = silu(&t1);
        let temb = self.time2.forward(p, &st1, n);
        let st = silu(&temb);

        let x_in = if keep { Some(x.clone()) } else { None };
        let mut h = self.conv_in.forward(p, &x);
        let mut skips = Vec::new();
        let mut down_caches = Vec::new();
        for level in &self.down {
            let mut caches = Vec::new();
            for block in &level.blocks {
                let (y, cache) = block.forward(p, h, &st);
                h = y;
                if keep {
                    caches.push(cache);
                }
            }
            skips.push(h.clone());
            let mut down_in = None;
            if let Some(conv) = &level.down {
                let y = conv.forward(p, &h);
                if keep {
                    down_in = Some(h);
                }
                h = y;
            }
            down_caches.push((caches, down_in));
        }
        let (y, mid1) = self.mid1.forward(p, h, &st);
        h = y;
        let mut attn_cache = None;
        if let Some(attn) = &self.attn {
            let (y, cache) = attn.forward(p, &h);
            h = y;
            attn_cache = keep.then_some(cache);
        }
        let (y, mid2) = self.mid2.forward(p, h, &st);
        h = y;
        let mut up_caches = Vec::new();
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = h.concat(&skip);
            let mut caches = Vec::new();
            for block in &level.blocks {
                let (y, cache) = block.forward(p, h, &st);
                h = y;
                if keep {
                    caches.push(cache);
                }
            }
            let mut up_in = None;
            if let Some(conv) = &level.up {
                let u = upsample2(&h);
                h = conv.forward(p, &u);
                if keep {
                    up_in = Some(u);
                }
            }
            up_caches.push((caches, up_in));
        }
        let (out_a, out_n) = self.out_norm.forward(p, &h);
        let out_s = silu_act(&out_a);
        let out = self.conv_out.forward(p, &out_s);
        let tape = x_in.map(|x| Tape {
            emb,
            t1,
            st1,
            temb,
            st,
            x,
            down: down_caches,
            mid1,
            attn: attn_cache,
            mid2,
            up: up_caches,
            out_n,
            out_a,
            out_s,
        });
        (out, tape)
    }

    fn backprop<T: Scalar>(&self, p: &[T], tape: &Tape<T>, dout: &Act<T>, grads: &mut [T]) {
        let n = dout.n;
        let mut dst = vec![T::zero(); tape.st.len()];
        let ds = self.conv_out.backward(p, &tape.out_s, dout, grads, true).unwrap();
        let da = silu_act_backward(&tape.out_a, &ds);
        let mut dh = self.out_norm.backward(p, &tape.out_n, &da, grads);
        let mut dskips = Vec::new();
        for (level, (caches, up_in)) in self.up.iter().zip(&tape.up).rev() {
            if let (Some(conv), Some(u)) = (&level.up, up_in) {
                let du = conv.backward(p, u, &dh, grads, true).unwrap();
                dh = upsample2_backward(&du);
            }
            for (block, cache) in level.blocks.iter().zip(caches).rev() {
                dh = block.backward(p, cache, &dh, &tape.st, grads, &mut dst);
            }
            let (rest, dskip) = dh.split_tail(level.skip_channels);
            dh = rest;
            dskips.push(dskip);
        }
        // dskips now runs shallowest level first
        dh = self.mid2.backward(p, &tape.mid2, &dh, &tape.st, grads, &mut dst);
        if let (Some(attn), Some(cache)) = (&self.attn, &tape.attn) {
            dh = attn.backward(p, cache, &dh, grads);
        }
        dh = self.mid1.backward(p, &tape.mid1, &dh, &tape.st, grads, &mut dst);
        for ((level, (caches, down_in)), dskip) in self.down.iter().zip(&tape.down).zip(&dskips).rev() {
            if let (Some(conv), Some(x)) = (&level.down, down_in) {
                dh = conv.backward(p, x, &dh, grads, true).unwrap();
            }
            dh.add_assign(dskip);
            for (block, cache) in level.blocks.iter().zip(caches).rev() {
                dh = block.backward(p, cache, &dh, &tape.st, grads, &mut dst);
            }
        }
        self.conv_in.backward(p, &tape.x, &dh, grads, false);

        let dtemb = silu_backward(&tape.temb, &dst);
        let dst1 = self.time2.backward(p, &tape.st1, &dtemb, n, grads, true).unwrap();
        let dt1 = silu_backward(&tape.t1, &dst1);
        self.time1.backward(p, &tape.emb, &dt1, n, grads, false);
    }

    fn pack<T: Scalar>(&self, images: &[&Image]) -> Result<Act<T>> {
        let first = images.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w) = first.shape();
        self.config.check_input(h, w)?;
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            img.ensure_shape((h, w))?;
            data.extend(img.as_slice().iter().map(|&v| T::of(v)));
        }
        Ok(Act {
            c: 1,
            n: images.len(),
            h,
            w,
            data,
        })
    }

    /// Noise predictions for a batch of states at per-sample steps.
    pub fn predict_with<T: Scalar>(&self, p: &[T], images: &[&Image], ts: &[usize]) -> Result<Vec<Image>> {
        if images.len() != ts.len() {
            return Err(Error::invalid("one step per image required"));
        }
        if p.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let x = self.pack::<T>(images)?;
        let (h, w) = (x.h, x.w);
        let (out, _) = self.run(p, x, ts, false);
        out.data
            .chunks(h * w)
            .map(|c| Image::new(h, w, c.iter().map(|v| v.f64()).collect()))
            .collect()
    }

    /// Mean squared error between predictions and `targets`, and its
    /// gradient with respect to every parameter.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        p: &[T],
        inputs: &[&Image],
        ts: &[usize],
        targets: &[&Image],
    ) -> Result<(f64, Vec<T>)> {
        if inputs.len() != ts.len() || inputs.len() != targets.len() {
            return Err(Error::invalid("inputs, steps and targets must have equal length"));
        }
        let x = self.pack::<T>(inputs)?;
        let target = self.pack::<T>(targets)?;
        if (target.h, target.w) != (x.h, x.w) {
            return Err(Error::ShapeMismatch {
                expected: (x.h, x.w),
                actual: (target.h, target.w),
            });
        }
        let (out, tape) = self.run(p, x, ts, true);
        let count = out.data.len() as f64;
        let mut loss = 0.0;
        let scale = T::of(2.0 / count);
        let mut dout = Act::zeros(1, out.n, out.h, out.w);
        for ((d, &o), &y) in dout.data.iter_mut().zip(&out.data).zip(&target.data) {
            let diff = o - y;
            loss += diff.f64() * diff.f64();
            *d = diff * scale;
        }
        let mut grads = vec![T::zero(); p.len()];
        self.backprop(p, tape.as_ref().unwrap(), &dout, &mut grads);
        Ok((loss / count, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            time_dim: 8,
            attention: true,
            norm_groups: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let mut c = tiny();
        c.time_dim = 7;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.norm_groups = 3;
        assert!(c.validate().is_err());
        assert!(tiny().check_input(8, 6).is_ok());
        assert!(tiny().check_input(8, 5).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding::<f64>(&[0, 3], 4);
        assert_eq!(&e[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e[5] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn shape_preserving_and_seeded() {
        let arch = UNetArch::new(tiny()).unwrap();
        let p = arch.init_params(5);
        assert_eq!(p, arch.init_params(5));
        assert_ne!(p, arch.init_params(6));
        let x = Image::from_fn(8, 12, |r, c| ((r * 3 + c) as f64 * 0.1).sin());
        let out = arch.predict_with(&p, &[&x, &x], &[10, 20]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), (8, 12));
        assert!(out[0].is_finite());
        assert_ne!(out[0], out[1]);
    }

    #[test]
    fn batch_members_are_independent() {
        let arch = UNetArch::new(tiny()).unwrap();
        let p: Vec<f64> = arch.init_params(1).iter().map(|&v| v as f64).collect();
        let a = Image::from_fn(4, 4, |r, c| (r as f64 - c as f64) * 0.2);
        let b = Image::from_fn(4, 4, |r, c| (r * c) as f64 * 0.05);
        let single = arch.predict_with(&p, &[&a], &[7]).unwrap();
        let batched = arch.predict_with(&p, &[&b, &a], &[3, 7]).unwrap();
        assert!(single[0].max_abs_diff(&batched[1]).unwrap() < 1e-12);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let arch = UNetArch::new(tiny()).unwrap();
        let p: Vec<f64> = arch.init_params(2).iter().map(|&v| v as f64).collect();
        let x = Image::from_fn(4, 4, |r, c| ((r * 4 + c) as f64 * 0.7).cos());
        let y = Image::from_fn(4, 4, |r, c| ((r + 2 * c) as f64 * 0.3).sin());
        let x2 = y.map(|v| -v * 0.5);
        let inputs = [&x, &x2];
        let targets = [&y, &x];
        let ts = [5, 40];
        let (_, g) = arch.loss_and_grad(&p, &inputs, &ts, &targets).unwrap();
        let h = 1e-6;
        for i in (0..p.len()).step_by(17) {
            let mut pp = p.clone();
            pp[i] += h;
            let up = arch.loss_and_grad(&pp, &inputs, &ts, &targets).unwrap().0;
            pp[i] -= 2.0 * h;
            let down = arch.loss_and_grad(&pp, &inputs, &ts, &targets).unwrap().0;
            let num = (up - down) / (2.0 * h);
            assert!(
                (num - g[i]).abs() <= 1e-6 + 1e-4 * num.abs(),
                "{}: {num} vs {}",
                i,
                g[i]
            );
        }
    }
}
