//! Structural similarity between two images.
//!
//! Local statistics are weighted averages over a square window slid across
//! every position where it fits entirely inside the frame (no padding).
//! Variances and covariance are the weighted population moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    /// Odd window side.
    pub window: usize,
    pub weighting: Weighting,
    /// Standard deviation of the Gaussian window, in pixels.
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the data; 2 for values in [-1, 1].
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            weighting: Weighting::Uniform,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 2.0,
        }
    }
}

impl SsimParams {
    /// 11×11 Gaussian window with σ = 1.5.
    pub fn gaussian() -> Self {
        Self {
            window: 11,
            weighting: Weighting::Gaussian,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ssim window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if !(self.c1() > 0.0 && self.c2() > 0.0) {
            return Err(Error::Config("ssim constants must be positive".into()));
        }
        if self.weighting == Weighting::Gaussian && !(self.sigma > 0.0) {
            return Err(Error::Config("ssim sigma must be positive".into()));
        }
        Ok(())
    }

    /// Normalized one-dimensional window weights.
    fn weights(&self) -> Vec<f64> {
        let n = self.window;
        match self.weighting {
            Weighting::Uniform => vec![1.0 / n as f64; n],
            Weighting::Gaussian => {
                let half = (n / 2) as f64;
                let w: Vec<f64> = (0..n)
                    .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
                    .collect();
                let sum: f64 = w.iter().sum();
                w.into_iter().map(|v| v / sum).collect()
            }
        }
    }
}

/// Local SSIM values; entry `(r, c)` belongs to the window centred at
/// `(r + window / 2, c + window / 2)`.
pub fn ssim_map(a: &Image, b: &Image, params: &SsimParams) -> Result<Image> {
    params.validate()?;
    a.ensure_shape(b.shape())?;
    let (h, w) = a.shape();
    let k = params.window;
    if h < k || w < k {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {k}x{k} ssim window"
        )));
    }
    let weights = params.weights();
    let filter = |img: &Image| separable_valid(img, &weights);
    let mu_a = filter(a);
    let mu_b = filter(b);
    let aa = filter(&a.map(|v| v * v));
    let bb = filter(&b.map(|v| v * v));
    let ab = filter(&a.zip_map(b, |x, y| x * y)?);
    let (c1, c2) = (params.c1(), params.c2());
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        out.push((num / den).clamp(-1.0, 1.0));
    }
    Image::new(oh, ow, out)
}

/// Mean local SSIM over every window position.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    Ok(ssim_map(a, b, params)?.mean())
}

/// Mean local SSIM over windows centred on reconstructed pixels (`m = 0`).
pub fn ssim_in_region(a: &Image, b: &Image, mask: &Mask, params: &SsimParams) -> Result<f64> {
    mask.ensure_shape(a.shape())?;
    let map = ssim_map(a, b, params)?;
    let half = params.window / 2;
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..map.height() {
        for c in 0..map.width() {
            if !mask.get(r + half, c + half) {
                sum += map[(r, c)];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("no ssim window is centred inside the reconstructed region"));
    }
    Ok(sum / count as f64)
}

/// Weighted window sums at every valid position, flattened row-major.
fn separable_valid(img: &Image, weights: &[f64]) -> Vec<f64> {
    let (h, w) = img.shape();
    let k = weights.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let src = img.as_slice();
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = weights.iter().zip(&line[c..c + k]).map(|(wt, v)| wt * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (j, wt) in weights.iter().enumerate() {
            let src_row = &rows[(r + j) * ow..(r + j + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src_row) {
                *o += wt * v;
            }
        }
    }
    out
}
