//! Seeded noise fields: Gaussian, multi-scale pyramid, and octave simplex.
//!
//! Pyramid and simplex fields are re-standardized to zero mean and unit
//! standard deviation per sample so that the forward process injects the
//! same noise energy whichever distribution is selected. Gaussian fields are
//! raw i.i.d. standard normal draws.

mod simplex;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use self::simplex::Simplex2;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidParams {
    pub levels: usize,
    pub scale: f64,
}

impl Default for PyramidParams {
    fn default() -> Self {
        Self {
            levels: 10,
            scale: 0.8,
        }
    }
}

impl PyramidParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::invalid(format!(
                "pyramid scale must be in (0, 1], got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimplexParams {
    /// Starting frequency, in lattice cells per pixel.
    pub nu: f64,
    pub octaves: usize,
    /// Amplitude decay per octave.
    pub gamma: f64,
}

impl Default for SimplexParams {
    fn default() -> Self {
        Self {
            nu: 2f64.powi(-6),
            octaves: 6,
            gamma: 0.8,
        }
    }
}

impl SimplexParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::invalid(format!("simplex nu must be positive, got {}", self.nu)));
        }
        if self.octaves == 0 {
            return Err(Error::invalid("simplex needs at least one octave"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "simplex gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Noise distribution selector, as written in run configs
/// (`kind = "gaussian" | "pyramid" | "simplex"` plus parameters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum NoiseKind {
    #[default]
    Gaussian,
    Pyramid(PyramidParams),
    Simplex(SimplexParams),
}


impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Pyramid(_) => "pyramid",
            NoiseKind::Simplex(_) => "simplex",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseKind::Gaussian => Ok(()),
            NoiseKind::Pyramid(p) => p.validate(),
            NoiseKind::Simplex(p) => p.validate(),
        }
    }

    pub fn sample(&self, height: usize, width: usize, seed: u64) -> Result<NoiseField> {
        match *self {
            NoiseKind::Gaussian => sample_gaussian(height, width, seed),
            NoiseKind::Pyramid(p) => sample_pyramid(height, width, seed, p),
            NoiseKind::Simplex(p) => sample_simplex(height, width, seed, p),
        }
    }
}

/// Which generator and seed produced a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub kind: NoiseKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub values: Image,
    pub provenance: Provenance,
}

impl NoiseField {
    /// Wraps an arbitrary image as noise, e.g. an all-zero field for
    /// noiseless oracle runs.
    pub fn from_image(values: Image) -> Self {
        Self {
            values,
            provenance: Provenance {
                kind: NoiseKind::Gaussian,
                seed: 0,
            },
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_image(Image::zeros(height, width))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn into_image(self) -> Image {
        self.values
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "noise field dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Zero mean, unit population standard deviation. A constant field has no
/// scale to recover and is returned centred.
fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-300 {
        values.iter_mut().for_each(|v| *v = (*v - mean) / std);
    } else {
        values.iter_mut().for_each(|v| *v -= mean);
    }
}

pub fn sample_gaussian(height: usize, width: usize, seed: u64) -> Result<NoiseField> {
    check_dims(height, width)?;
    let mut rng = rng(seed);
    let values = Image::new(height, width, gaussian_vec(&mut rng, height * width))?;
    Ok(NoiseField {
        values,
        provenance: Provenance {
            kind: NoiseKind::Gaussian,
            seed,
        },
    })
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn upscale_bilinear(src: &[f64], src_h: usize, src_w: usize, height: usize, width: usize) -> Vec<f64> {
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..width).map(|c| axis(c, src_w, width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1, fr) = axis(r, src_h, height);
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * src_w + c0] * (1.0 - fc) + src[r0 * src_w + c1] * fc;
            let bottom = src[r1 * src_w + c0] * (1.0 - fc) + src[r1 * src_w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Weighted sum of bilinearly upscaled Gaussian fields. Level `i` (1-based)
/// is drawn at `ceil(H / 2^(i-1)) x ceil(W / 2^(i-1))` and weighted by
/// `scale^i`; levels stop once a 1x1 field has been used.
pub fn sample_pyramid(height: usize, width: usize, seed: u64, params: PyramidParams) -> Result<NoiseField> {
    check_dims(height, width)?;
    params.validate()?;
    let mut acc = vec![0.0; height * width];
    for level in 1..=params.levels {
        let div = 1usize << (level - 1).min(62);
        let h = height.div_ceil(div).max(1);
        let w = width.div_ceil(div).max(1);
        let mut level_rng = rng(derive_seed(seed, &[level as u64]));
        let coarse = gaussian_vec(&mut level_rng, h * w);
        let weight = params.scale.powi(level as i32);
        let up = if (h, w) == (height, width) {
            coarse
        } else {
            upscale_bilinear(&coarse, h, w, height, width)
        };
        for (a, v) in acc.iter_mut().zip(up) {
            *a += weight * v;
        }
        if h == 1 && w == 1 {
            break;
        }
    }
    standardize(&mut acc);
    Ok(NoiseField {
        values: Image::new(height, width, acc)?,
        provenance: Provenance {
            kind: NoiseKind::Pyramid(params),
            seed,
        },
    })
}

/// Octave-summed simplex noise: octave `k` is sampled at frequency
/// `nu * 2^k` with amplitude `gamma^k`.
pub fn sample_simplex(height: usize, width: usize, seed: u64, params: SimplexParams) -> Result<NoiseField> {
    check_dims(height, width)?;
    params.validate()?;
    let mut rng = rng(seed);
    let noise = Simplex2::new(&mut rng);
    // Per-octave lattice offsets keep octaves from sharing the origin.
    let offsets: Vec<(f64, f64)> = (0..params.octaves)
        .map(|_| (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)))
        .collect();
    let mut acc = vec![0.0; height * width];
    for (k, &(ox, oy)) in offsets.iter().enumerate() {
        let freq = params.nu * 2f64.powi(k as i32);
        let amp = params.gamma.powi(k as i32);
        for r in 0..height {
            for c in 0..width {
                acc[r * width + c] += amp * noise.sample(c as f64 * freq + ox, r as f64 * freq + oy);
            }
        }
    }
    standardize(&mut acc);
    Ok(NoiseField {
        values: Image::new(height, width, acc)?,
        provenance: Provenance {
            kind: NoiseKind::Simplex(params),
            seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dimensions_rejected() {
        assert!(sample_gaussian(0, 4, 1).is_err());
        assert!(sample_pyramid(4, 0, 1, PyramidParams::default()).is_err());
        assert!(sample_simplex(0, 0, 1, SimplexParams::default()).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = PyramidParams { levels: 0, scale: 0.8 };
        assert!(sample_pyramid(4, 4, 1, bad).is_err());
        let bad = SimplexParams { gamma: 1.5, ..Default::default() };
        assert!(sample_simplex(4, 4, 1, bad).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [
            NoiseKind::Gaussian,
            NoiseKind::Pyramid(PyramidParams::default()),
            NoiseKind::Simplex(SimplexParams::default()),
        ] {
            let a = kind.sample(17, 23, 9).unwrap();
            let b = kind.sample(17, 23, 9).unwrap();
            let c = kind.sample(17, 23, 10).unwrap();
            assert_eq!(a.values, b.values);
            assert_ne!(a.values, c.values);
            assert!(a.values.is_finite());
        }
    }

    #[test]
    fn single_level_pyramid_is_normalized_gaussian() {
        let params = PyramidParams { levels: 1, scale: 0.8 };
        let field = sample_pyramid(8, 8, 4, params).unwrap();
        let mut raw = gaussian_vec(&mut rng(derive_seed(4, &[1])), 64);
        standardize(&mut raw);
        for (a, b) in field.values.as_slice().iter().zip(&raw) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let out = upscale_bilinear(&[2.5], 1, 1, 3, 5);
        assert!(out.iter().all(|&v| v == 2.5));
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(upscale_bilinear(&src, 3, 4, 3, 4), src);
        // 2x upscale of [0, 1] along a row, half-pixel centres
        let up = upscale_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn normalized_generators_hit_unit_moments() {
        for kind in [
            NoiseKind::Pyramid(PyramidParams::default()),
            NoiseKind::Simplex(SimplexParams::default()),
        ] {
            let f = kind.sample(64, 64, 1).unwrap().values;
            assert!(f.mean().abs() < 1e-12);
            assert!((f.std() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_round_trip() {
        let kind: NoiseKind = toml::from_str("kind = \"simplex\"\noctaves = 4").unwrap();
        assert_eq!(
            kind,
            NoiseKind::Simplex(SimplexParams { octaves: 4, ..Default::default() })
        );
        let kind: NoiseKind = toml::from_str("kind = \"gaussian\"").unwrap();
        assert_eq!(kind, NoiseKind::Gaussian);
        assert!(toml::from_str::<NoiseKind>("kind = \"pyramid\"\nlevls = 3").is_err());
    }
}
