//! Noise predictors ε_θ(x_t, t).
//!
//! Every diffusion and anomaly-scoring routine is written against the
//! [`Denoiser`] trait, so the exact oracles used in tests and the trainable
//! network are interchangeable.

pub mod layers;
pub mod tensor;
pub mod unet;

use std::sync::Arc;

pub use self::tensor::Scalar;
pub use self::unet::{UNetArch, UNetConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::schedule::NoiseSchedule;

pub trait Denoiser: Send + Sync {
    /// Predicted noise for state `x_t` at step `t`; same shape as the input.
    fn predict(&self, x_t: &Image, t: usize) -> Result<Image>;

    /// Predictions for several independent states. Implementations may
    /// evaluate them together; results must match per-item [`predict`].
    ///
    /// [`predict`]: Denoiser::predict
    fn predict_batch(&self, inputs: &[(&Image, usize)]) -> Result<Vec<Image>> {
        inputs.iter().map(|&(x, t)| self.predict(x, t)).collect()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, x_t: &Image, t: usize) -> Result<Image> {
        (**self).predict(x_t, t)
    }

    fn predict_batch(&self, inputs: &[(&Image, usize)]) -> Result<Vec<Image>> {
        (**self).predict_batch(inputs)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, x_t: &Image, t: usize) -> Result<Image> {
        (**self).predict(x_t, t)
    }

    fn predict_batch(&self, inputs: &[(&Image, usize)]) -> Result<Vec<Image>> {
        (**self).predict_batch(inputs)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict(&self, x_t: &Image, t: usize) -> Result<Image> {
        (**self).predict(x_t, t)
    }

    fn predict_batch(&self, inputs: &[(&Image, usize)]) -> Result<Vec<Image>> {
        (**self).predict_batch(inputs)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

pub fn zero_denoiser() -> ZeroDenoiser {
    ZeroDenoiser
}

impl Denoiser for ZeroDenoiser {
    fn predict(&self, x_t: &Image, _t: usize) -> Result<Image> {
        Ok(Image::zeros(x_t.height(), x_t.width()))
    }
}

/// Knows the clean image and returns the noise implied by the closed-form
/// forward process: `(x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t)`.
#[derive(Debug, Clone)]
pub struct PlantedDenoiser {
    x0: Image,
    schedule: NoiseSchedule,
}

pub fn planted_denoiser(x0: Image, schedule: &NoiseSchedule) -> PlantedDenoiser {
    PlantedDenoiser {
        x0,
        schedule: schedule.clone(),
    }
}

impl Denoiser for PlantedDenoiser {
    fn predict(&self, x_t: &Image, t: usize) -> Result<Image> {
        if t == 0 {
            return Err(Error::invalid("planted denoiser is undefined at t = 0"));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(&self.x0, |x, x0| (x - signal * x0) / noise)
    }
}

/// Maximum images per network evaluation; bounds activation memory.
const MAX_BATCH: usize = 64;

/// Trainable UNet with single-precision parameters.
#[derive(Debug, Clone)]
pub struct UNet {
    arch: Arc<UNetArch>,
    params: Vec<f32>,
}

pub fn build_unet(config: UNetConfig, seed: u64) -> Result<UNet> {
    let arch = UNetArch::new(config)?;
    let params = arch.init_params(seed);
    Ok(UNet {
        arch: Arc::new(arch),
        params,
    })
}

impl UNet {
    pub fn from_params(config: UNetConfig, params: Vec<f32>) -> Result<Self> {
        let arch = UNetArch::new(config)?;
        if params.len() != arch.param_count() {
            return Err(Error::invalid(format!(
                "architecture has {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            arch: Arc::new(arch),
            params,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn config(&self) -> &UNetConfig {
        self.arch.config()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&v| v as f64).collect()
    }
}

impl Denoiser for UNet {
    fn predict(&self, x_t: &Image, t: usize) -> Result<Image> {
        Ok(self.arch.predict_with(&self.params, &[x_t], &[t])?.remove(0))
    }

    fn predict_batch(&self, inputs: &[(&Image, usize)]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(MAX_BATCH) {
            let images: Vec<&Image> = chunk.iter().map(|(x, _)| *x).collect();
            let ts: Vec<usize> = chunk.iter().map(|(_, t)| *t).collect();
            out.extend(self.arch.predict_with(&self.params, &images, &ts)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_predicts_zero() {
        let x = Image::filled(3, 5, 0.7);
        assert_eq!(zero_denoiser().predict(&x, 12).unwrap(), Image::zeros(3, 5));
    }

    #[test]
    fn planted_rejects_step_zero_and_inverts_clean_signal() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = Image::from_fn(4, 4, |r, c| (r as f64 - c as f64) / 4.0);
        let d = planted_denoiser(x0.clone(), &s);
        assert!(d.predict(&x0, 0).is_err());
        assert!(d.predict(&x0, 101).is_err());
        let ab = s.alpha_bar(30).unwrap();
        let xt = x0.map(|v| v * ab.sqrt());
        let eps = d.predict(&xt, 30).unwrap();
        assert!(eps.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unet_rejects_incompatible_sizes() {
        let cfg = UNetConfig {
            base_channels: 4,
            channel_mults: vec![1, 2, 2],
            res_blocks: 1,
            time_dim: 8,
            attention: false,
            norm_groups: 2,
        };
        let net = build_unet(cfg, 0).unwrap();
        assert!(net.predict(&Image::zeros(8, 8), 3).is_ok());
        assert!(net.predict(&Image::zeros(6, 8), 3).is_err());
    }
}
