//! Forward corruption, reverse denoising steps, the noise-prediction loss,
//! and unconditional sampling.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::NoiseKind;
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;

/// Standard deviation of the noise injected by a reverse step.
///
/// `SqrtBeta` is the usual DDPM posterior choice σ_t = √β_t. `Beta` uses
/// β_t itself, and `None` gives a deterministic chain. Whatever the choice,
/// the last step (t = 1) injects no noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    #[default]
    SqrtBeta,
    Beta,
    None,
}

impl ReverseVariance {
    pub fn sigma(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        let beta = schedule.beta(t)?;
        if t == 1 {
            return Ok(0.0);
        }
        Ok(match self {
            ReverseVariance::SqrtBeta => beta.sqrt(),
            ReverseVariance::Beta => beta,
            ReverseVariance::None => 0.0,
        })
    }
}

/// A diffusion chain state `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub image: Image,
    pub t: usize,
}

/// Closed-form corruption `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(x0: &Image, t: usize, schedule: &NoiseSchedule, eps: &Image) -> Result<Image> {
    let ab = schedule.alpha_bar(t)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| signal * x + noise * e)
}

/// One reverse step given an already computed noise prediction.
pub fn reverse_step_with_prediction(
    x_t: &Image,
    t: usize,
    predicted: &Image,
    schedule: &NoiseSchedule,
    eps: &Image,
    variance: ReverseVariance,
) -> Result<Image> {
    schedule.check_reverse_step(t)?;
    predicted.ensure_shape(x_t.shape())?;
    eps.ensure_shape(x_t.shape())?;
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = variance.sigma(schedule, t)?;
    let data = x_t
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .zip(eps.as_slice())
        .map(|((&x, &p), &e)| inv * (x - coef * p) + sigma * e)
        .collect();
    Image::new(x_t.height(), x_t.width(), data)
}

/// `x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - ab_t) * eps_theta(x_t, t)) / sqrt(a_t) + sigma_t eps`.
pub fn reverse_step<D: Denoiser + ?Sized>(
    x_t: &Image,
    t: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    eps: &Image,
    variance: ReverseVariance,
) -> Result<Image> {
    if t == 0 {
        return Err(Error::invalid("no reverse step below t = 0"));
    }
    schedule.check_reverse_step(t)?;
    let predicted = denoiser.predict(x_t, t)?;
    reverse_step_with_prediction(x_t, t, &predicted, schedule, eps, variance)
}

/// Clean images with their sampled steps and injected noise.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    images: Vec<Image>,
    steps: Vec<usize>,
    noises: Vec<Image>,
}

impl TrainingBatch {
    pub fn new(images: Vec<Image>, steps: Vec<usize>, noises: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        if images.len() != steps.len() || images.len() != noises.len() {
            return Err(Error::invalid("batch needs one step and one noise field per image"));
        }
        let shape = images[0].shape();
        for (img, eps) in images.iter().zip(&noises) {
            img.ensure_shape(shape)?;
            eps.ensure_shape(shape)?;
        }
        if steps.contains(&0) {
            return Err(Error::invalid("training steps start at 1"));
        }
        Ok(Self { images, steps, noises })
    }

    /// Draws `size` images from `dataset` with replacement, steps uniform
    /// over `1..=T`, and noise from `noise`.
    pub fn sample(
        dataset: &[Image],
        size: usize,
        schedule: &NoiseSchedule,
        noise: &NoiseKind,
        seed: u64,
    ) -> Result<Self> {
        use rand::Rng as _;
        if dataset.is_empty() || size == 0 {
            return Err(Error::invalid("cannot sample a batch from an empty dataset"));
        }
        let mut rng = crate::rng::rng(seed);
        let mut images = Vec::with_capacity(size);
        let mut steps = Vec::with_capacity(size);
        let mut noises = Vec::with_capacity(size);
        for i in 0..size {
            let img = &dataset[rng.random_range(0..dataset.len())];
            steps.push(rng.random_range(1..=schedule.steps()));
            noises.push(noise.sample(img.height(), img.width(), derive_seed(seed, &[i as u64]))?.values);
            images.push(img.clone());
        }
        Self::new(images, steps, noises)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn noises(&self) -> &[Image] {
        &self.noises
    }

    /// The corrupted inputs `x_t` the denoiser sees.
    pub fn noisy_inputs(&self, schedule: &NoiseSchedule) -> Result<Vec<Image>> {
        self.images
            .iter()
            .zip(&self.steps)
            .zip(&self.noises)
            .map(|((x0, &t), eps)| forward_diffuse(x0, t, schedule, eps))
            .collect()
    }
}

/// Mean squared error between injected and predicted noise, averaged over
/// pixels and batch.
pub fn training_loss<D: Denoiser + ?Sized>(batch: &TrainingBatch, denoiser: &D, schedule: &NoiseSchedule) -> Result<f64> {
    let inputs = batch.noisy_inputs(schedule)?;
    let queries: Vec<(&Image, usize)> = inputs.iter().zip(batch.steps.iter().copied()).collect();
    let preds = denoiser.predict_batch(&queries)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pred, eps) in preds.iter().zip(&batch.noises) {
        pred.ensure_shape(eps.shape())?;
        total += pred
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>();
        count += eps.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    pub height: usize,
    pub width: usize,
    pub noise: NoiseKind,
    pub variance: ReverseVariance,
}

/// Runs full reverse chains from `x_T ~ noise` and clamps the results to
/// `[-1, 1]`. Chains advance in lockstep so the denoiser sees them as one
/// batch per step.
pub fn generate<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    options: &SamplerOptions,
    seed: u64,
    count: usize,
) -> Result<Vec<Image>> {
    let (h, w) = (options.height, options.width);
    let steps = schedule.steps();
    let seeds: Vec<u64> = (0..count as u64).map(|i| derive_seed(seed, &[i])).collect();
    let mut states = seeds
        .iter()
        .map(|&s| Ok(options.noise.sample(h, w, derive_seed(s, &[0]))?.values))
        .collect::<Result<Vec<_>>>()?;
    for t in (1..=steps).rev() {
        if states.is_empty() {
            break;
        }
        let queries: Vec<(&Image, usize)> = states.iter().map(|x| (x, t)).collect();
        let preds = denoiser.predict_batch(&queries)?;
        states = states
            .iter()
            .zip(&preds)
            .zip(&seeds)
            .map(|((x, pred), &s)| {
                let eps = if t > 1 {
                    options.noise.sample(h, w, derive_seed(s, &[t as u64]))?.values
                } else {
                    Image::zeros(h, w)
                };
                reverse_step_with_prediction(x, t, pred, schedule, &eps, options.variance)
            })
            .collect::<Result<_>>()?;
    }
    Ok(states.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{planted_denoiser, zero_denoiser};
    use crate::noise::sample_gaussian;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(500, 1e-4, 0.02).unwrap()
    }

    fn img(seed: u64) -> Image {
        sample_gaussian(8, 8, seed).unwrap().values.map(|v| (v * 0.4).clamp(-1.0, 1.0))
    }

    #[test]
    fn forward_limits() {
        let s = schedule();
        let x0 = img(1);
        let eps = sample_gaussian(8, 8, 2).unwrap().values;
        assert_eq!(forward_diffuse(&x0, 0, &s, &eps).unwrap(), x0);
        let ab = s.alpha_bar(120).unwrap();
        let no_noise = forward_diffuse(&x0, 120, &s, &Image::zeros(8, 8)).unwrap();
        assert!(no_noise.max_abs_diff(&x0.map(|v| v * ab.sqrt())).unwrap() < 1e-15);
        let no_signal = forward_diffuse(&Image::zeros(8, 8), 120, &s, &eps).unwrap();
        assert!(no_signal.max_abs_diff(&eps.map(|v| v * (1.0 - ab).sqrt())).unwrap() < 1e-15);
        assert!(forward_diffuse(&x0, 501, &s, &eps).is_err());
        assert!(forward_diffuse(&x0, 3, &s, &Image::zeros(4, 8)).is_err());
    }

    #[test]
    fn reverse_with_zero_noise_and_zero_prediction_rescales() {
        let s = schedule();
        let x = img(3);
        let out = reverse_step(&x, 200, &zero_denoiser(), &s, &Image::zeros(8, 8), ReverseVariance::SqrtBeta).unwrap();
        let a = s.alpha(200).unwrap();
        assert!(out.max_abs_diff(&x.map(|v| v / a.sqrt())).unwrap() < 1e-15);
        assert!(reverse_step(&x, 0, &zero_denoiser(), &s, &Image::zeros(8, 8), ReverseVariance::SqrtBeta).is_err());
    }

    #[test]
    fn planted_inverts_first_step_exactly() {
        let s = schedule();
        let x0 = img(4);
        let eps = sample_gaussian(8, 8, 5).unwrap().values;
        let x1 = forward_diffuse(&x0, 1, &s, &eps).unwrap();
        let d = planted_denoiser(x0.clone(), &s);
        let out = reverse_step(&x1, 1, &d, &s, &Image::zeros(8, 8), ReverseVariance::SqrtBeta).unwrap();
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-6);
    }

    #[test]
    fn variance_choices() {
        let s = schedule();
        assert_eq!(ReverseVariance::SqrtBeta.sigma(&s, 1).unwrap(), 0.0);
        assert_eq!(ReverseVariance::SqrtBeta.sigma(&s, 500).unwrap(), 0.02f64.sqrt());
        assert_eq!(ReverseVariance::Beta.sigma(&s, 500).unwrap(), 0.02);
        assert_eq!(ReverseVariance::None.sigma(&s, 500).unwrap(), 0.0);
    }

    #[test]
    fn loss_of_exact_and_offset_predictors() {
        let s = schedule();
        let images: Vec<Image> = (0..3).map(img).collect();
        let batch = TrainingBatch::sample(&images, 4, &s, &NoiseKind::Gaussian, 9).unwrap();
        struct Exact<'a>(&'a TrainingBatch, &'a NoiseSchedule, f64);
        impl Denoiser for Exact<'_> {
            fn predict(&self, x_t: &Image, t: usize) -> Result<Image> {
                let inputs = self.0.noisy_inputs(self.1)?;
                let i = inputs
                    .iter()
                    .zip(self.0.steps())
                    .position(|(x, &s)| x == x_t && s == t)
                    .unwrap();
                Ok(self.0.noises()[i].map(|v| v + self.2))
            }
        }
        assert_eq!(training_loss(&batch, &Exact(&batch, &s, 0.0), &s).unwrap(), 0.0);
        let l = training_loss(&batch, &Exact(&batch, &s, 0.3), &s).unwrap();
        assert!((l - 0.09).abs() < 1e-12);
        assert!(TrainingBatch::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn generate_edge_cases() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let opts = SamplerOptions {
            height: 4,
            width: 4,
            noise: NoiseKind::Gaussian,
            variance: ReverseVariance::SqrtBeta,
        };
        assert!(generate(&zero_denoiser(), &s, &opts, 1, 0).unwrap().is_empty());
        let a = generate(&zero_denoiser(), &s, &opts, 1, 2).unwrap();
        let b = generate(&zero_denoiser(), &s, &opts, 1, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.as_slice().iter().all(|v| (-1.0..=1.0).contains(v))));
    }
}
