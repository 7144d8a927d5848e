//! Inpainting-based anomaly scoring.
//!
//! A test image is corrupted to several noise levels `s ∈ S`. From each
//! level a reverse chain reconstructs it, and at every step the kept
//! region (`m = 1`) is overwritten with the original noised to the chain's
//! current level. Only the complement is left to the model. The
//! reconstructions are averaged and compared with the input by SSIM.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{forward_diffuse, reverse_step_with_prediction, ReverseVariance};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::metrics::{ssim, ssim_in_region, SsimParams};
use crate::noise::NoiseKind;
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Ssim,
}

/// Where the similarity is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityRegion {
    /// Whole frame.
    #[default]
    Full,
    /// Only windows centred on reconstructed pixels.
    Reconstructed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InaadConfig {
    /// Starting steps `S`.
    pub noise_levels: Vec<usize>,
    /// Noise used to corrupt the input and inside the reverse chains. Not
    /// read from the `inaad` config block; run configs set it from their
    /// noise block.
    #[serde(skip)]
    pub corruption: NoiseKind,
    pub inpainting: bool,
    pub metric: SimilarityMetric,
    pub ssim: SsimParams,
    pub region: SimilarityRegion,
    pub reverse_variance: ReverseVariance,
    /// Box-blur radius for displayed heatmaps; 0 disables blurring.
    pub heatmap_blur: usize,
}

impl Default for InaadConfig {
    fn default() -> Self {
        Self {
            noise_levels: vec![75, 100, 150, 200, 250],
            corruption: NoiseKind::Gaussian,
            inpainting: true,
            metric: SimilarityMetric::Ssim,
            ssim: SsimParams::default(),
            region: SimilarityRegion::Full,
            reverse_variance: ReverseVariance::SqrtBeta,
            heatmap_blur: 1,
        }
    }
}

impl InaadConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.noise_levels.is_empty() {
            return Err(Error::Config("noise_levels must not be empty".into()));
        }
        if let Some(&s) = self.noise_levels.iter().find(|&&s| s == 0 || s > schedule.steps()) {
            return Err(Error::Config(format!(
                "noise level {s} outside 1..={}",
                schedule.steps()
            )));
        }
        self.corruption.validate()?;
        self.ssim.validate()
    }

    /// Seed of the chain started at level `s`.
    pub fn level_seed(run_seed: u64, s: usize) -> u64 {
        derive_seed(run_seed, &[s as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    /// Average of the per-level reconstructions.
    pub reconstruction: Image,
    pub similarity: f64,
    /// `1 - similarity`.
    pub anomaly_score: f64,
    /// Unsmoothed `|x0 - reconstruction|` on reconstructed pixels, zero elsewhere.
    pub heatmap: Image,
}

impl AnomalyReport {
    pub fn blurred_heatmap(&self, radius: usize) -> Image {
        box_blur(&self.heatmap, radius)
    }
}

/// One step of the inpainted reverse process: kept pixels come from `x0`
/// noised to level `t - 1`, the rest from a reverse step on `xbar_t`.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_reverse_step<D: Denoiser + ?Sized>(
    x0: &Image,
    xbar_t: &Image,
    t: usize,
    mask: &Mask,
    denoiser: &D,
    schedule: &NoiseSchedule,
    eps_fwd: &Image,
    eps_rev: &Image,
    variance: ReverseVariance,
) -> Result<Image> {
    if t == 0 {
        return Err(Error::invalid("no reverse step below t = 0"));
    }
    schedule.check_step(t)?;
    x0.ensure_shape(xbar_t.shape())?;
    mask.ensure_shape(x0.shape())?;
    let predicted = denoiser.predict(xbar_t, t)?;
    let unknown = reverse_step_with_prediction(xbar_t, t, &predicted, schedule, eps_rev, variance)?;
    let known = forward_diffuse(x0, t - 1, schedule, eps_fwd)?;
    Ok(combine(mask, &known, &unknown))
}

/// `m * known + (1 - m) * unknown`.
pub fn combine(mask: &Mask, known: &Image, unknown: &Image) -> Image {
    let data = mask
        .as_slice()
        .iter()
        .zip(known.as_slice().iter().zip(unknown.as_slice()))
        .map(|(&m, (&k, &u))| if m { k } else { u })
        .collect();
    Image::new(known.height(), known.width(), data).expect("shapes checked by caller")
}

/// Reconstruction of `x0` from a single starting level `s`.
pub fn reconstruct_from_level<D: Denoiser + ?Sized>(
    x0: &Image,
    mask: &Mask,
    s: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &InaadConfig,
    seed: u64,
) -> Result<Image> {
    let single = InaadConfig {
        noise_levels: vec![s],
        ..config.clone()
    };
    let mut out = reconstruct_levels(
        &[ScoreInput {
            image: x0,
            mask,
            seed,
        }],
        denoiser,
        schedule,
        &single,
    )?;
    Ok(out.remove(0).remove(0))
}

/// An image to score together with its mask and run seed.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInput<'a> {
    pub image: &'a Image,
    pub mask: &'a Mask,
    pub seed: u64,
}

struct Chain {
    input: usize,
    s: usize,
    seed: u64,
    state: Image,
}

/// Per-input, per-level reconstructions, in the order of
/// `config.noise_levels`. Chains for every input and level advance
/// together so the denoiser receives one batch per step; each chain's
/// noise depends only on its own seed, so results do not depend on how
/// inputs are grouped.
pub fn reconstruct_levels<D: Denoiser + ?Sized>(
    inputs: &[ScoreInput<'_>],
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &InaadConfig,
) -> Result<Vec<Vec<Image>>> {
    config.validate(schedule)?;
    for input in inputs {
        if !input.image.is_finite() {
            return Err(Error::invalid("input image has non-finite values"));
        }
        input.mask.ensure_shape(input.image.shape())?;
    }
    let noise = &config.corruption;
    let mut chains = Vec::with_capacity(inputs.len() * config.noise_levels.len());
    for (i, input) in inputs.iter().enumerate() {
        let (h, w) = input.image.shape();
        for &s in &config.noise_levels {
            let seed = InaadConfig::level_seed(input.seed, s);
            let eps = noise.sample(h, w, derive_seed(seed, &[0]))?.values;
            chains.push(Chain {
                input: i,
                s,
                seed,
                state: forward_diffuse(input.image, s, schedule, &eps)?,
            });
        }
    }
    let t_max = config.noise_levels.iter().copied().max().unwrap_or(0);
    for t in (1..=t_max).rev() {
        let active: Vec<usize> = (0..chains.len()).filter(|&c| chains[c].s >= t).collect();
        let queries: Vec<(&Image, usize)> = active.iter().map(|&c| (&chains[c].state, t)).collect();
        let preds = denoiser.predict_batch(&queries)?;
        for (&c, pred) in active.iter().zip(&preds) {
            let chain = &chains[c];
            let input = &inputs[chain.input];
            let (h, w) = input.image.shape();
            let eps_rev = if t > 1 {
                noise.sample(h, w, derive_seed(chain.seed, &[2, t as u64]))?.values
            } else {
                Image::zeros(h, w)
            };
            let unknown = reverse_step_with_prediction(
                &chain.state,
                t,
                pred,
                schedule,
                &eps_rev,
                config.reverse_variance,
            )?;
            let next = if config.inpainting {
                let eps_fwd = if t > 1 {
                    noise.sample(h, w, derive_seed(chain.seed, &[1, t as u64]))?.values
                } else {
                    Image::zeros(h, w)
                };
                let known = forward_diffuse(input.image, t - 1, schedule, &eps_fwd)?;
                combine(input.mask, &known, &unknown)
            } else {
                unknown
            };
            chains[c].state = next;
        }
    }
    let per_input = config.noise_levels.len();
    let mut out: Vec<Vec<Image>> = (0..inputs.len()).map(|_| Vec::with_capacity(per_input)).collect();
    for chain in chains {
        if !chain.state.is_finite() {
            return Err(Error::invalid(format!(
                "reconstruction from level {} produced non-finite values",
                chain.s
            )));
        }
        out[chain.input].push(chain.state.clamp(-1.0, 1.0));
    }
    Ok(out)
}

/// Similarity between the input and a reconstruction under the configured
/// metric and region.
pub fn similarity(x0: &Image, recon: &Image, mask: &Mask, config: &InaadConfig) -> Result<f64> {
    match (config.metric, config.region) {
        (SimilarityMetric::Ssim, SimilarityRegion::Full) => ssim(x0, recon, &config.ssim),
        (SimilarityMetric::Ssim, SimilarityRegion::Reconstructed) => {
            ssim_in_region(x0, recon, mask, &config.ssim)
        }
    }
}

/// Report for an input given its reconstructions (one per level).
pub fn report_from_reconstructions(
    x0: &Image,
    mask: &Mask,
    reconstructions: &[Image],
    config: &InaadConfig,
) -> Result<AnomalyReport> {
    let reconstruction = Image::average(reconstructions)?;
    let similarity = similarity(x0, &reconstruction, mask, config)?;
    let heatmap = anomaly_heatmap(x0, &reconstruction, mask)?;
    Ok(AnomalyReport {
        reconstruction,
        similarity,
        anomaly_score: 1.0 - similarity,
        heatmap,
    })
}

/// Scores one image.
pub fn inaad_score<D: Denoiser + ?Sized>(
    x0: &Image,
    mask: &Mask,
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &InaadConfig,
    seed: u64,
) -> Result<AnomalyReport> {
    Ok(inaad_score_batch(
        &[ScoreInput {
            image: x0,
            mask,
            seed,
        }],
        denoiser,
        schedule,
        config,
    )?
    .remove(0))
}

/// Scores several images with their chains batched together. Identical
/// to calling [`inaad_score`] on each.
pub fn inaad_score_batch<D: Denoiser + ?Sized>(
    inputs: &[ScoreInput<'_>],
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &InaadConfig,
) -> Result<Vec<AnomalyReport>> {
    let recons = reconstruct_levels(inputs, denoiser, schedule, config)?;
    inputs
        .iter()
        .zip(&recons)
        .map(|(input, r)| report_from_reconstructions(input.image, input.mask, r, config))
        .collect()
}

/// `|x0 - xbar| * (1 - m)`.
pub fn anomaly_heatmap(x0: &Image, xbar: &Image, mask: &Mask) -> Result<Image> {
    mask.ensure_shape(x0.shape())?;
    let diff = x0.zip_map(xbar, |a, b| (a - b).abs())?;
    let data = diff
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&d, &m)| if m { 0.0 } else { d })
        .collect();
    Image::new(x0.height(), x0.width(), data)
}

/// Mean over the `(2r+1)²` neighbourhood, treating out-of-frame pixels as zero.
pub fn box_blur(img: &Image, radius: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let (h, w) = img.shape();
    let r = radius as isize;
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    Image::from_fn(h, w, |i, j| {
        let mut sum = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                let (y, x) = (i as isize + di, j as isize + dj);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    sum += img[(y as usize, x as usize)];
                }
            }
        }
        sum / norm
    })
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
        sample_gaussian(16, 16, seed).unwrap().values.map(|v| (v * 0.4).clamp(-1.0, 1.0))
    }

    fn eps(seed: u64) -> Image {
        sample_gaussian(16, 16, seed).unwrap().values
    }

    #[test]
    fn step_mask_limits() {
        let s = schedule();
        let (x0, xt) = (img(1), img(2));
        let (ef, er) = (eps(3), eps(4));
        let d = zero_denoiser();
        let v = ReverseVariance::SqrtBeta;
        let all_kept = inpaint_reverse_step(&x0, &xt, 40, &Mask::ones(16, 16), &d, &s, &ef, &er, v).unwrap();
        assert_eq!(all_kept, forward_diffuse(&x0, 39, &s, &ef).unwrap());
        let none_kept = inpaint_reverse_step(&x0, &xt, 40, &Mask::zeros(16, 16), &d, &s, &ef, &er, v).unwrap();
        let pred = d.predict(&xt, 40).unwrap();
        assert_eq!(none_kept, reverse_step_with_prediction(&xt, 40, &pred, &s, &er, v).unwrap());
        let checker = Mask::from_fn(16, 16, |r, c| (r + c) % 2 == 0);
        let mixed = inpaint_reverse_step(&x0, &xt, 40, &checker, &d, &s, &ef, &er, v).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let src = if checker.get(r, c) { &all_kept } else { &none_kept };
                assert_eq!(mixed[(r, c)], src[(r, c)]);
            }
        }
        assert!(inpaint_reverse_step(&x0, &xt, 0, &checker, &d, &s, &ef, &er, v).is_err());
    }

    #[test]
    fn final_step_restores_kept_pixels_exactly() {
        let s = schedule();
        let x0 = img(5);
        let mask = Mask::from_fn(16, 16, |r, _| r < 8);
        let cfg = InaadConfig {
            noise_levels: vec![30],
            ..InaadConfig::default()
        };
        let out = reconstruct_from_level(&x0, &mask, 30, &zero_denoiser(), &s, &cfg, 1).unwrap();
        for r in 0..8 {
            for c in 0..16 {
                assert_eq!(out[(r, c)], x0[(r, c)]);
            }
        }
    }

    #[test]
    fn single_step_without_noise_rescales() {
        let s = schedule();
        let x0 = img(6).map(|v| v * 0.5);
        let cfg = InaadConfig {
            noise_levels: vec![1],
            reverse_variance: ReverseVariance::None,
            ..InaadConfig::default()
        };
        let out = reconstruct_from_level(&x0, &Mask::zeros(16, 16), 1, &zero_denoiser(), &s, &cfg, 3).unwrap();
        // x_1 = sqrt(a1) x0 + sqrt(1 - a1) eps, then divided by sqrt(a1).
        let a1 = s.alpha(1).unwrap();
        let seed = InaadConfig::level_seed(3, 1);
        let e = cfg.corruption.sample(16, 16, derive_seed(seed, &[0])).unwrap().values;
        let expected = x0.zip_map(&e, |x, e| (a1.sqrt() * x + (1.0 - a1).sqrt() * e) / a1.sqrt()).unwrap();
        assert!(out.max_abs_diff(&expected.clamp(-1.0, 1.0)).unwrap() < 1e-12);
    }

    #[test]
    fn planted_round_trip() {
        let s = schedule();
        let x0 = img(7);
        let d = planted_denoiser(x0.clone(), &s);
        let cfg = InaadConfig {
            reverse_variance: ReverseVariance::None,
            ..InaadConfig::default()
        };
        let mask = Mask::from_fn(16, 16, |r, c| r < 3 || c < 3);
        let rep = inaad_score(&x0, &mask, &d, &s, &cfg, 9).unwrap();
        assert!(rep.reconstruction.max_abs_diff(&x0).unwrap() < 1e-9);
        assert!(rep.anomaly_score.abs() < 1e-9);
        assert_eq!(rep.anomaly_score, 1.0 - rep.similarity);
    }

    #[test]
    fn batch_matches_individual_and_is_deterministic() {
        let s = schedule();
        let imgs = [img(10), img(11)];
        let mask = Mask::from_fn(16, 16, |r, _| r < 4);
        let cfg = InaadConfig {
            noise_levels: vec![5, 12],
            ..InaadConfig::default()
        };
        let d = zero_denoiser();
        let inputs: Vec<ScoreInput> = imgs
            .iter()
            .enumerate()
            .map(|(i, im)| ScoreInput {
                image: im,
                mask: &mask,
                seed: i as u64,
            })
            .collect();
        let batch = inaad_score_batch(&inputs, &d, &s, &cfg).unwrap();
        for (i, im) in imgs.iter().enumerate() {
            let single = inaad_score(im, &mask, &d, &s, &cfg, i as u64).unwrap();
            assert_eq!(single, batch[i]);
        }
        assert_eq!(batch, inaad_score_batch(&inputs, &d, &s, &cfg).unwrap());
    }

    #[test]
    fn heatmap_contract() {
        let x0 = img(12);
        let mask = Mask::from_fn(16, 16, |r, _| r < 8);
        assert!(anomaly_heatmap(&x0, &x0, &mask).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let mut bumped = x0.clone();
        bumped[(12, 5)] += 0.3;
        let h = anomaly_heatmap(&x0, &bumped, &mask).unwrap();
        assert!((h[(12, 5)] - 0.3).abs() < 1e-12);
        let blurred = box_blur(&h, 1);
        let peak = blurred.as_slice().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(blurred[(12, 5)], peak);
        let mut bg = x0.clone();
        bg[(2, 2)] -= 0.5;
        assert!(anomaly_heatmap(&x0, &bg, &mask).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let s = schedule();
        assert!(InaadConfig::default().validate(&s).is_ok());
        for levels in [vec![], vec![0], vec![501]] {
            let cfg = InaadConfig {
                noise_levels: levels,
                ..InaadConfig::default()
            };
            assert!(cfg.validate(&s).is_err());
        }
    }
}
