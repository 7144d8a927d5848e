//! Stochastic gradient training of the UNet on the noise-prediction loss.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::UNet;
use crate::diffusion::TrainingBatch;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::NoiseKind;
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Exponential moving average of weights, off when `None`.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    /// Iterations between checkpoint callbacks; 0 means only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            batch_size: 20,
            learning_rate: 1e-4,
            grad_clip: 1.0,
            ema_decay: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay must be in [0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + ADAM_EPS as f32);
        }
    }
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    /// Mean loss of the first `window` records.
    pub fn head_mean(&self, window: usize) -> f64 {
        let n = window.min(self.records.len()).max(1);
        self.records.iter().take(n).map(|r| r.loss).sum::<f64>() / n as f64
    }

    /// Mean loss of the last `window` records.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let n = window.min(self.records.len()).max(1);
        self.records.iter().rev().take(n).map(|r| r.loss).sum::<f64>() / n as f64
    }

    /// CSV with header `iteration,loss`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,loss")?;
        for r in &self.records {
            writeln!(out, "{},{}", r.iteration, r.loss)?;
        }
        Ok(())
    }

    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            if !exists {
                writeln!(out, "iteration,loss")?;
            }
            for r in &self.records {
                writeln!(out, "{},{}", r.iteration, r.loss)?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Everything needed to continue a run: model, optimizer, averaged
/// weights and the number of completed iterations.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: UNet,
    pub optimizer: Adam,
    pub ema: Option<Vec<f32>>,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(model: UNet) -> Self {
        let optimizer = Adam::new(model.param_count());
        Self {
            model,
            optimizer,
            ema: None,
            iteration: 0,
        }
    }

    /// Model to use for inference: the averaged weights when present.
    pub fn inference_model(&self) -> UNet {
        match &self.ema {
            Some(ema) => {
                let mut m = self.model.clone();
                m.params_mut().copy_from_slice(ema);
                m
            }
            None => self.model.clone(),
        }
    }
}

/// Trains until `state.iteration == config.iterations`. Each iteration
/// draws its batch from a seed derived from `(config.seed, iteration)`, so a
/// resumed run continues the same sequence. Calls `on_checkpoint` every
/// `checkpoint_every` iterations and once at the end.
pub fn train(
    dataset: &[Image],
    state: &mut TrainState,
    schedule: &NoiseSchedule,
    noise: &NoiseKind,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState, &LossCurve) -> Result<()>,
) -> Result<LossCurve> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let shape = dataset[0].shape();
    for img in dataset {
        img.ensure_shape(shape)?;
    }
    state.model.config().check_input(shape.0, shape.1)?;
    if let (Some(_), None) = (config.ema_decay, &state.ema) {
        state.ema = Some(state.model.params().to_vec());
    }
    let mut curve = LossCurve::default();
    let mut since_checkpoint = LossCurve::default();
    while state.iteration < config.iterations {
        let it = state.iteration;
        let batch = TrainingBatch::sample(
            dataset,
            config.batch_size,
            schedule,
            noise,
            derive_seed(config.seed, &[it]),
        )?;
        let inputs = batch.noisy_inputs(schedule)?;
        let input_refs: Vec<&Image> = inputs.iter().collect();
        let target_refs: Vec<&Image> = batch.noises().iter().collect();
        let model = &mut state.model;
        let (loss, mut grads) =
            model
                .arch()
                .loss_and_grad(model.params(), &input_refs, batch.steps(), &target_refs)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it, loss });
        }
        clip_grad_norm(&mut grads, config.grad_clip);
        state.optimizer.update(model.params_mut(), &grads, config.learning_rate);
        if let (Some(decay), Some(ema)) = (config.ema_decay, state.ema.as_mut()) {
            let rate = (1.0 - decay) as f32;
            for (e, &p) in ema.iter_mut().zip(model.params()) {
                *e += rate * (p - *e);
            }
        }
        state.iteration += 1;
        let record = LossRecord {
            iteration: state.iteration,
            loss,
        };
        curve.records.push(record);
        since_checkpoint.records.push(record);
        if state.iteration.is_multiple_of(100) {
            log::info!("iteration {} loss {:.5}", state.iteration, curve.tail_mean(100));
        }
        let due = config.checkpoint_every > 0 && state.iteration.is_multiple_of(config.checkpoint_every);
        if due || state.iteration == config.iterations {
            on_checkpoint(state, &since_checkpoint)?;
            since_checkpoint.records.clear();
        }
    }
    Ok(curve)
}
