//! Anomaly detection by inpainting with denoising diffusion models.
//!
//! A diffusion model trained only on normal images is used to reconstruct a
//! partially corrupted copy of a test image. Normal content comes back close
//! to the input while anomalous content is replaced by something normal, and
//! the dissimilarity between input and reconstruction is the anomaly score.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod inaad;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod train;

pub use crate::denoiser::{
    build_unet, planted_denoiser, zero_denoiser, Denoiser, PlantedDenoiser, UNet, UNetConfig,
    ZeroDenoiser,
};
pub use crate::diffusion::{
    forward_diffuse, generate, reverse_step, training_loss, ReverseVariance, SamplerOptions,
    TrainingBatch,
};
pub use crate::checkpoint::Checkpoint;
pub use crate::error::{Error, Result};
pub use crate::image::{Image, Mask};
pub use crate::inaad::{
    anomaly_heatmap, inaad_score, inaad_score_batch, inpaint_reverse_step, reconstruct_from_level,
    reconstruct_levels, AnomalyReport, InaadConfig, ScoreInput, SimilarityMetric, SimilarityRegion,
};
pub use crate::metrics::{
    auroc, average_precision, evaluate_groups, roc_curve, ssim, GroupMetrics, LabeledScores, SsimParams,
};
pub use crate::noise::{NoiseField, NoiseKind, PyramidParams, SimplexParams};
pub use crate::schedule::{NoiseSchedule, ScheduleParams};
pub use crate::synthdata::{
    build_splits, generate_anomalous, generate_normal, AnomalyKind, AnomalySpec, DatasetConfig, Manifest,
    ManifestEntry, PhantomParams, Split, SplitCounts,
};
pub use crate::train::{train, LossCurve, TrainConfig, TrainState};
