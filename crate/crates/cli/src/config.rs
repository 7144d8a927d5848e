//! Run configuration file.

use std::path::{Path, PathBuf};

use inaad_core::denoiser::UNetConfig;
use inaad_core::inaad::InaadConfig;
use inaad_core::noise::NoiseKind;
use inaad_core::schedule::ScheduleParams;
use inaad_core::synthdata::{DatasetConfig, Split};
use inaad_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Noise the model is trained with.
    pub training: NoiseKind,
    /// Noise used to corrupt images when scoring.
    pub corruption: NoiseKind,
}

/// Which manifest rows `score` processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSplit {
    Val,
    #[default]
    Test,
    /// Every validation and test row.
    Eval,
}

impl ScoreSplit {
    pub fn accepts(&self, split: Split) -> bool {
        match self {
            ScoreSplit::Val => split == Split::Val,
            ScoreSplit::Test => split == Split::Test,
            ScoreSplit::Eval => split != Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub split: ScoreSplit,
    /// Images per batched scoring call.
    pub chunk: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            split: ScoreSplit::Test,
            chunk: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for scoring; combined with each manifest row's seed.
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleParams,
    pub noise: NoiseConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub inaad: InaadConfig,
    pub score: ScoreConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: inaad_core::Error| ConfigError(e.to_string());
        self.dataset.validate().map_err(wrap)?;
        let schedule = self.schedule.build().map_err(wrap)?;
        self.noise.training.validate().map_err(wrap)?;
        self.noise.corruption.validate().map_err(wrap)?;
        self.unet.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.inaad_config().validate(&schedule).map_err(wrap)?;
        if self.score.chunk == 0 {
            return Err(ConfigError("score.chunk must be positive".into()));
        }
        Ok(())
    }

    /// Scoring settings with the corruption noise filled in.
    pub fn inaad_config(&self) -> InaadConfig {
        InaadConfig {
            corruption: self.noise.corruption,
            ..self.inaad.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_blocks_parse() {
        let cfg = RunConfig::parse(
            r#"
            seed = 4
            [noise.training]
            kind = "pyramid"
            levels = 6
            [noise.corruption]
            kind = "gaussian"
            [inaad]
            noise_levels = [10, 20]
            inpainting = false
            [dataset.counts]
            train = 5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert!(matches!(cfg.noise.training, NoiseKind::Pyramid(p) if p.levels == 6));
        assert_eq!(cfg.inaad_config().noise_levels, vec![10, 20]);
        assert_eq!(cfg.dataset.counts.train, 5);
    }

    #[test]
    fn shipped_configs_parse() {
        let desk = RunConfig::parse(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(desk.dataset.phantom.side, 32);
        assert_eq!(desk.train.ema_decay, Some(0.995));
        let reference = RunConfig::parse(include_str!("../../../configs/reference.toml")).unwrap();
        assert_eq!(reference.unet, UNetConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[inaad]\nnoise_level = [1]").is_err());
        assert!(RunConfig::parse("[inaad]\ncorruption = 1").is_err());
        assert!(RunConfig::parse("[inaad]\nnoise_levels = [600]").is_err());
        assert!(RunConfig::parse("[noise.training]\nkind = \"perlin\"").is_err());
        assert!(RunConfig::parse("[train]\nbatch_size = 0").is_err());
    }
}
