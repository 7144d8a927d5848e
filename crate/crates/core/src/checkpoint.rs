//! Versioned model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  "INAADCKP"
//! version    u32 LE
//! header_len u64 LE
//! header     TOML, header_len bytes
//! blocks     f32 LE
//! ```
//!
//! The header records the architecture, schedule, training noise, seed,
//! iteration count and the parameter table (name, shape, offset, length
//! per block). Blocks follow in table order. If the header says so, they
//! are followed by the full Adam first-moment vector, then the
//! second-moment vector, then the averaged weights.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::noise::NoiseKind;
use crate::schedule::ScheduleParams;
use crate::train::{Adam, TrainState};

pub const MAGIC: &[u8; 8] = b"INAADCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub seed: u64,
    pub iteration: u64,
    pub optimizer_step: Option<u64>,
    pub has_ema: bool,
    pub param_count: usize,
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    pub noise: NoiseKind,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub optimizer: Option<Adam>,
    pub ema: Option<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, schedule: ScheduleParams, noise: NoiseKind, seed: u64) -> Self {
        let blocks = state
            .model
            .arch()
            .param_layout()
            .iter()
            .map(|p| BlockInfo {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset: p.slot.offset,
                len: p.slot.len,
            })
            .collect();
        Self {
            header: CheckpointHeader {
                seed,
                iteration: state.iteration,
                optimizer_step: Some(state.optimizer.step),
                has_ema: state.ema.is_some(),
                param_count: state.model.param_count(),
                unet: state.model.config().clone(),
                schedule,
                noise,
                blocks,
            },
            params: state.model.params().to_vec(),
            optimizer: Some(state.optimizer.clone()),
            ema: state.ema.clone(),
        }
    }

    /// Model for inference: averaged weights when present.
    pub fn model(&self) -> Result<UNet> {
        let params = self.ema.clone().unwrap_or_else(|| self.params.clone());
        UNet::from_params(self.header.unet.clone(), params)
    }

    /// Training state to resume from.
    pub fn into_state(self) -> Result<TrainState> {
        let model = UNet::from_params(self.header.unet, self.params)?;
        let optimizer = self.optimizer.unwrap_or_else(|| Adam::new(model.param_count()));
        Ok(TrainState {
            model,
            optimizer,
            ema: self.ema,
            iteration: self.header.iteration,
        })
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = toml::to_string(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(32 + header.len() + 4 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        let mut put = |v: &[f32]| {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&self.params);
        if let Some(adam) = &self.optimizer {
            put(&adam.m);
            put(&adam.v);
        }
        if let Some(ema) = &self.ema {
            put(ema);
        }
        out.write_all(&buf)
            .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| bad("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| bad("truncated version".into()))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(|_| bad("truncated header length".into()))?;
        let header_len = u64::from_le_bytes(len) as usize;
        if header_len > 1 << 24 {
            return Err(bad(format!("implausible header length {header_len}")));
        }
        let mut header = vec![0u8; header_len];
        input.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        let header = String::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
        let header: CheckpointHeader = toml::from_str(&header).map_err(|e| bad(format!("header: {e}")))?;
        let mut rest = Vec::new();
        input
            .read_to_end(&mut rest)
            .map_err(|e| bad(format!("read failed: {e}")))?;
        let n = header.param_count;
        let vectors = 1 + 2 * header.optimizer_step.is_some() as usize + header.has_ema as usize;
        if rest.len() != 4 * n * vectors {
            return Err(bad(format!(
                "expected {} bytes of parameters, found {}",
                4 * n * vectors,
                rest.len()
            )));
        }
        let mut floats = rest
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut take = || floats.by_ref().take(n).collect::<Vec<f32>>();
        let params = take();
        let optimizer = header.optimizer_step.map(|step| {
            let m = take();
            let v = take();
            Adam { m, v, step }
        });
        let ema = header.has_ema.then(&mut take);
        let ckpt = Self {
            header,
            params,
            optimizer,
            ema,
        };
        ckpt.check_layout()?;
        Ok(ckpt)
    }

    /// The stored table must match the architecture the header describes.
    fn check_layout(&self) -> Result<()> {
        let arch = crate::denoiser::UNetArch::new(self.header.unet.clone())?;
        let ok = arch.param_count() == self.header.param_count
            && arch.param_layout().len() == self.header.blocks.len()
            && arch.param_layout().iter().zip(&self.header.blocks).all(|(p, b)| {
                p.name == b.name && p.shape == b.shape && p.slot.offset == b.offset && p.slot.len == b.len
            });
        if !ok {
            return Err(Error::Checkpoint(
                "parameter table does not match the architecture".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_to(std::io::BufWriter::new(file))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::build_unet;
    use crate::noise::PyramidParams;

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            time_dim: 8,
            attention: false,
            norm_groups: 2,
        }
    }

    #[test]
    fn round_trip_with_optimizer_and_ema() {
        let mut state = TrainState::new(build_unet(tiny(), 5).unwrap());
        state.iteration = 17;
        state.optimizer.step = 17;
        state.optimizer.m[3] = 0.25;
        state.ema = Some(state.model.params().iter().map(|v| v * 0.5).collect());
        let ck = Checkpoint::from_state(
            &state,
            ScheduleParams::default(),
            NoiseKind::Pyramid(PyramidParams::default()),
            9,
        );
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.params, ck.params);
        assert_eq!(back.ema, ck.ema);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.model().unwrap().params(), ck.ema.as_deref().unwrap());
        let resumed = back.into_state().unwrap();
        assert_eq!(resumed.iteration, 17);
    }

    #[test]
    fn rejects_corruption() {
        let state = TrainState::new(build_unet(tiny(), 1).unwrap());
        let ck = Checkpoint::from_state(&state, ScheduleParams::default(), NoiseKind::Gaussian, 0);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        assert!(Checkpoint::read_from(&bytes[..5]).is_err());
    }
}
