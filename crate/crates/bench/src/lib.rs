//! Shared fixtures for the benchmarks.

use inaad_core::{build_unet, generate_normal, Image, Mask, NoiseSchedule, PhantomParams, UNet, UNetConfig};

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(500, 1e-4, 0.02).expect("valid schedule")
}

pub fn phantom(side: usize, seed: u64) -> (Image, Mask) {
    generate_normal(seed, &PhantomParams::with_side(side)).expect("valid phantom")
}

/// The small network used for CPU runs.
pub fn desk_unet() -> UNet {
    let config = UNetConfig {
        base_channels: 16,
        channel_mults: vec![1, 2, 2],
        res_blocks: 1,
        time_dim: 64,
        attention: false,
        norm_groups: 4,
    };
    build_unet(config, 0).expect("valid config")
}
