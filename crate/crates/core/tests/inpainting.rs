use inaad_core::diffusion::ReverseVariance;
use inaad_core::metrics::ssim;
use inaad_core::{
    anomaly_heatmap, generate_normal, inaad_score, planted_denoiser, reconstruct_from_level, reconstruct_levels,
    zero_denoiser, InaadConfig, Mask, NoiseKind, NoiseSchedule, PhantomParams, PyramidParams, ScoreInput,
    SimplexParams,
};
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(500, 1e-4, 0.02).unwrap()
}

fn rect_mask(side: usize, top: usize, left: usize, h: usize, w: usize) -> Mask {
    Mask::from_fn(side, side, |r, c| !(r >= top && r < top + h && c >= left && c < left + w))
}

fn corruption() -> impl Strategy<Value = NoiseKind> {
    prop_oneof![
        Just(NoiseKind::Gaussian),
        Just(NoiseKind::Pyramid(PyramidParams::default())),
        Just(NoiseKind::Simplex(SimplexParams::default())),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn planted_oracle_recovers_the_input_under_any_mask(
        seed in 0u64..1000,
        s in 1usize..=150,
        top in 0usize..24,
        left in 0usize..24,
        h in 1usize..24,
        w in 1usize..24,
        inpainting in any::<bool>(),
        noise in corruption(),
    ) {
        let schedule = schedule();
        let (x0, _) = generate_normal(seed, &PhantomParams::with_side(32)).unwrap();
        let mask = rect_mask(32, top, left, h, w);
        let config = InaadConfig {
            inpainting,
            corruption: noise,
            reverse_variance: ReverseVariance::None,
            ..InaadConfig::default()
        };
        let oracle = planted_denoiser(x0.clone(), &schedule);
        let recon = reconstruct_from_level(&x0, &mask, s, &oracle, &schedule, &config, seed).unwrap();
        prop_assert!(ssim(&x0, &recon, &config.ssim).unwrap() > 0.99);
        prop_assert!(recon.max_abs_diff(&x0).unwrap() < 1e-6);
    }

    #[test]
    fn kept_pixels_are_restored_exactly_whatever_the_denoiser(
        seed in 0u64..1000,
        top in 0usize..16,
        left in 0usize..16,
        noise in corruption(),
    ) {
        let schedule = schedule();
        let (x0, _) = generate_normal(seed, &PhantomParams::with_side(32)).unwrap();
        let mask = rect_mask(32, top, left, 16, 16);
        let config = InaadConfig { corruption: noise, noise_levels: vec![20, 60], ..InaadConfig::default() };
        let recons = reconstruct_levels(&[ScoreInput { image: &x0, mask: &mask, seed }], &zero_denoiser(), &schedule, &config)
            .unwrap()
            .remove(0);
        for recon in &recons {
            for r in 0..32 {
                for c in 0..32 {
                    if mask.get(r, c) {
                        prop_assert_eq!(recon.get(r, c), x0.get(r, c));
                    }
                }
            }
        }
        let heat = anomaly_heatmap(&x0, &recons[0], &mask).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let v = heat.get(r, c);
                prop_assert!(v >= 0.0);
                if mask.get(r, c) {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert_eq!(v, (x0.get(r, c) - recons[0].get(r, c)).abs());
                }
            }
        }
    }
}

#[test]
fn oracle_of_the_input_scores_near_zero_and_a_wrong_oracle_scores_higher() {
    let schedule = schedule();
    let params = PhantomParams::with_side(32);
    let (x0, mask) = generate_normal(1, &params).unwrap();
    let (other, _) = generate_normal(2, &params).unwrap();
    let config = InaadConfig {
        noise_levels: vec![50, 100],
        reverse_variance: ReverseVariance::None,
        ..InaadConfig::default()
    };
    let right = inaad_score(&x0, &mask, &planted_denoiser(x0.clone(), &schedule), &schedule, &config, 3).unwrap();
    let wrong = inaad_score(&x0, &mask, &planted_denoiser(other, &schedule), &schedule, &config, 3).unwrap();
    assert!(right.anomaly_score.abs() < 1e-6, "{}", right.anomaly_score);
    assert!(wrong.anomaly_score > 0.05, "{}", wrong.anomaly_score);
}
