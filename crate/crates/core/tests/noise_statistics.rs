use inaad_core::diffusion::{training_loss, TrainingBatch};
use inaad_core::{zero_denoiser, Image, NoiseKind, NoiseSchedule, PyramidParams, SimplexParams};

const SIDE: usize = 1024;

fn moments(img: &Image) -> (f64, f64) {
    (img.mean(), img.std())
}

#[test]
fn gaussian_field_has_unit_moments() {
    let field = NoiseKind::Gaussian.sample(SIDE, SIDE, 3).unwrap().into_image();
    let (mean, std) = moments(&field);
    // four standard errors of the mean of N(0, 1) draws
    assert!(mean.abs() < 4.0 / SIDE as f64, "mean {mean}");
    assert!((std * std - 1.0).abs() < 0.02, "variance {}", std * std);
}

#[test]
fn structured_fields_are_standardized() {
    for kind in [
        NoiseKind::Pyramid(PyramidParams::default()),
        NoiseKind::Simplex(SimplexParams::default()),
    ] {
        let (mean, std) = moments(&kind.sample(SIDE, SIDE, 11).unwrap().into_image());
        assert!(mean.abs() < 0.01, "{} mean {mean}", kind.name());
        assert!((std - 1.0).abs() < 0.02, "{} std {std}", kind.name());
    }
}

#[test]
fn spatial_correlation_orders_the_generators() {
    let mean_lag1 = |kind: NoiseKind| {
        (0..20u64)
            .map(|s| kind.sample(256, 256, s).unwrap().into_image().lag1_autocorrelation())
            .sum::<f64>()
            / 20.0
    };
    let gaussian = mean_lag1(NoiseKind::Gaussian);
    let pyramid = mean_lag1(NoiseKind::Pyramid(PyramidParams::default()));
    let simplex = mean_lag1(NoiseKind::Simplex(SimplexParams::default()));
    assert!(gaussian.abs() < 0.02, "gaussian lag-1 {gaussian}");
    assert!(pyramid > gaussian + 0.1, "pyramid {pyramid} vs gaussian {gaussian}");
    assert!(simplex > pyramid, "simplex {simplex} vs pyramid {pyramid}");
}

#[test]
fn zero_predictor_loss_on_pure_noise_is_unit() {
    let schedule = NoiseSchedule::linear(500, 1e-4, 0.02).unwrap();
    let data = vec![Image::zeros(SIDE, SIDE)];
    let batch = TrainingBatch::sample(&data, 1, &schedule, &NoiseKind::Gaussian, 5).unwrap();
    let loss = training_loss(&batch, &zero_denoiser(), &schedule).unwrap();
    assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
}
