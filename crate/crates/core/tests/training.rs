use inaad_core::diffusion::TrainingBatch;
use inaad_core::rng::rng;
use inaad_core::{
    build_unet, generate_normal, train, Image, NoiseKind, NoiseSchedule, PhantomParams, TrainConfig, TrainState,
    UNetConfig,
};
use rand::Rng as _;

fn small_config() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        time_dim: 32,
        attention: false,
        norm_groups: 4,
    }
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(500, 1e-4, 0.02).unwrap()
}

fn phantoms(n: u64, side: usize) -> Vec<Image> {
    let params = PhantomParams::with_side(side);
    (0..n).map(|s| generate_normal(100 + s, &params).unwrap().0).collect()
}

fn run(data: &[Image], config: &TrainConfig) -> (TrainState, Vec<f64>) {
    let mut state = TrainState::new(build_unet(small_config(), 9).unwrap());
    let curve = train(data, &mut state, &schedule(), &NoiseKind::Gaussian, config, |_, _| Ok(())).unwrap();
    (state, curve.records.iter().map(|r| r.loss).collect())
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = phantoms(4, 16);
    let config = TrainConfig {
        iterations: 5,
        batch_size: 2,
        learning_rate: 0.0,
        ema_decay: Some(0.9),
        ..TrainConfig::default()
    };
    let before = build_unet(small_config(), 9).unwrap();
    let (state, losses) = run(&data, &config);
    assert_eq!(state.model.params(), before.params());
    assert_eq!(state.ema.as_deref(), Some(before.params()));
    assert_eq!(losses.len(), 5);
    assert_eq!(state.iteration, 5);
}

#[test]
fn same_seed_gives_identical_curves() {
    let data = phantoms(4, 16);
    let config = TrainConfig {
        iterations: 6,
        batch_size: 3,
        learning_rate: 1e-3,
        seed: 21,
        ..TrainConfig::default()
    };
    let (a, la) = run(&data, &config);
    let (b, lb) = run(&data, &config);
    assert_eq!(la, lb);
    assert_eq!(a.model.params(), b.model.params());
    let (_, lc) = run(&data, &TrainConfig { seed: 22, ..config });
    assert_ne!(la, lc);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = phantoms(4, 16);
    let full = TrainConfig {
        iterations: 6,
        batch_size: 2,
        learning_rate: 1e-3,
        ema_decay: Some(0.5),
        ..TrainConfig::default()
    };
    let (whole, whole_losses) = run(&data, &full);
    let (mut half, mut losses) = run(&data, &TrainConfig { iterations: 3, ..full.clone() });
    let rest = train(&data, &mut half, &schedule(), &NoiseKind::Gaussian, &full, |_, _| Ok(())).unwrap();
    losses.extend(rest.records.iter().map(|r| r.loss));
    assert_eq!(rest.records[0].iteration, 4);
    assert_eq!(losses, whole_losses);
    assert_eq!(half.model.params(), whole.model.params());
    assert_eq!(half.ema, whole.ema);
}

#[test]
fn overfits_a_single_image() {
    let data = phantoms(1, 16);
    let config = TrainConfig {
        iterations: 500,
        batch_size: 8,
        learning_rate: 2e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, losses) = run(&data, &config);
    let head = losses[..25].iter().sum::<f64>() / 25.0;
    let tail = losses[losses.len() - 25..].iter().sum::<f64>() / 25.0;
    assert!(tail <= 0.5 * head, "loss {head:.4} -> {tail:.4}");
}

#[test]
fn loss_gradient_matches_central_differences() {
    let schedule = schedule();
    let data = phantoms(8, 16);
    let batch = TrainingBatch::sample(&data, 8, &schedule, &NoiseKind::Gaussian, 77).unwrap();
    let inputs = batch.noisy_inputs(&schedule).unwrap();
    let inputs: Vec<&Image> = inputs.iter().collect();
    let targets: Vec<&Image> = batch.noises().iter().collect();
    let model = build_unet(small_config(), 5).unwrap();
    let arch = model.arch();
    let p = model.params_f64();

    let (loss, grad) = arch.loss_and_grad(&p, &inputs, batch.steps(), &targets).unwrap();
    assert!(loss.is_finite() && loss > 0.0);

    let mse = |q: &[f64]| {
        let preds = arch.predict_with(q, &inputs, batch.steps()).unwrap();
        let (mut total, mut n) = (0.0, 0usize);
        for (pred, eps) in preds.iter().zip(&targets) {
            total += pred.as_slice().iter().zip(eps.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += pred.len();
        }
        total / n as f64
    };
    assert!((mse(&p) - loss).abs() < 1e-12);

    let h = 1e-3;
    let mut r = rng(13);
    for _ in 0..10 {
        let i = r.random_range(0..p.len());
        let mut q = p.clone();
        q[i] = p[i] + h;
        let up = mse(&q);
        q[i] = p[i] - h;
        let down = mse(&q);
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        assert!(rel < 1e-3, "param {i}: analytic {} numeric {fd} (rel {rel:.2e})", grad[i]);
    }
}
