//! Optimizer descent, degenerate training runs and the downstream fitters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_core::adam::{AdamConfig, AdamState};
use xmodal_core::ae::{self, CrossModalAe, PairedBatch, TrainConfig};
use xmodal_core::downstream::{auroc, fit_logistic, fit_ridge, ridge_coefficients, HEAD_L2};
use xmodal_core::synth::{generate_cohort, Split, SubjectRecord};
use xmodal_core::tensor::DenseTensor;

#[test]
fn one_adam_step_lowers_the_batch_loss() {
    let ds = generate_cohort(40, 3).unwrap();
    let members: Vec<&SubjectRecord> = ds.subjects.iter().take(8).collect();
    let batch = PairedBatch::<f32>::from_subjects(&members).unwrap();
    for seed in 0..20 {
        let config = TrainConfig {
            seed,
            hidden_width: 32,
            ..TrainConfig::default()
        };
        let objective = config.objective();
        let mut model = CrossModalAe::<f32>::init(&config).unwrap();
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|p| p.shape().to_vec()).collect();
        let mut adam = AdamState::<f32>::new(
            AdamConfig::with_lr(1e-3),
            model.parameter_names().into_iter().zip(shapes.iter().map(Vec::as_slice)),
        )
        .unwrap();
        let (before, grads) = model.loss_and_gradients(&batch, objective).unwrap();
        let grads: Vec<&DenseTensor<f32>> = grads.iter().collect();
        adam.step(&mut model.parameters_mut(), &grads).unwrap();
        let after = model.loss(&batch, objective).unwrap();
        assert!(after.total < before.total, "seed {seed}: {} -> {}", before.total, after.total);
    }
}

#[test]
fn zero_epochs_returns_the_initial_weights() {
    let ds = generate_cohort(200, 1).unwrap();
    let config = TrainConfig {
        max_epochs: 0,
        hidden_width: 16,
        ..TrainConfig::default()
    };
    let trained = ae::train(&ds, &config).unwrap();
    assert_eq!(trained.epoch_of_best, 0);
    assert_eq!(trained.history.len(), 1);
    let fresh = CrossModalAe::<f32>::init(&config).unwrap();
    assert_eq!(trained.model.parameters(), fresh.parameters());
    assert_eq!(trained.validation_loss_at_best, trained.history[0].validation.total);
}

#[test]
fn short_runs_keep_the_best_epoch_and_are_deterministic() {
    let ds = generate_cohort(200, 2).unwrap();
    let config = TrainConfig {
        max_epochs: 6,
        patience: 2,
        hidden_width: 16,
        ..TrainConfig::default()
    };
    let a = ae::train(&ds, &config).unwrap();
    let b = ae::train(&ds, &config).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.parameters(), b.model.parameters());
    let best = a.history.iter().map(|r| r.validation.total).fold(f64::INFINITY, f64::min);
    assert_eq!(a.validation_loss_at_best, best);
    let replay = a.model.evaluate(&ds.split(Split::Validation), config.batch_size, config.objective()).unwrap();
    assert!((replay.total - best).abs() < 1e-5);
}

#[test]
fn training_rejects_bad_configs() {
    let ds = generate_cohort(100, 1).unwrap();
    for config in [
        TrainConfig { temperature: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { latent_dim: 0, ..TrainConfig::default() },
    ] {
        assert!(ae::train(&ds, &config).is_err(), "{config:?}");
    }
}

fn random_design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn ridge_matches_an_augmented_normal_equations_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (n, d) = (rng.random_range(20..80), rng.random_range(1..6));
        let x = random_design(&mut rng, n, d);
        let w_true: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.7 + r.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>()).collect();

        // Unpenalized intercept as an extra design column.
        let a = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
        let mut penalty = DMatrix::<f64>::zeros(d + 1, d + 1);
        for k in 0..d {
            penalty[(k, k)] = HEAD_L2;
        }
        let lhs = a.transpose() * &a / n as f64 + penalty;
        let rhs = a.transpose() * DVector::from_vec(y.clone()) / n as f64;
        let theta = lhs.lu().solve(&rhs).unwrap();

        let (w, b) = ridge_coefficients(&x, &y, HEAD_L2).unwrap();
        for k in 0..d {
            assert!((w[k] - theta[k]).abs() < 1e-4, "{w:?} vs {theta}");
        }
        assert!((b - theta[d]).abs() < 1e-4);
        let head = fit_ridge(&x, &y, HEAD_L2).unwrap();
        assert_eq!(head.weights.len(), d);
    }
}

#[test]
fn logistic_loss_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        let x = random_design(&mut rng, 200, 4);
        let y: Vec<f64> = x
            .iter()
            .map(|r| f64::from(r[0] - 0.5 * r[2] + rng.random_range(-1.0..1.0) > 0.0))
            .collect();
        let fit = fit_logistic(&x, &y, HEAD_L2, 500).unwrap();
        assert_eq!(fit.loss_trace.len(), 501);
        for w in fit.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        let scores: Vec<f64> = x.iter().map(|r| fit.head.score(&r.iter().map(|&v| v as f32).collect::<Vec<_>>())).collect();
        let labels: Vec<bool> = y.iter().map(|&v| v == 1.0).collect();
        assert!(auroc(&scores, &labels).unwrap() > 0.75);
    }
    assert!(fit_logistic(&[vec![1.0]], &[0.5], HEAD_L2, 10).is_err());
}

#[test]
fn shuffled_labels_on_2000_random_scores_sit_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let scores: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..2000).map(|_| rng.random_bool(0.3)).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((0.45..=0.55).contains(&a), "{a}");
    }
}
