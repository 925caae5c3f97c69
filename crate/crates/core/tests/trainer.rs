mod support;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use optima_core::augmentation::AugmentationFamily;
use optima_core::data::{gen_synthetic_regression, Dataset, Task};
use optima_core::distributions::NoiseSource;
use optima_core::elbo::{AugmentationMode, McConfig};
use optima_core::model::{FinalLayer, Head, NetworkSpec};
use optima_core::trainer::{train_full_vi, train_partial_vi, TrainConfig};
use optima_core::Tensor;

fn linear_data(n: usize, seed: u64) -> Dataset {
    let mut s = NoiseSource::new(seed).stream();
    let xs: Vec<f64> = (0..n).map(|_| s.uniform_range(-1.0, 1.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| 1.5 * x - 0.5 + 0.2 * s.standard_normal())
        .collect();
    Dataset::new(
        Task::Regression,
        vec![1],
        Tensor::matrix(n, 1, xs).unwrap(),
        ys,
        BTreeMap::new(),
    )
    .unwrap()
}

fn linear_spec(bayes: bool) -> NetworkSpec {
    NetworkSpec {
        input_dim: 1,
        hidden: vec![],
        activations: vec![],
        head: Head::GaussianRegression { noise_std: 0.2 },
        bayes_last_layer: bayes,
    }
}

/// Exact posterior precision and mean for `y = w x + b` with prior `N(0, 1)`.
fn conjugate_posterior(data: &Dataset, noise_var: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.len();
    let x = DMatrix::from_fn(
        n,
        2,
        |i, j| if j == 0 { data.inputs.data()[i] } else { 1.0 },
    );
    let y = DVector::from_vec(data.targets.clone());
    let precision = x.transpose() * &x / noise_var + DMatrix::identity(2, 2);
    let mean = precision
        .clone()
        .cholesky()
        .unwrap()
        .solve(&(x.transpose() * y / noise_var));
    (precision, mean)
}

fn off_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        lr_net: lr,
        beta_net: 1.0,
        epochs,
        batch_size: 40,
        mode: AugmentationMode::Off,
        log_every: 100,
        mc: McConfig {
            s_theta: 4,
            ..McConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn full_vi_recovers_the_conjugate_mean_field_posterior() {
    let data = linear_data(40, 1);
    let (precision, mean) = conjugate_posterior(&data, 0.04);
    let family = AugmentationFamily::additive_shift(1, 0.1, 0.2, (0.2, 0.5));
    let out = train_full_vi(&data, &linear_spec(true), &family, &off_config(5000, 5e-3)).unwrap();
    let FinalLayer::Bayes { weight, bias } = &out.model.last else {
        panic!("bayes layer expected")
    };
    let got_mean = [weight.mean[0], bias.mean[0]];
    let got_std = [weight.log_std[0].exp(), bias.log_std[0].exp()];
    for k in 0..2 {
        // mean-field optimum: exact mean, std 1 / sqrt(precision_kk)
        let std = 1.0 / precision[(k, k)].sqrt();
        assert!(
            (got_mean[k] - mean[k]).abs() < 0.05 * mean[k].abs(),
            "mean {k}: {} vs {}",
            got_mean[k],
            mean[k]
        );
        assert!(
            (got_std[k] - std).abs() < 0.15 * std,
            "std {k}: {} vs {std}",
            got_std[k]
        );
    }
}

#[test]
fn partial_vi_without_augmentation_reduces_to_least_squares() {
    let data = linear_data(40, 2);
    let n = data.len();
    let x = DMatrix::from_fn(
        n,
        2,
        |i, j| if j == 0 { data.inputs.data()[i] } else { 1.0 },
    );
    let y = DVector::from_vec(data.targets.clone());
    let mle = (x.transpose() * &x)
        .cholesky()
        .unwrap()
        .solve(&(x.transpose() * y));
    let family = AugmentationFamily::additive_shift(1, 0.1, 0.2, (0.2, 0.5));
    let out =
        train_partial_vi(&data, &linear_spec(false), &family, &off_config(4000, 1e-2)).unwrap();
    let FinalLayer::Point(layer) = &out.model.last else {
        panic!("point layer expected")
    };
    assert!(
        (layer.weight.data()[0] - mle[0]).abs() < 1e-3,
        "{} vs {}",
        layer.weight.data()[0],
        mle[0]
    );
    assert!(
        (layer.bias.data()[0] - mle[1]).abs() < 1e-3,
        "{} vs {}",
        layer.bias.data()[0],
        mle[1]
    );
    assert!(out.trace.rows.iter().all(|r| r.kl_theta == 0.0));
}

fn short_learned_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr_net: 1e-2,
        epochs: 20,
        batch_size: 10,
        seed,
        mode: AugmentationMode::Learned,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_configs_give_bitwise_identical_traces() {
    let (data, _) = gen_synthetic_regression(30, 1, 3).unwrap();
    let spec = NetworkSpec {
        hidden: vec![8, 8],
        ..NetworkSpec::regression_default(1)
    };
    let family = AugmentationFamily::additive_shift(1, 0.1, 0.2, (0.2, 0.5));
    let a = train_full_vi(&data, &spec, &family, &short_learned_config(4)).unwrap();
    let b = train_full_vi(&data, &spec, &family, &short_learned_config(4)).unwrap();
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    for (ra, rb) in a.trace.rows.iter().zip(&b.trace.rows) {
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    }
    let c = train_full_vi(&data, &spec, &family, &short_learned_config(5)).unwrap();
    assert_ne!(a.trace.to_csv(), c.trace.to_csv());
}

#[test]
fn clipping_and_kl_stay_bounded_every_step() {
    let (data, _) = gen_synthetic_regression(30, 1, 3).unwrap();
    let spec = NetworkSpec {
        hidden: vec![8],
        activations: vec![optima_core::model::Activation::Tanh],
        ..NetworkSpec::regression_default(1)
    };
    let family = AugmentationFamily::additive_shift(1, 0.1, 0.2, (0.2, 0.5));
    let config = TrainConfig {
        clip_norm: 0.5,
        lr_aug: 0.3,
        ..short_learned_config(1)
    };
    let out = train_full_vi(&data, &spec, &family, &config).unwrap();
    assert_eq!(out.trace.rows.len(), 60);
    for r in &out.trace.rows {
        assert!(
            r.grad_norm <= 0.5 + 1e-9,
            "step {}: {}",
            r.step,
            r.grad_norm
        );
        assert!(r.kl_phi.is_finite());
    }
}

#[test]
fn a_heavy_augmentation_prior_pins_q_phi() {
    let (data, _) = gen_synthetic_regression(20, 1, 3).unwrap();
    let spec = NetworkSpec {
        hidden: vec![8],
        activations: vec![optima_core::model::Activation::Tanh],
        ..NetworkSpec::regression_default(1)
    };
    let family = AugmentationFamily::additive_shift(1, 0.1, 0.3, (0.2, 0.5));
    let config = TrainConfig {
        beta_aug: 1e6,
        lr_aug: 1e-2,
        epochs: 150,
        ..short_learned_config(2)
    };
    let out = train_full_vi(&data, &spec, &family, &config).unwrap();
    for (m, p) in out.q_phi.mean.iter().zip(&family.phi_prior.mean) {
        assert!((m - p).abs() < 1e-2, "{m} vs prior {p}");
    }
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let (data, _) = gen_synthetic_regression(10, 1, 3).unwrap();
    let family = AugmentationFamily::additive_shift(1, 0.1, 0.2, (0.2, 0.5));
    let config = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let spec = NetworkSpec::regression_default(1);
    let out = train_full_vi(&data, &spec, &family, &config).unwrap();
    let init =
        optima_core::model::ModelState::init(&spec, NoiseSource::new(0).named("init")).unwrap();
    assert!(out.trace.rows.is_empty());
    assert_eq!(out.optimizer.step, 0);
    assert_eq!(out.model.params(), init.params());
    assert_eq!(out.q_phi, optima_core::trainer::initial_q_phi(&family));
}
