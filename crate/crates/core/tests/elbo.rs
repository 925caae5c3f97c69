mod support;

use optima_core::augmentation::{AugmentationFamily, DiscreteTransform};
use optima_core::data::{gen_glyph_classification, gen_synthetic_regression, Dataset};
use optima_core::distributions::{DiagonalGaussian, NoiseSource};
use optima_core::elbo::{
    augmented_elbo, AugmentationMode, ElboProblem, ElboSettings, Estimator, McConfig,
};
use optima_core::model::{
    forward, log_likelihood, Activation, FinalLayer, Head, ModelState, NetworkSpec,
};
use optima_core::trainer::initial_q_phi;
use support::elbo_gradient_error;

fn glyph_setup(seed: u64) -> (Dataset, ModelState) {
    let data = gen_glyph_classification(8, 8, 3, 0.2, seed).unwrap();
    let spec = NetworkSpec {
        input_dim: 64,
        hidden: vec![5],
        activations: vec![Activation::Tanh],
        head: Head::Categorical { classes: 3 },
        bayes_last_layer: true,
    };
    let mut model = ModelState::init(&spec, NoiseSource::new(seed)).unwrap();
    if let FinalLayer::Bayes { weight, bias } = &mut model.last {
        weight
            .log_std
            .iter_mut()
            .chain(bias.log_std.iter_mut())
            .for_each(|v| *v = -1.5);
    }
    (data, model)
}

fn regression_setup(seed: u64) -> (Dataset, ModelState) {
    let (data, _) = gen_synthetic_regression(10, 1, seed).unwrap();
    let spec = NetworkSpec {
        hidden: vec![6, 4],
        activations: vec![Activation::Tanh; 2],
        ..NetworkSpec::regression_default(1)
    };
    let mut model = ModelState::init(&spec, NoiseSource::new(seed)).unwrap();
    if let FinalLayer::Bayes { weight, .. } = &mut model.last {
        weight.log_std.iter_mut().for_each(|v| *v = -1.0);
    }
    (data, model)
}

fn learned_settings(nominal: usize, s_gamma: usize) -> ElboSettings {
    let mut s = ElboSettings::new(nominal);
    s.mc = McConfig {
        s_gamma,
        k_naive: s_gamma,
        s_theta: 2,
        s_phi: 2,
    };
    s
}

fn perturbed_q(family: &AugmentationFamily) -> DiagonalGaussian {
    let mut q = initial_q_phi(family);
    for (i, m) in q.mean.iter_mut().enumerate() {
        *m += 0.05 * (i as f64 + 1.0);
    }
    q.log_std.iter_mut().for_each(|v| *v = -1.5);
    q
}

#[test]
fn additive_shift_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let (data, model) = regression_setup(seed);
        let family = AugmentationFamily::additive_shift(1, 0.2, 0.2, (0.2, 0.5));
        let q = perturbed_q(&family);
        let settings = learned_settings(4, 3);
        let p = ElboProblem {
            data: &data,
            model: &model,
            q_phi: &q,
            family: &family,
            settings: &settings,
        };
        let (e, name) = elbo_gradient_error(&p, &[1, 4, 6, 9], NoiseSource::new(seed + 10), 1e-6);
        assert!(e < 1e-3, "seed {seed}: {name} relative error {e:.3e}");
    }
}

#[test]
fn categorical_gradient_matches_finite_differences() {
    let (data, model) = glyph_setup(1);
    let family = AugmentationFamily::categorical(
        vec![
            DiscreteTransform::Identity,
            DiscreteTransform::FlipHorizontal,
            DiscreteTransform::Rotate180,
        ],
        0.7,
        8,
        8,
    )
    .unwrap();
    let q = perturbed_q(&family);
    let settings = learned_settings(3, 2);
    let p = ElboProblem {
        data: &data,
        model: &model,
        q_phi: &q,
        family: &family,
        settings: &settings,
    };
    let (e, name) = elbo_gradient_error(&p, &[0, 2, 5], NoiseSource::new(3), 1e-6);
    assert!(e < 1e-3, "{name} relative error {e:.3e}");
}

#[test]
fn affine_gradient_matches_finite_differences() {
    let (data, model) = glyph_setup(2);
    let family = AugmentationFamily::affine_image(8, 8, 0.1, 0.5);
    let q = perturbed_q(&family);
    let settings = learned_settings(3, 2);
    let p = ElboProblem {
        data: &data,
        model: &model,
        q_phi: &q,
        family: &family,
        settings: &settings,
    };
    let (e, name) = elbo_gradient_error(&p, &[1, 3, 7], NoiseSource::new(5), 1e-7);
    assert!(e < 1e-3, "{name} relative error {e:.3e}");
}

#[test]
fn marginalized_minus_naive_equals_scaled_advantage() {
    let (data, model) = regression_setup(4);
    let family = AugmentationFamily::additive_shift(1, 0.3, 0.2, (0.2, 0.5));
    let q = perturbed_q(&family);
    let batch = [0, 2, 3, 8];
    let mut marg = learned_settings(4, 5);
    marg.mc.s_theta = 1;
    let mut naive = marg.clone();
    naive.estimator = Estimator::Naive { overcount: false };
    let noise = NoiseSource::new(8);
    let m = augmented_elbo(&data, &batch, &model, &q, &family, &marg, noise).unwrap();
    let n = augmented_elbo(&data, &batch, &model, &q, &family, &naive, noise).unwrap();
    let diff = m.data_fit - n.data_fit;
    let expected = data.len() as f64 * m.dphi_mean;
    assert!(
        (diff - expected).abs() < 1e-10 * (1.0 + m.data_fit.abs()),
        "{diff} vs {expected}"
    );
    assert!(m.dphi_mean >= -1e-12);
    assert_eq!(m.dphi_mean, n.dphi_mean);
}

#[test]
fn total_is_invariant_under_batch_reordering() {
    let (data, model) = regression_setup(5);
    let family = AugmentationFamily::additive_shift(1, 0.2, 0.2, (0.2, 0.5));
    let q = perturbed_q(&family);
    let s = learned_settings(5, 4);
    let noise = NoiseSource::new(2);
    let a = augmented_elbo(&data, &[0, 1, 2, 3, 4], &model, &q, &family, &s, noise).unwrap();
    let b = augmented_elbo(&data, &[3, 0, 4, 2, 1], &model, &q, &family, &s, noise).unwrap();
    assert!((a.total - b.total).abs() < 1e-10 * (1.0 + a.total.abs()));
}

#[test]
fn more_transformation_samples_never_lower_the_expected_fit() {
    let (data, model) = regression_setup(6);
    let family = AugmentationFamily::additive_shift(1, 0.5, 0.2, (0.2, 0.5));
    let q = initial_q_phi(&family);
    let batch: Vec<usize> = (0..10).collect();
    let mut prev: Option<(f64, f64)> = None;
    for s_gamma in [1, 4, 16] {
        let mut s = ElboSettings::new(10);
        s.mode = AugmentationMode::Fixed;
        s.mc = McConfig {
            s_gamma,
            ..McConfig::default()
        };
        let fits: Vec<f64> = (0..200)
            .map(|t| {
                augmented_elbo(
                    &data,
                    &batch,
                    &model,
                    &q,
                    &family,
                    &s,
                    NoiseSource::new(1000 + t),
                )
                .unwrap()
                .data_fit
            })
            .collect();
        let mean = fits.iter().sum::<f64>() / 200.0;
        let se = (fits.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 199.0 / 200.0).sqrt();
        if let Some((pm, pse)) = prev {
            assert!(
                mean >= pm - 2.0 * (se * se + pse * pse).sqrt(),
                "s_gamma {s_gamma}: {mean} < {pm}"
            );
        }
        prev = Some((mean, se));
    }
}

#[test]
fn no_augmentation_point_model_is_the_scaled_log_likelihood() {
    let (data, model) = regression_setup(7);
    let model = model.mean_model();
    let family = AugmentationFamily::additive_shift(1, 0.2, 0.2, (0.2, 0.5));
    let q = initial_q_phi(&family);
    let mut s = ElboSettings::new(4);
    s.mode = AugmentationMode::Off;
    let batch = [0, 5, 6, 9];
    let e = augmented_elbo(&data, &batch, &model, &q, &family, &s, NoiseSource::new(1)).unwrap();
    let mut direct = 0.0;
    for &i in &batch {
        let out = forward(
            &model,
            None,
            &optima_core::Tensor::row(data.row(i).to_vec()),
        )
        .unwrap();
        direct += log_likelihood(&model.spec.head, out.data(), &data.target(i)).unwrap();
    }
    direct *= data.len() as f64 / batch.len() as f64;
    assert!((e.data_fit - direct).abs() < 1e-10 * (1.0 + direct.abs()));
    assert_eq!(e.kl_theta, 0.0);
    assert_eq!(e.kl_phi, 0.0);
    assert_eq!(e.total, e.data_fit);
}

#[test]
fn mixup_gradient_is_finite_and_reaches_phi() {
    let (data, model) = glyph_setup(3);
    let family = AugmentationFamily::mixup(0.5, 0.5);
    let q = perturbed_q(&family);
    let settings = learned_settings(4, 3);
    let p = ElboProblem {
        data: &data,
        model: &model,
        q_phi: &q,
        family: &family,
        settings: &settings,
    };
    let g = p
        .estimate_with_gradient(&[0, 1, 2, 3], NoiseSource::new(2), &mut Default::default())
        .unwrap();
    let dm = g.grads["qphi.mean"].data();
    assert!(dm.iter().all(|v| v.is_finite()));
    assert!(dm.iter().any(|v| *v != 0.0));
}
