mod support;

use optima_core::augmentation::AugmentationFamily;
use optima_core::data::gen_synthetic_regression;
use optima_core::distributions::NoiseSource;
use optima_core::elbo::{AugmentationMode, ElboProblem, ElboSettings, McConfig};
use optima_core::model::{
    predict, Activation, FinalLayer, Head, ModelState, NetworkSpec, Prediction,
};
use optima_core::trainer::initial_q_phi;
use rand::Rng;
use support::{elbo_gradient_error, rng};

#[test]
fn expected_log_likelihood_gradient_over_random_configurations() {
    let mut r = rng(21);
    let (data, _) = gen_synthetic_regression(12, 1, 4).unwrap();
    for cfg in 0..20 {
        let depth = r.random_range(0..3);
        let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(1..6)).collect();
        let spec = NetworkSpec {
            input_dim: 1,
            activations: vec![Activation::Tanh; hidden.len()],
            hidden,
            head: Head::GaussianRegression {
                noise_std: r.random_range(0.1..1.0),
            },
            bayes_last_layer: r.random_bool(0.5),
        };
        let mut model = ModelState::init(&spec, NoiseSource::new(cfg)).unwrap();
        if let FinalLayer::Bayes { weight, bias } = &mut model.last {
            weight
                .log_std
                .iter_mut()
                .chain(bias.log_std.iter_mut())
                .for_each(|v| *v = r.random_range(-3.0..-0.5));
        }
        let family = AugmentationFamily::additive_shift(1, 0.1, 0.2, (0.2, 0.5));
        let q_phi = initial_q_phi(&family);
        let mut settings = ElboSettings::new(6);
        settings.mode = AugmentationMode::Off;
        settings.mc = McConfig {
            s_theta: r.random_range(1..3),
            ..McConfig::default()
        };
        let problem = ElboProblem {
            data: &data,
            model: &model,
            q_phi: &q_phi,
            family: &family,
            settings: &settings,
        };
        let (e, name) = elbo_gradient_error(
            &problem,
            &[0, 3, 5, 7, 8, 11],
            NoiseSource::new(100 + cfg),
            1e-6,
        );
        assert!(e < 1e-3, "config {cfg}: {name} relative error {e:.3e}");
    }
}

#[test]
fn predictive_variance_grows_with_final_layer_scale() {
    let spec = NetworkSpec::regression_default(1);
    let (data, _) = gen_synthetic_regression(20, 1, 1).unwrap();
    let mut last = -1.0;
    for ls in [-4.0, -2.0, -0.5] {
        let mut model = ModelState::init(&spec, NoiseSource::new(2)).unwrap();
        if let FinalLayer::Bayes { weight, bias } = &mut model.last {
            weight
                .log_std
                .iter_mut()
                .chain(bias.log_std.iter_mut())
                .for_each(|v| *v = ls);
        }
        let Prediction::Values { variance, .. } =
            predict(&model, &data.inputs, 400, None, NoiseSource::new(3)).unwrap()
        else {
            unreachable!()
        };
        let mean_var = variance.iter().sum::<f64>() / variance.len() as f64;
        assert!(mean_var >= last, "{mean_var} < {last}");
        last = mean_var;
    }
}
