mod support;

use nalgebra::{DMatrix, SymmetricEigen};
use optima_core::distributions::{DiagonalGaussian, NoiseSource};
use optima_core::elbo::Estimator;
use optima_core::model::{Activation, Head, ModelState, NetworkSpec};
use optima_core::theory::{
    ece_scaling_diagnostic, information_gain, invariance_expansion_check, jensen_gap_check,
    posterior_shrinkage, shrinkage_bound, toy_classifier_ece, ConjugateGaussianModel, EceSetup,
    Status,
};
use proptest::prelude::*;
use rand::Rng;
use support::rng;

fn random_spd(r: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * r.random_range(0.05..1.0)
}

/// `(1/2) sum log(1 + lambda)` over eigenvalues of `L^-1 H_aug L^-T`.
fn eigen_gain(hn: &DMatrix<f64>, ha: &DMatrix<f64>) -> f64 {
    let l = hn.clone().cholesky().unwrap().l();
    let li = l.clone().try_inverse().unwrap();
    let m = &li * ha * li.transpose();
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| 0.5 * (1.0 + v).ln())
        .sum()
}

/// Entropy difference of `N(., H_noaug^-1)` and `N(., (H_noaug + H_aug)^-1)`.
fn entropy_gain(hn: &DMatrix<f64>, ha: &DMatrix<f64>) -> f64 {
    let logdet = |m: &DMatrix<f64>| {
        SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .map(|v| v.ln())
            .sum::<f64>()
    };
    let sn = hn.clone().try_inverse().unwrap();
    let sa = (hn + ha).try_inverse().unwrap();
    0.5 * logdet(&sn) - 0.5 * logdet(&sa)
}

#[test]
fn information_gain_matches_eigen_oracles() {
    let mut r = rng(31);
    for _ in 0..100 {
        let d = r.random_range(1..7);
        let hn = random_spd(&mut r, d);
        let ha = random_spd(&mut r, d);
        let v = information_gain(&hn, &ha).unwrap();
        assert!(v >= 0.0);
        assert!((v - eigen_gain(&hn, &ha)).abs() < 1e-10, "{v}");
        assert!((v - entropy_gain(&hn, &ha)).abs() < 1e-9);
    }
}

#[test]
fn weak_prior_shrinkage_is_one_over_k() {
    let ys: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
    let m = ConjugateGaussianModel::new(0.0, 1e9, 1.0, ys).unwrap();
    for k in [2, 5, 10] {
        let s = posterior_shrinkage(&m, k).unwrap();
        assert!((s.ratio - 1.0 / k as f64).abs() < 1e-6);
        // independent closed form 1 / (1/prior_var + N k / obs_var)
        let expected = 1.0 / (1e-9 + 10.0 * k as f64);
        assert!((s.var_naive - expected).abs() < 1e-12 * expected.max(1.0));
    }
}

proptest! {
    #[test]
    fn shrinkage_deviation_respects_the_exact_bound(
        prior_var in 1e-2f64..1e4,
        obs_var in 1e-2f64..1e2,
        n in 1usize..40,
        k in 1usize..20,
    ) {
        let m = ConjugateGaussianModel::new(0.3, prior_var, obs_var, vec![1.0; n]).unwrap();
        let s = posterior_shrinkage(&m, k).unwrap();
        prop_assert!((s.ratio - 1.0 / k as f64).abs() <= shrinkage_bound(&m, k) * (1.0 + 1e-9));
    }
}

#[test]
fn jensen_gap_respects_the_bound_on_random_lipschitz_functions() {
    let mut r = rng(41);
    for t in 0..100 {
        let d = r.random_range(1..4);
        let terms: Vec<(f64, Vec<f64>, f64)> = (0..3)
            .map(|_| {
                (
                    r.random_range(-1.0..1.0),
                    (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
                    r.random_range(0.0..6.0),
                )
            })
            .collect();
        // L = sum |a| ||b|| for sum a sin(b . g + c)
        let lip: f64 = terms
            .iter()
            .map(|(a, b, _)| a.abs() * b.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum();
        let f = |g: &[f64]| {
            terms
                .iter()
                .map(|(a, b, c)| a * (b.iter().zip(g).map(|(x, y)| x * y).sum::<f64>() + c).sin())
                .sum()
        };
        let q = DiagonalGaussian::new(
            (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            (0..d).map(|_| r.random_range(-3.0..0.0)).collect(),
        )
        .unwrap();
        let rep = jensen_gap_check(&f, lip, &q, 20_000, NoiseSource::new(t)).unwrap();
        assert!(rep.passed(), "function {t}: {}", rep.detail);
        assert!(rep.quantities["gap"] >= -3.0 * rep.quantities["standard_error"]);
    }
}

#[test]
fn jensen_gap_quadratic_example() {
    let q = DiagonalGaussian::isotropic(vec![0.0], 0.3);
    // sampled support of N(0, 0.3^2) stays inside |g| < 2, so |f'| <= 4
    let rep = jensen_gap_check(&|g| -g[0] * g[0], 4.0, &q, 100_000, NoiseSource::new(3)).unwrap();
    assert!(rep.passed());
    assert!(rep.quantities["gap"] > 0.0);
}

fn tanh_net(seed: u64, d: usize, hidden: usize, out: usize) -> ModelState {
    let spec = NetworkSpec {
        input_dim: d,
        hidden: vec![hidden],
        activations: vec![Activation::Tanh],
        head: Head::Categorical { classes: out },
        bayes_last_layer: false,
    };
    ModelState::init(&spec, NoiseSource::new(seed)).unwrap()
}

#[test]
fn invariance_expansion_holds_for_small_networks() {
    let mut r = rng(51);
    for t in 0..10 {
        let d = r.random_range(1..5);
        let net = tanh_net(t, d, r.random_range(2..8), r.random_range(2..4));
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let rep =
            invariance_expansion_check(&net, &x, &vec![1e-4; d], 100_000, NoiseSource::new(t))
                .unwrap();
        assert_eq!(rep.status, Status::Pass, "network {t}: {}", rep.detail);
    }
}

#[test]
fn linear_network_matches_the_jacobian_term() {
    let spec = NetworkSpec {
        input_dim: 3,
        hidden: vec![],
        activations: vec![],
        head: Head::Categorical { classes: 2 },
        bayes_last_layer: false,
    };
    let net = ModelState::init(&spec, NoiseSource::new(4)).unwrap();
    let rep = invariance_expansion_check(
        &net,
        &[0.2, -0.4, 0.9],
        &[1e-4, 2e-4, 5e-5],
        100_000,
        NoiseSource::new(2),
    )
    .unwrap();
    assert!(rep.quantities["second_order_term"].abs() < 1e-12);
    let mc = rep.quantities["monte_carlo"];
    let jac = rep.quantities["jacobian_term"];
    assert!(
        (mc - jac).abs() < 3.0 * rep.quantities["standard_error"],
        "{}",
        rep.detail
    );
    let zero =
        invariance_expansion_check(&net, &[0.2, -0.4, 0.9], &[0.0; 3], 100, NoiseSource::new(2))
            .unwrap();
    assert_eq!(zero.quantities["monte_carlo"], 0.0);
}

#[test]
fn ece_curve_contract_and_baseline() {
    let setup = EceSetup {
        n_test: 500,
        epochs: 100,
        mc_samples: 20,
        ..EceSetup::default()
    };
    let curve = ece_scaling_diagnostic(&setup, &[1, 3, 5]).unwrap();
    assert_eq!(
        curve.points.iter().map(|p| p.0).collect::<Vec<_>>(),
        vec![1, 3, 5]
    );
    assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.1)));
    // one sample per example: replication and marginalization coincide
    assert_eq!(
        curve.points[0].1,
        toy_classifier_ece(&setup, 1, Estimator::Marginalized).unwrap()
    );
}

#[test]
fn replication_worsens_calibration_on_the_toy() {
    let mut worse = 0;
    for seed in 0..5 {
        let setup = EceSetup {
            seed,
            ..EceSetup::default()
        };
        let curve = ece_scaling_diagnostic(&setup, &[1, 10]).unwrap();
        eprintln!("seed {seed}: {:?}", curve.points);
        if curve.points[1].1 > curve.points[0].1 {
            worse += 1;
        }
    }
    assert!(worse >= 4, "ECE(10) > ECE(1) on {worse}/5 seeds");
}
