mod support;

use optima_core::augmentation::{
    apply_transform, gumbel_softmax_sample, sample_gamma, AugmentationFamily,
};
use optima_core::distributions::NoiseSource;
use proptest::prelude::*;
use support::{central_diff, rel_err};

fn mean_deviation(family: &AugmentationFamily, x: &[f64], n: usize) -> f64 {
    let root = NoiseSource::new(17);
    (0..n)
        .map(|i| {
            let s = sample_gamma(family, root.child(i as u64)).unwrap();
            let y = apply_transform(family, &s, x).unwrap();
            y.iter()
                .zip(x)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

fn blob(h: usize, w: usize) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    (0..h * w)
        .map(|k| {
            let (i, j) = ((k / w) as f64, (k % w) as f64);
            (-((i - cy).powi(2) + (j - cx).powi(2)) / 8.0).exp()
        })
        .collect()
}

#[test]
fn deviation_from_identity_scales_linearly_in_sigma() {
    let x = vec![0.4, -1.2, 2.0];
    let small = mean_deviation(
        &AugmentationFamily::additive_shift(3, 1e-3, 0.2, (0.2, 0.5)),
        &x,
        2000,
    );
    let large = mean_deviation(
        &AugmentationFamily::additive_shift(3, 1e-2, 0.2, (0.2, 0.5)),
        &x,
        2000,
    );
    let ratio = large / small;
    assert!((5.0..=20.0).contains(&ratio), "additive ratio {ratio}");

    let img = blob(8, 8);
    let small = mean_deviation(
        &AugmentationFamily::affine_image(8, 8, 1e-3, 0.5),
        &img,
        500,
    );
    let large = mean_deviation(
        &AugmentationFamily::affine_image(8, 8, 1e-2, 0.5),
        &img,
        500,
    );
    let ratio = large / small;
    assert!((5.0..=20.0).contains(&ratio), "affine ratio {ratio}");
}

#[test]
fn transforms_are_deterministic_per_seed_and_index() {
    let f = AugmentationFamily::affine_image(6, 6, 0.1, 0.5);
    let x = blob(6, 6);
    let a = apply_transform(
        &f,
        &sample_gamma(&f, NoiseSource::new(4).child(3)).unwrap(),
        &x,
    )
    .unwrap();
    let b = apply_transform(
        &f,
        &sample_gamma(&f, NoiseSource::new(4).child(3)).unwrap(),
        &x,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn pathwise_shift_gradient_matches_finite_differences() {
    // E ||x + mu + s eps||^2 with phi = (mu, log s), common random numbers
    let x = vec![0.5, -1.0];
    let n = 500;
    let objective = |phi: &[f64]| {
        let f = AugmentationFamily::additive_shift(2, 0.1, 0.2, (0.2, 0.5)).with_phi(phi.to_vec());
        (0..n)
            .map(|i| {
                let s = sample_gamma(&f, NoiseSource::new(8).child(i)).unwrap();
                apply_transform(&f, &s, &x)
                    .unwrap()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64
    };
    let phi = vec![0.2, -0.3, (0.3f64).ln(), (0.1f64).ln()];
    let f = AugmentationFamily::additive_shift(2, 0.1, 0.2, (0.2, 0.5)).with_phi(phi.clone());
    let mut grad = vec![0.0; 4];
    for i in 0..n {
        let s = sample_gamma(&f, NoiseSource::new(8).child(i)).unwrap();
        let y = apply_transform(&f, &s, &x).unwrap();
        for d in 0..2 {
            grad[d] += 2.0 * y[d] / n as f64;
            grad[2 + d] += 2.0 * y[d] * s.noise[d] * phi[2 + d].exp() / n as f64;
        }
    }
    let fd = central_diff(&mut |p| objective(p), &phi, 1e-6);
    assert!(rel_err(&grad, &fd, 1e-8) < 1e-3, "{grad:?} vs {fd:?}");
}

proptest! {
    #[test]
    fn gumbel_softmax_stays_on_the_simplex(
        logits in prop::collection::vec(-10.0f64..10.0, 1..8),
        temperature in 0.05f64..5.0,
        seed in 0u64..1000,
    ) {
        let w = gumbel_softmax_sample(&logits, temperature, NoiseSource::new(seed)).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
    }
}
