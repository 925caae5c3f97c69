mod support;

use optima_core::distributions::{kl_diagonal_gaussians, DiagonalGaussian, NoiseSource};
use rand::Rng;
use support::{central_diff, rel_err, rng};

#[test]
fn kl_is_nonnegative_and_zero_only_at_equality() {
    let mut r = rng(3);
    for _ in 0..1000 {
        let d = r.random_range(1..6);
        let mut draw = |n: usize, lo: f64, hi: f64| {
            (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>()
        };
        let q = DiagonalGaussian::new(draw(d, -3.0, 3.0), draw(d, -2.0, 1.0)).unwrap();
        let p = DiagonalGaussian::new(draw(d, -3.0, 3.0), draw(d, -2.0, 1.0)).unwrap();
        assert!(kl_diagonal_gaussians(&q, &p).unwrap() > 0.0);
        assert_eq!(kl_diagonal_gaussians(&q, &q).unwrap(), 0.0);
    }
}

#[test]
fn pathwise_mean_gradient_matches_common_random_numbers() {
    // g(z) = sin(z) + z^2 / 3; objective E[g(mu + s eps)] over fixed eps
    let mut stream = NoiseSource::new(5).stream();
    let eps: Vec<Vec<f64>> = (0..2000).map(|_| stream.normal_vec(3)).collect();
    let log_std = vec![-0.5, 0.0, -1.0];
    let objective = |mu: &[f64]| {
        let q = DiagonalGaussian::new(mu.to_vec(), log_std.clone()).unwrap();
        eps.iter()
            .map(|e| {
                q.sample_reparameterized(e)
                    .unwrap()
                    .iter()
                    .map(|z| z.sin() + z * z / 3.0)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / eps.len() as f64
    };
    let mu = [0.3, -0.7, 1.1];
    let q = DiagonalGaussian::new(mu.to_vec(), log_std.clone()).unwrap();
    let mut pathwise = vec![0.0; 3];
    for e in &eps {
        for (i, z) in q.sample_reparameterized(e).unwrap().iter().enumerate() {
            pathwise[i] += (z.cos() + 2.0 * z / 3.0) / eps.len() as f64;
        }
    }
    let fd = central_diff(&mut |m| objective(m), &mu, 1e-5);
    assert!(rel_err(&pathwise, &fd, 1e-8) < 1e-3);
}

#[test]
fn per_example_streams_do_not_depend_on_batch_composition() {
    let root = NoiseSource::new(9).named("gamma");
    let alone = root.child(42).stream().normal_vec(4);
    let mut others: Vec<Vec<f64>> = Vec::new();
    for i in [3u64, 42, 7] {
        others.push(root.child(i).stream().normal_vec(4));
    }
    assert_eq!(alone, others[1]);
    assert_ne!(others[0], others[1]);
}
