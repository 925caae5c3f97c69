//! Mean-field Gaussians, a log-normal prior, closed-form and Monte Carlo KL,
//! and counter-based noise streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradengine::{Graph, NodeId};
use crate::tensor::Tensor;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Bounds applied to every learnable log standard deviation.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 5.0;

pub fn clamp_log_std(v: f64) -> f64 {
    v.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// Densities over real vectors.
pub trait LogDensity {
    fn log_density(&self, x: &[f64]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if !mean.iter().chain(&log_std).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "gaussian parameters must be finite".into(),
            ));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let log_std = vec![std.ln(); mean.len()];
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    /// `mean + exp(log_std) * noise`.
    pub fn sample_reparameterized(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: noise.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect())
    }

    pub fn sample(&self, stream: &mut NoiseStream) -> Vec<f64> {
        let eps = stream.normal_vec(self.dim());
        self.sample_reparameterized(&eps)
            .expect("noise sized to dim")
    }
}

impl LogDensity for DiagonalGaussian {
    fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((v, m), s)| {
                let z = (v - m) * (-s).exp();
                -HALF_LN_2PI - s - 0.5 * z * z
            })
            .sum())
    }
}

/// Independent log-normal coordinates sharing `(mu_log, sigma_log)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub mu_log: f64,
    pub sigma_log: f64,
}

impl LogNormalPrior {
    pub fn new(mu_log: f64, sigma_log: f64) -> Result<Self> {
        if !(sigma_log > 0.0 && sigma_log.is_finite() && mu_log.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_log must be positive, got {sigma_log}"
            )));
        }
        Ok(Self { mu_log, sigma_log })
    }

    /// The same prior expressed on the log scale, where it is Gaussian.
    pub fn log_scale_gaussian(&self, dim: usize) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: vec![self.mu_log; dim],
            log_std: vec![self.sigma_log.ln(); dim],
        }
    }
}

impl LogDensity for LogNormalPrior {
    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for &v in x {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "log-normal support is x > 0, got {v}"
                )));
            }
            let l = v.ln();
            let z = (l - self.mu_log) / self.sigma_log;
            total += -HALF_LN_2PI - self.sigma_log.ln() - l - 0.5 * z * z;
        }
        Ok(total)
    }
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_diagonal_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        if q.mean[i] == p.mean[i] && q.log_std[i] == p.log_std[i] {
            continue;
        }
        let var_ratio = (2.0 * (q.log_std[i] - p.log_std[i])).exp();
        let diff = q.mean[i] - p.mean[i];
        let term = p.log_std[i] - q.log_std[i]
            + 0.5 * (var_ratio + diff * diff * (-2.0 * p.log_std[i]).exp())
            - 0.5;
        kl += term.max(0.0);
    }
    Ok(kl)
}

/// `(1/n) sum log q(x_i) - log p(x_i)` with `x_i ~ q`.
pub fn kl_monte_carlo(
    q: &DiagonalGaussian,
    p: &dyn LogDensity,
    n: usize,
    noise: NoiseSource,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    let mut stream = noise.stream();
    let mut total = 0.0;
    for _ in 0..n {
        let x = q.sample(&mut stream);
        total += q.log_density(&x)? - p.log_density(&x)?;
    }
    Ok(total / n as f64)
}

/// Graph nodes for `mean + exp(log_std) * noise`.
pub fn reparameterize_node(g: &mut Graph, mean: NodeId, log_std: NodeId, noise: Tensor) -> NodeId {
    let eps = g.constant(noise);
    let std = g.exp(log_std);
    let scaled = g.mul(std, eps);
    g.add(mean, scaled)
}

/// Graph node for the closed-form KL of a learnable diagonal Gaussian against
/// a fixed one; both leaf nodes share `prior`'s flattened layout.
pub fn kl_node(g: &mut Graph, mean: NodeId, log_std: NodeId, prior: &DiagonalGaussian) -> NodeId {
    let shape = g.shape(mean).unwrap_or_else(|| vec![prior.dim()]);
    let p_mean = g.constant(
        Tensor::new(shape.clone(), prior.mean.clone())
            .unwrap_or_else(|_| Tensor::vector(prior.mean.clone())),
    );
    let p_log_std = Tensor::new(shape.clone(), prior.log_std.clone())
        .unwrap_or_else(|_| Tensor::vector(prior.log_std.clone()));
    let inv_var = g.constant(p_log_std.map(|s| (-2.0 * s).exp()));
    let p_ls = g.constant(p_log_std);
    // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
    let log_ratio = g.sub(p_ls, log_std);
    let twice = g.add(log_std, log_std);
    let var_q = g.exp(twice);
    let diff = g.sub(mean, p_mean);
    let diff_sq = g.square(diff);
    let num = g.add(var_q, diff_sq);
    let quad = g.mul(num, inv_var);
    let half_quad = g.scale(quad, 0.5);
    let per = g.add(log_ratio, half_quad);
    let per = g.offset(per, -0.5);
    g.sum(per)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable seed: a child is a pure function of (parent key, index), so a
/// per-example stream does not depend on which other examples were drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub seed: u64,
    key: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: splitmix64(seed),
        }
    }

    pub fn child(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            key: splitmix64(self.key ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F))),
        }
    }

    /// Child keyed by a short label, for separating independent purposes.
    pub fn named(&self, label: &str) -> Self {
        let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        self.child(h)
    }

    pub fn stream(&self) -> NoiseStream {
        NoiseStream {
            rng: ChaCha8Rng::seed_from_u64(self.key),
        }
    }
}

pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform().ln()).ln()
    }

    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        Beta::new(a, b)
            .expect("beta parameters positive")
            .sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradengine::{gradient, Bindings};

    #[test]
    fn reparameterized_identities() {
        let d = DiagonalGaussian::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(d.sample_reparameterized(&[1.5]).unwrap(), vec![1.5]);
        let d = DiagonalGaussian::new(vec![2.0], vec![3f64.ln()]).unwrap();
        assert_eq!(d.sample_reparameterized(&[0.0]).unwrap(), vec![2.0]);
        assert!(matches!(
            d.sample_reparameterized(&[0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn reparameterized_sample_mean() {
        let d = DiagonalGaussian::isotropic(vec![1.0], 0.5);
        let mut s = NoiseSource::new(11).stream();
        let n = 1_000_000;
        let mean = (0..n).map(|_| d.sample(&mut s)[0]).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 1e-2);
    }

    #[test]
    fn kl_closed_form_cases() {
        let p = DiagonalGaussian::standard(1);
        assert_eq!(kl_diagonal_gaussians(&p, &p).unwrap(), 0.0);
        let q = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_diagonal_gaussians(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_diagonal_gaussians(&q, &DiagonalGaussian::standard(2)).is_err());
    }

    #[test]
    fn kl_monte_carlo_matches_closed_form() {
        let q = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        let p = DiagonalGaussian::standard(1);
        let est = kl_monte_carlo(&q, &p, 1_000_000, NoiseSource::new(3)).unwrap();
        assert!((est - 0.5).abs() < 0.01, "{est}");
        assert!(kl_monte_carlo(&q, &p, 1, NoiseSource::new(3))
            .unwrap()
            .is_finite());
        assert!(kl_monte_carlo(&q, &p, 0, NoiseSource::new(3)).is_err());
    }

    #[test]
    fn kl_monte_carlo_identical_is_near_zero() {
        let q = DiagonalGaussian::new(vec![0.3, -1.0], vec![-0.2, 0.4]).unwrap();
        let n = 10_000;
        let est = kl_monte_carlo(&q, &q, n, NoiseSource::new(5)).unwrap();
        // Every term is exactly zero when q = p.
        assert_eq!(est, 0.0);
    }

    #[test]
    fn kl_random_pairs_match_monte_carlo() {
        let mut s = NoiseSource::new(21).stream();
        for trial in 0..3 {
            let q = DiagonalGaussian::new(
                (0..5).map(|_| s.uniform_range(-1.0, 1.0)).collect(),
                (0..5).map(|_| s.uniform_range(-0.5, 0.3)).collect(),
            )
            .unwrap();
            let p = DiagonalGaussian::new(
                (0..5).map(|_| s.uniform_range(-1.0, 1.0)).collect(),
                (0..5).map(|_| s.uniform_range(-0.3, 0.5)).collect(),
            )
            .unwrap();
            let exact = kl_diagonal_gaussians(&q, &p).unwrap();
            let mc = kl_monte_carlo(&q, &p, 1_000_000, NoiseSource::new(100 + trial)).unwrap();
            assert!(
                (mc - exact).abs() < 0.01 * exact,
                "trial {trial}: {mc} vs {exact}"
            );
        }
    }

    #[test]
    fn log_density_fixtures() {
        let n = DiagonalGaussian::standard(1);
        assert!((n.log_density(&[0.0]).unwrap() + HALF_LN_2PI).abs() < 1e-15);
        let ln = LogNormalPrior::new(0.0, 1.0).unwrap();
        assert!((ln.log_density(&[1.0]).unwrap() + HALF_LN_2PI).abs() < 1e-15);
        assert!(ln.log_density(&[0.0]).is_err());
        assert!(ln.log_density(&[-1.0]).is_err());
        assert!(LogNormalPrior::new(0.0, 0.0).is_err());
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn log_density_integrates_to_one() {
        let g = DiagonalGaussian::new(vec![0.7], vec![-0.4]).unwrap();
        let mass = simpson(|x| g.log_density(&[x]).unwrap().exp(), -10.0, 10.0, 20_000);
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
        let ln = LogNormalPrior::new(0.2, 0.6).unwrap();
        // Substitute x = e^u so the integrand is smooth on a finite window.
        let mass = simpson(
            |u| (ln.log_density(&[u.exp()]).unwrap() + u).exp(),
            -6.0,
            6.5,
            20_000,
        );
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn kl_node_matches_closed_form_and_gradient() {
        let q = DiagonalGaussian::new(vec![0.5, -0.2, 1.0], vec![-0.3, 0.1, 0.4]).unwrap();
        let p = DiagonalGaussian::new(vec![0.0, 0.3, -0.5], vec![0.0, -0.2, 0.5]).unwrap();
        let mut g = Graph::new();
        let m = g.input("m", &[3]);
        let s = g.input("s", &[3]);
        let kl = kl_node(&mut g, m, s, &p);
        g.set_output(kl);
        let b = Bindings::new()
            .with("m", Tensor::vector(q.mean.clone()))
            .with("s", Tensor::vector(q.log_std.clone()));
        let eval = g.forward(&b).unwrap();
        let exact = kl_diagonal_gaussians(&q, &p).unwrap();
        assert!((eval.output().unwrap().item().unwrap() - exact).abs() < 1e-12);
        let grads = gradient(&g, &b, &["m", "s"]).unwrap();
        for i in 0..3 {
            let dm = (q.mean[i] - p.mean[i]) * (-2.0 * p.log_std[i]).exp();
            let ds = -1.0 + (2.0 * (q.log_std[i] - p.log_std[i])).exp();
            assert!((grads["m"].data()[i] - dm).abs() < 1e-12);
            assert!((grads["s"].data()[i] - ds).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_children_are_independent_of_order() {
        let root = NoiseSource::new(42);
        let a: Vec<f64> = root.child(7).stream().normal_vec(4);
        let _ = root.child(3).stream().normal_vec(10);
        let b: Vec<f64> = root.child(7).stream().normal_vec(4);
        assert_eq!(a, b);
        assert_ne!(
            root.child(7).stream().normal_vec(4),
            root.child(8).stream().normal_vec(4)
        );
        assert_ne!(
            NoiseSource::new(1).stream().normal_vec(2),
            NoiseSource::new(2).stream().normal_vec(2)
        );
    }

    #[test]
    fn pathwise_gradient_matches_finite_differences() {
        // d/d(mu, log_std) E[tanh(x)^2 + x], x ~ N(mu, s^2), common random numbers.
        let n = 2000;
        let eps = NoiseSource::new(9).stream().normal_vec(n);
        let mut g = Graph::new();
        let mu = g.input("mu", &[]);
        let ls = g.input("ls", &[]);
        let mu_b = g.broadcast_scalar(mu, &[n]);
        let ls_b = g.broadcast_scalar(ls, &[n]);
        let x = reparameterize_node(&mut g, mu_b, ls_b, Tensor::vector(eps));
        let t = g.tanh(x);
        let t2 = g.square(t);
        let f = g.add(t2, x);
        let m = g.mean(f);
        g.set_output(m);
        let bind = |p: &[f64]| {
            Bindings::new()
                .with("mu", Tensor::scalar(p[0]))
                .with("ls", Tensor::scalar(p[1]))
        };
        let point = [0.4, -0.7];
        let grads = gradient(&g, &bind(&point), &["mu", "ls"]).unwrap();
        let fd = crate::gradengine::finite_difference_gradient(
            |p| {
                crate::gradengine::evaluate(&g, &bind(p))
                    .unwrap()
                    .item()
                    .unwrap()
            },
            &point,
            1e-5,
        )
        .unwrap();
        let pathwise = [grads["mu"].item().unwrap(), grads["ls"].item().unwrap()];
        for k in 0..2 {
            assert!(
                ((pathwise[k] - fd[k]) / fd[k]).abs() < 1e-3,
                "{k}: {} vs {}",
                pathwise[k],
                fd[k]
            );
        }
    }
}
