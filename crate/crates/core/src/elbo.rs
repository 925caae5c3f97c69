//! The augmented evidence lower bound, its per-example likelihood
//! estimators, the marginalization advantage, and the PAC-Bayes bound.

use serde::{Deserialize, Serialize};

use crate::augmentation::{
    apply_transform, mix_pair, sample_gamma, AugmentationFamily, FamilyKind, Gamma, TransformSample,
};
use crate::data::Dataset;
use crate::distributions::{
    clamp_log_std, kl_diagonal_gaussians, kl_node, DiagonalGaussian, NoiseSource, LOG_STD_MAX,
    LOG_STD_MIN,
};
use crate::error::{Error, Result};
use crate::gradengine::{Bindings, Graph, NodeId};
use crate::model::{forward, log_likelihood, log_likelihood_node, ModelState, ParamSet, Target};
use crate::tensor::Tensor;

pub const QPHI_MEAN: &str = "qphi.mean";
pub const QPHI_LOG_STD: &str = "qphi.log_std";
const AUG_INPUT: &str = "aug.input";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Transformation samples per example for the marginalized estimator.
    pub s_gamma: usize,
    /// Replicas per example for the naive estimator.
    pub k_naive: usize,
    pub s_theta: usize,
    pub s_phi: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            s_gamma: 4,
            k_naive: 4,
            s_theta: 1,
            s_phi: 1,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_gamma == 0 || self.k_naive == 0 || self.s_theta == 0 || self.s_phi == 0 {
            return Err(Error::InvalidArgument(
                "all Monte Carlo counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub data_fit: f64,
    pub kl_theta: f64,
    pub kl_phi: f64,
    pub beta_net: f64,
    pub beta_aug: f64,
    pub total: f64,
    /// Batch mean of the marginalization advantage over the same samples.
    pub dphi_mean: f64,
}

impl ElboEstimate {
    pub fn new(
        data_fit: f64,
        kl_theta: f64,
        kl_phi: f64,
        beta_net: f64,
        beta_aug: f64,
        dphi_mean: f64,
    ) -> Self {
        let total = data_fit - beta_net * kl_theta - beta_aug * kl_phi;
        Self {
            data_fit,
            kl_theta,
            kl_phi,
            beta_net,
            beta_aug,
            total,
            dphi_mean,
        }
    }

    pub fn recomputed_total(&self) -> f64 {
        self.data_fit - self.beta_net * self.kl_theta - self.beta_aug * self.kl_phi
    }
}

/// `log((1/s) sum exp(l_j))`, shift-stable.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    crate::gradengine::log_sum_exp(values) - (values.len() as f64).ln()
}

/// Marginalized estimate from per-sample log-likelihoods.
pub fn marginalized_from_logliks(logliks: &[f64]) -> Result<f64> {
    if logliks.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if logliks.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::DegenerateLikelihood(0));
    }
    Ok(log_mean_exp(logliks))
}

/// Naive estimate: the arithmetic mean of per-sample log-likelihoods.
pub fn naive_from_logliks(logliks: &[f64]) -> Result<f64> {
    if logliks.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    Ok(logliks.iter().sum::<f64>() / logliks.len() as f64)
}

/// `log-mean-exp - mean` over one shared sample set; exactly zero when all
/// entries are equal.
pub fn advantage_from_logliks(logliks: &[f64]) -> Result<f64> {
    let first = *logliks
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one sample".into()))?;
    if logliks.iter().all(|l| *l == first) {
        return Ok(0.0);
    }
    Ok(marginalized_from_logliks(logliks)? - naive_from_logliks(logliks)?)
}

/// Per-sample `log p(y | T_gamma(x), theta)` for pathwise or categorical
/// samples. Mixup samples need a partner and are rejected.
pub fn sample_logliks(
    state: &ModelState,
    theta_noise: Option<&[f64]>,
    family: &AugmentationFamily,
    x: &[f64],
    y: &Target,
    samples: &[TransformSample],
) -> Result<Vec<f64>> {
    let mut rows = Vec::with_capacity(samples.len() * x.len());
    for s in samples {
        rows.extend(apply_transform(family, s, x)?);
    }
    let out = forward(
        state,
        theta_noise,
        &Tensor::matrix(samples.len(), x.len(), rows)?,
    )?;
    let k = out.cols();
    out.data()
        .chunks(k)
        .map(|o| log_likelihood(&state.spec.head, o, y))
        .collect()
}

pub fn marginalized_loglik(
    state: &ModelState,
    theta_noise: Option<&[f64]>,
    family: &AugmentationFamily,
    x: &[f64],
    y: &Target,
    samples: &[TransformSample],
) -> Result<f64> {
    marginalized_from_logliks(&sample_logliks(state, theta_noise, family, x, y, samples)?)
}

pub fn naive_loglik(
    state: &ModelState,
    theta_noise: Option<&[f64]>,
    family: &AugmentationFamily,
    x: &[f64],
    y: &Target,
    samples: &[TransformSample],
) -> Result<f64> {
    naive_from_logliks(&sample_logliks(state, theta_noise, family, x, y, samples)?)
}

pub fn marginalization_advantage(
    state: &ModelState,
    theta_noise: Option<&[f64]>,
    family: &AugmentationFamily,
    x: &[f64],
    y: &Target,
    samples: &[TransformSample],
) -> Result<f64> {
    advantage_from_logliks(&sample_logliks(state, theta_noise, family, x, y, samples)?)
}

/// `R + sqrt((KL + log(2 sqrt(n) / delta)) / (2 n))`.
pub fn pac_bayes_bound(empirical_risk: f64, kl_total: f64, n: usize, delta: f64) -> Result<f64> {
    Ok(empirical_risk + pac_bayes_complexity(kl_total, n, delta)?)
}

pub fn pac_bayes_complexity(kl_total: f64, n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    if !(kl_total >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "kl_total must be >= 0, got {kl_total}"
        )));
    }
    let n = n as f64;
    Ok(((kl_total + (2.0 * n.sqrt() / delta).ln()) / (2.0 * n)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationMode {
    /// Clean inputs, one likelihood term per example.
    Off,
    /// Transformations drawn from the family's own `phi`; `q(phi)` unused.
    Fixed,
    /// `phi ~ q(phi)` reparameterized, learned jointly.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    /// log-mean-exp over `s_gamma` samples.
    Marginalized,
    /// Mean of logs over `k_naive` samples; with `overcount` the term is
    /// multiplied by `k_naive`, as if every replica were a separate example.
    Naive { overcount: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboSettings {
    pub mc: McConfig,
    pub beta_net: f64,
    pub beta_aug: f64,
    pub estimator: Estimator,
    pub mode: AugmentationMode,
    /// Standard deviation of the isotropic zero-mean prior on the final layer.
    pub prior_theta_std: f64,
    /// Drop `KL(q(theta) || p(theta))`, as in partial variational inference.
    pub include_kl_theta: bool,
    /// Nominal batch size `B` in the `N / B` rescaling.
    pub nominal_batch: usize,
}

impl ElboSettings {
    pub fn new(nominal_batch: usize) -> Self {
        Self {
            mc: McConfig::default(),
            beta_net: 0.1,
            beta_aug: 1.0,
            estimator: Estimator::Marginalized,
            mode: AugmentationMode::Learned,
            prior_theta_std: 1.0,
            include_kl_theta: true,
            nominal_batch,
        }
    }

    fn samples_per_example(&self) -> usize {
        match (self.mode, self.estimator) {
            (AugmentationMode::Off, _) => 1,
            (_, Estimator::Marginalized) => self.mc.s_gamma,
            (_, Estimator::Naive { .. }) => self.mc.k_naive,
        }
    }
}

/// Exponential moving average of the mixup learning signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBaseline {
    pub value: Option<f64>,
    pub decay: f64,
}

impl Default for ScoreBaseline {
    fn default() -> Self {
        Self {
            value: None,
            decay: 0.9,
        }
    }
}

impl ScoreBaseline {
    fn update(&mut self, signal: f64) {
        self.value = Some(match self.value {
            None => signal,
            Some(b) => self.decay * b + (1.0 - self.decay) * signal,
        });
    }
}

/// Gradients keyed like [`ModelState::params`] plus [`QPHI_MEAN`] and
/// [`QPHI_LOG_STD`] (both `[1, P]`).
#[derive(Clone, Debug)]
pub struct ElboGradient {
    pub estimate: ElboEstimate,
    pub grads: ParamSet,
}

/// Everything one objective evaluation needs apart from the batch and noise.
#[derive(Clone, Copy, Debug)]
pub struct ElboProblem<'a> {
    pub data: &'a Dataset,
    pub model: &'a ModelState,
    pub q_phi: &'a DiagonalGaussian,
    pub family: &'a AugmentationFamily,
    pub settings: &'a ElboSettings,
}

struct DrawPlan {
    phi_noise: Vec<f64>,
    phi: Vec<f64>,
    theta_noise: Option<Vec<f64>>,
    samples: Vec<Vec<TransformSample>>,
    partners: Vec<Vec<usize>>,
}

/// Manual chain-rule terms for contributions computed outside the graph.
struct DrawExtras {
    phi: Vec<f64>,
    phi_noise: Vec<f64>,
    affine_rows: Option<(NodeId, Vec<(Tensor, f64, f64, f64, Vec<f64>)>)>,
    mixup_scores: Vec<(usize, f64, f64)>,
    example_nodes: NodeId,
}

impl<'a> ElboProblem<'a> {
    fn validate(&self, batch: &[usize]) -> Result<()> {
        self.settings.mc.validate()?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("batch is empty".into()));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::InvalidArgument(format!(
                "batch index {i} out of range"
            )));
        }
        if self.settings.nominal_batch == 0 {
            return Err(Error::InvalidArgument(
                "nominal batch size must be positive".into(),
            ));
        }
        if self.q_phi.dim() != self.family.kind.phi_len() {
            return Err(Error::Dimension {
                expected: self.family.kind.phi_len(),
                got: self.q_phi.dim(),
            });
        }
        if self.data.dim() != self.model.spec.input_dim {
            return Err(Error::Dimension {
                expected: self.model.spec.input_dim,
                got: self.data.dim(),
            });
        }
        Ok(())
    }

    /// Noise for draw `(rt, rp)`: theta varies with `rt` only, phi with `rp`
    /// only, and every example has its own transformation stream.
    fn plan(
        &self,
        batch: &[usize],
        noise: NoiseSource,
        rt: u64,
        rp: u64,
        draw: u64,
    ) -> Result<DrawPlan> {
        let s = self.settings;
        let p = self.family.kind.phi_len();
        let phi_noise = noise.named("phi").child(rp).stream().normal_vec(p);
        let phi = match s.mode {
            AugmentationMode::Learned => self.q_phi.sample_reparameterized(&phi_noise)?,
            _ => self.family.sanitized_phi()?,
        };
        let theta_noise = self.model.is_bayes().then(|| {
            noise
                .named("theta")
                .child(rt)
                .stream()
                .normal_vec(self.model.theta_noise_len())
        });
        let family = self.family.with_phi(phi.clone());
        let per = s.samples_per_example();
        let gamma_root = noise.named("gamma").child(draw);
        let mut samples = Vec::with_capacity(batch.len());
        let mut partners = Vec::with_capacity(batch.len());
        for &i in batch {
            let src = gamma_root.child(i as u64);
            if s.mode == AugmentationMode::Off {
                samples.push(vec![]);
                partners.push(vec![]);
                continue;
            }
            let mut row = Vec::with_capacity(per);
            let mut prow = Vec::new();
            for j in 0..per {
                let sj = src.child(j as u64);
                row.push(sample_gamma(&family, sj)?);
                if family.kind == FamilyKind::MixupBeta {
                    prow.push(sj.named("partner").stream().below(self.data.len()));
                }
            }
            samples.push(row);
            partners.push(prow);
        }
        Ok(DrawPlan {
            phi_noise,
            phi,
            theta_noise,
            samples,
            partners,
        })
    }

    /// Builds the data-fit contribution of one (theta, phi) draw; returns the
    /// per-example estimate column `[B, 1]`, the raw log-likelihood column,
    /// and bookkeeping for manual gradients.
    fn build_draw(
        &self,
        g: &mut Graph,
        bindings: &mut Bindings,
        batch: &[usize],
        plan: &DrawPlan,
        draw: u64,
    ) -> Result<(NodeId, NodeId, DrawExtras)> {
        let s = self.settings;
        let b = batch.len();
        let per = s.samples_per_example();
        let rows = b * per;
        let d = self.data.dim();
        let weights = self.model.weight_nodes(g, plan.theta_noise.as_deref())?;

        let mut targets = Vec::with_capacity(rows);
        let mut xrep = Vec::with_capacity(rows * d);
        for (bi, &i) in batch.iter().enumerate() {
            for j in 0..per {
                match self.family.kind {
                    FamilyKind::MixupBeta if s.mode != AugmentationMode::Off => {
                        let Gamma::Mixup { lambda, .. } = plan.samples[bi][j].gamma else {
                            unreachable!()
                        };
                        let partner = plan.partners[bi][j];
                        xrep.extend(mix_pair(lambda, self.data.row(i), self.data.row(partner))?);
                        targets.push(mixed_target(
                            self.data.target(i),
                            self.data.target(partner),
                            lambda,
                        ));
                    }
                    _ => {
                        xrep.extend_from_slice(self.data.row(i));
                        targets.push(self.data.target(i));
                    }
                }
            }
        }
        let xrep = Tensor::matrix(rows, d, xrep)?;

        let phi_node = match s.mode {
            AugmentationMode::Learned => {
                let m = g.input(QPHI_MEAN, &[1, plan.phi.len()]);
                let ls = g.input(QPHI_LOG_STD, &[1, plan.phi.len()]);
                crate::distributions::reparameterize_node(
                    g,
                    m,
                    ls,
                    Tensor::row(plan.phi_noise.clone()),
                )
            }
            _ => g.constant(Tensor::row(plan.phi.clone())),
        };
        let ones_rows = g.constant(Tensor::full(&[rows, 1], 1.0));
        let mut affine_rows = None;
        let input = match (&self.family.kind, s.mode) {
            (_, AugmentationMode::Off) | (FamilyKind::MixupBeta, _) => g.constant(xrep),
            (FamilyKind::AdditiveShift { dim }, _) => {
                let dim = *dim;
                let p = 2 * dim;
                let mut sel_mu = vec![0.0; p * dim];
                let mut sel_ls = vec![0.0; p * dim];
                for k in 0..dim {
                    sel_mu[k * dim + k] = 1.0;
                    sel_ls[(dim + k) * dim + k] = 1.0;
                }
                let sel_mu = g.constant(Tensor::matrix(p, dim, sel_mu)?);
                let sel_ls = g.constant(Tensor::matrix(p, dim, sel_ls)?);
                let mu = g.matmul(phi_node, sel_mu);
                let ls = g.matmul(phi_node, sel_ls);
                let sd = g.exp(ls);
                let mu_rows = g.matmul(ones_rows, mu);
                let sd_rows = g.matmul(ones_rows, sd);
                let eps: Vec<f64> = plan
                    .samples
                    .iter()
                    .flatten()
                    .flat_map(|t| t.noise.iter().copied())
                    .collect();
                let eps = g.constant(Tensor::matrix(rows, dim, eps)?);
                let scaled = g.mul(sd_rows, eps);
                let shift = g.add(mu_rows, scaled);
                let x = g.constant(xrep);
                g.add(x, shift)
            }
            (
                FamilyKind::CategoricalChoice {
                    transforms,
                    temperature,
                    height,
                    width,
                },
                _,
            ) => {
                let m = transforms.len();
                let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
                let logits = g.matmul(ones, phi_node);
                let gum: Vec<f64> = plan
                    .samples
                    .iter()
                    .flatten()
                    .flat_map(|t| t.noise.iter().copied())
                    .collect();
                let gum = g.constant(Tensor::matrix(rows, m, gum)?);
                let z = g.add(logits, gum);
                let z = g.scale(z, 1.0 / temperature);
                let w = g.softmax(z, 1);
                let mut acc: Option<NodeId> = None;
                for (mi, t) in transforms.iter().enumerate() {
                    let mut e = vec![0.0; m * d];
                    e[mi * d..(mi + 1) * d].iter_mut().for_each(|v| *v = 1.0);
                    let e = g.constant(Tensor::matrix(m, d, e)?);
                    let wm = g.matmul(w, e);
                    let mut tx = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        tx.extend(t.apply(&xrep.data()[r * d..(r + 1) * d], *height, *width));
                    }
                    let tx = g.constant(Tensor::matrix(rows, d, tx)?);
                    let term = g.mul(wm, tx);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term),
                    });
                }
                acc.expect("at least one transform")
            }
            (FamilyKind::AffineImage { height, width }, _) => {
                let mut warped = Vec::with_capacity(rows * d);
                let mut meta = Vec::with_capacity(rows);
                for (r, t) in plan.samples.iter().flatten().enumerate() {
                    let Gamma::Affine { omega, tx, ty } = t.gamma else {
                        unreachable!()
                    };
                    let img =
                        Tensor::matrix(*height, *width, xrep.data()[r * d..(r + 1) * d].to_vec())?;
                    warped.extend(
                        crate::augmentation::bilinear_affine_warp(&img, omega, (tx, ty))
                            .into_data(),
                    );
                    meta.push((img, omega, tx, ty, t.noise.clone()));
                }
                let warped = Tensor::matrix(rows, d, warped)?;
                if s.mode == AugmentationMode::Learned {
                    let name = format!("{AUG_INPUT}.{draw}");
                    let leaf = g.input(&name, &[rows, d]);
                    bindings.insert(name, warped);
                    affine_rows = Some((leaf, meta));
                    leaf
                } else {
                    g.constant(warped)
                }
            }
        };

        let out = self.model.forward_nodes(g, &weights, input);
        let ll = log_likelihood_node(g, &self.model.spec.head, out, &targets)?;
        let per_example = if per == 1 {
            ll
        } else {
            let mut gather = vec![0.0; b * rows];
            let mut pick = vec![0.0; rows * per];
            for bi in 0..b {
                for j in 0..per {
                    gather[bi * rows + bi * per + j] = 1.0;
                    pick[(bi * per + j) * per + j] = 1.0;
                }
            }
            let ones = g.constant(Tensor::full(&[1, per], 1.0));
            let spread = g.matmul(ll, ones);
            let pick = g.constant(Tensor::matrix(rows, per, pick)?);
            let masked = g.mul(spread, pick);
            let gather = g.constant(Tensor::matrix(b, rows, gather)?);
            let table = g.matmul(gather, masked);
            match s.estimator {
                Estimator::Marginalized => {
                    let lse = g.log_sum_exp(table, 1);
                    g.offset(lse, -(per as f64).ln())
                }
                Estimator::Naive { .. } => g.mean_axis(table, 1),
            }
        };

        let mut mixup_scores = Vec::new();
        if self.family.kind == FamilyKind::MixupBeta && s.mode == AugmentationMode::Learned {
            for (bi, row) in plan.samples.iter().enumerate() {
                for t in row {
                    if let Gamma::Mixup { log_alpha, .. } = t.gamma {
                        mixup_scores.push((bi, log_alpha, t.noise[0]));
                    }
                }
            }
        }
        let extras = DrawExtras {
            phi: plan.phi.clone(),
            phi_noise: plan.phi_noise.clone(),
            affine_rows,
            mixup_scores,
            example_nodes: per_example,
        };
        Ok((per_example, ll, extras))
    }

    fn data_scale(&self) -> f64 {
        let s = self.settings;
        let draws = (s.mc.s_theta * s.mc.s_phi) as f64;
        let overcount = match (s.mode, s.estimator) {
            (AugmentationMode::Off, _) => 1.0,
            (_, Estimator::Naive { overcount: true }) => s.mc.k_naive as f64,
            _ => 1.0,
        };
        overcount * self.data.len() as f64 / s.nominal_batch as f64 / draws
    }

    fn run(
        &self,
        batch: &[usize],
        noise: NoiseSource,
        baseline: &mut ScoreBaseline,
        want_grad: bool,
    ) -> Result<ElboGradient> {
        self.validate(batch)?;
        let s = self.settings;
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        self.model.bind(&mut bindings);
        if s.mode == AugmentationMode::Learned {
            bindings.insert(QPHI_MEAN, Tensor::row(self.q_phi.mean.clone()));
            bindings.insert(QPHI_LOG_STD, Tensor::row(self.q_phi.log_std.clone()));
        }
        let scale = self.data_scale();
        let mut fit_terms = Vec::new();
        let mut ll_nodes = Vec::new();
        let mut extras = Vec::new();
        for rt in 0..s.mc.s_theta {
            for rp in 0..s.mc.s_phi {
                let draw = (rt * s.mc.s_phi + rp) as u64;
                let plan = self.plan(batch, noise, rt as u64, rp as u64, draw)?;
                let (per_example, ll, ex) =
                    self.build_draw(&mut g, &mut bindings, batch, &plan, draw)?;
                let total = g.sum(per_example);
                fit_terms.push(total);
                ll_nodes.push(ll);
                extras.push(ex);
            }
        }
        let mut fit = fit_terms[0];
        for &t in &fit_terms[1..] {
            fit = g.add(fit, t);
        }
        let fit = g.scale(fit, scale);
        let mut objective = fit;
        let kl_theta_node = if s.include_kl_theta {
            self.model.kl_theta_node(&mut g, s.prior_theta_std)
        } else {
            None
        };
        if let Some(k) = kl_theta_node {
            let w = g.scale(k, -s.beta_net);
            objective = g.add(objective, w);
        }
        let kl_phi_node = (s.mode == AugmentationMode::Learned).then(|| {
            let m = g.input(QPHI_MEAN, &[1, self.q_phi.dim()]);
            let ls = g.input(QPHI_LOG_STD, &[1, self.q_phi.dim()]);
            kl_node(&mut g, m, ls, &self.family.phi_prior)
        });
        if let Some(k) = kl_phi_node {
            let w = g.scale(k, -s.beta_aug);
            objective = g.add(objective, w);
        }
        g.set_output(objective);
        let eval = g.forward(&bindings)?;

        let per = s.samples_per_example();
        let mut dphi_sum = 0.0;
        for &ll in &ll_nodes {
            let v = eval.value(ll).data();
            for chunk in v.chunks(per) {
                dphi_sum += advantage_from_logliks(chunk)?;
            }
        }
        let dphi_mean = dphi_sum / (ll_nodes.len() * batch.len()) as f64;
        let data_fit = eval.value(fit).item().expect("scalar");
        let kl_theta = match kl_theta_node {
            Some(_) => self.model.kl_theta(s.prior_theta_std),
            None => 0.0,
        };
        let kl_phi = match kl_phi_node {
            Some(_) => {
                let q = DiagonalGaussian {
                    mean: self.q_phi.mean.clone(),
                    log_std: self.q_phi.log_std.clone(),
                };
                kl_diagonal_gaussians(&q, &self.family.phi_prior)?
            }
            None => 0.0,
        };
        let estimate = ElboEstimate::new(
            data_fit, kl_theta, kl_phi, s.beta_net, s.beta_aug, dphi_mean,
        );
        if !estimate.total.is_finite() {
            return Err(Error::NonFinite {
                node: objective.index(),
                op: "objective",
            });
        }

        let mut mixup_signals = Vec::new();
        for ex in &extras {
            if !ex.mixup_scores.is_empty() {
                let v = eval.value(ex.example_nodes).data().to_vec();
                mixup_signals.extend(v);
            }
        }
        if !want_grad {
            if !mixup_signals.is_empty() {
                baseline.update(mixup_signals.iter().sum::<f64>() / mixup_signals.len() as f64);
            }
            return Ok(ElboGradient {
                estimate,
                grads: ParamSet::new(),
            });
        }

        let mut names: Vec<String> = self.model.params().into_keys().collect();
        if s.mode == AugmentationMode::Learned {
            names.push(QPHI_MEAN.into());
            names.push(QPHI_LOG_STD.into());
        }
        let affine_leaves: Vec<String> = (0..extras.len())
            .filter(|k| extras[*k].affine_rows.is_some())
            .map(|k| format!("{AUG_INPUT}.{k}"))
            .collect();
        let mut wrt: Vec<&str> = names.iter().map(String::as_str).collect();
        wrt.extend(affine_leaves.iter().map(String::as_str));
        let mut grads = eval.backward(&wrt)?;

        if s.mode == AugmentationMode::Learned {
            let p = self.q_phi.dim();
            let prior_signal = baseline.value;
            for (k, ex) in extras.iter().enumerate() {
                let mut dphi = vec![0.0; p];
                if let Some((_, rows)) = &ex.affine_rows {
                    let up = grads
                        .remove(&format!("{AUG_INPUT}.{k}"))
                        .expect("requested");
                    let d = up.cols();
                    for (r, (img, omega, tx, ty, eps)) in rows.iter().enumerate() {
                        let (_, gg) = crate::augmentation::bilinear_affine_warp_vjp(
                            img,
                            *omega,
                            (*tx, *ty),
                            &up.data()[r * d..(r + 1) * d],
                        );
                        for c in 0..3 {
                            dphi[2 * c] += gg[c];
                            let ls = ex.phi[2 * c + 1];
                            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&ls) {
                                dphi[2 * c + 1] += gg[c] * ls.exp() * eps[c];
                            }
                        }
                    }
                }
                if !ex.mixup_scores.is_empty() {
                    let signal = eval.value(ex.example_nodes).data();
                    let b = prior_signal
                        .unwrap_or_else(|| signal.iter().sum::<f64>() / signal.len() as f64);
                    let ls = clamp_log_std(ex.phi[1]);
                    for &(bi, _log_alpha, eps) in &ex.mixup_scores {
                        let adv = scale * (signal[bi] - b);
                        // d/dmu and d/dlog_sigma of log N(l; mu, sigma) at l = mu + sigma * eps
                        dphi[0] += adv * eps / ls.exp();
                        if (LOG_STD_MIN..=LOG_STD_MAX).contains(&ex.phi[1]) {
                            dphi[1] += adv * (eps * eps - 1.0);
                        }
                    }
                }
                if dphi.iter().any(|v| *v != 0.0) {
                    let gm = grads.get_mut(QPHI_MEAN).expect("requested");
                    for (a, v) in gm.data_mut().iter_mut().zip(&dphi) {
                        *a += v;
                    }
                    let gs = grads.get_mut(QPHI_LOG_STD).expect("requested");
                    for (c, a) in gs.data_mut().iter_mut().enumerate() {
                        *a += dphi[c] * self.q_phi.log_std[c].exp() * ex.phi_noise[c];
                    }
                }
            }
            if !mixup_signals.is_empty() {
                baseline.update(mixup_signals.iter().sum::<f64>() / mixup_signals.len() as f64);
            }
        }
        for name in affine_leaves {
            grads.remove(&name);
        }
        Ok(ElboGradient { estimate, grads })
    }

    /// Objective value only.
    pub fn estimate(
        &self,
        batch: &[usize],
        noise: NoiseSource,
        baseline: &mut ScoreBaseline,
    ) -> Result<ElboEstimate> {
        Ok(self.run(batch, noise, baseline, false)?.estimate)
    }

    /// Objective value and gradients of the optimised surrogate.
    pub fn estimate_with_gradient(
        &self,
        batch: &[usize],
        noise: NoiseSource,
        baseline: &mut ScoreBaseline,
    ) -> Result<ElboGradient> {
        self.run(batch, noise, baseline, true)
    }
}

fn mixed_target(a: Target, b: Target, lambda: f64) -> Target {
    match (a, b) {
        (Target::Value(a), Target::Value(b)) => Target::MixedValue { a, b, lambda },
        (Target::Class(a), Target::Class(b)) => Target::MixedClass { a, b, lambda },
        (a, _) => a,
    }
}

/// One estimate of the augmented ELBO on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn augmented_elbo(
    data: &Dataset,
    batch: &[usize],
    model: &ModelState,
    q_phi: &DiagonalGaussian,
    family: &AugmentationFamily,
    settings: &ElboSettings,
    noise: NoiseSource,
) -> Result<ElboEstimate> {
    ElboProblem {
        data,
        model,
        q_phi,
        family,
        settings,
    }
    .estimate(batch, noise, &mut ScoreBaseline::default())
}
