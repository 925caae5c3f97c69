//! Joint stochastic optimisation of the network and the augmentation
//! distribution: full variational inference over the final layer, or a
//! point network with a variational augmentation distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationFamily;
use crate::data::Dataset;
use crate::distributions::{clamp_log_std, DiagonalGaussian, NoiseSource};
use crate::elbo::{
    AugmentationMode, ElboEstimate, ElboProblem, ElboSettings, Estimator, McConfig, ScoreBaseline,
    QPHI_LOG_STD, QPHI_MEAN,
};
use crate::error::{Error, Result};
use crate::model::{ModelState, NetworkSpec, ParamSet};
use crate::tensor::Tensor;

/// Initial `log_std` of `q(phi)` in every coordinate.
pub const QPHI_INIT_LOG_STD: f64 = -2.302_585_092_994_045_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_net: f64,
    pub lr_aug: f64,
    pub beta_net: f64,
    pub beta_aug: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mc: McConfig,
    pub clip_norm: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Standard deviation of the zero-mean Gaussian prior on the final layer.
    pub prior_theta_std: f64,
    pub mode: AugmentationMode,
    pub estimator: Estimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_net: 1e-4,
            lr_aug: 1e-2,
            beta_net: 0.1,
            beta_aug: 1.0,
            epochs: 10,
            batch_size: 32,
            mc: McConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            log_every: 1,
            prior_theta_std: 1.0,
            mode: AugmentationMode::Learned,
            estimator: Estimator::Marginalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero augmentation rate freezes q(phi).
        if !(self.lr_net > 0.0)
            || !(self.lr_aug >= 0.0)
            || !self.lr_aug.is_finite()
            || !self.lr_net.is_finite()
        {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and log_every must be at least 1".into(),
            ));
        }
        if !(self.beta_net >= 0.0) || !(self.beta_aug >= 0.0) || !(self.prior_theta_std > 0.0) {
            return Err(Error::InvalidArgument(
                "KL weights must be >= 0 and the prior scale positive".into(),
            ));
        }
        self.mc.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// First and second moments per parameter block.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected adaptive-moment descent step on every block of
/// `grads`; `lr` gives the rate per block name.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ParamSet,
    grads: &ParamSet,
    lr: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::UnknownSlot(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let rate = lr(name);
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= rate * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &ParamSet) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// The `(seed, epoch)` permutation of `0..n` cut into batches; the final
/// batch keeps the remainder.
pub fn minibatch_iterator(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch_size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    NoiseSource::new(seed)
        .named("epoch")
        .child(epoch)
        .stream()
        .shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: u64,
    pub total: f64,
    pub data_fit: f64,
    pub kl_theta: f64,
    pub kl_phi: f64,
    /// `(mean, sigma)` of each augmentation coordinate under the current
    /// `q(phi)` mean.
    pub phi: Vec<(f64, f64)>,
    pub dphi_mean: f64,
    /// Negative data-fit per training example.
    pub train_loss: f64,
    /// Gradient norm after clipping.
    pub grad_norm: f64,
    pub train_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub coordinates: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "step",
            "epoch",
            "total",
            "data_fit",
            "kl_theta",
            "kl_phi",
            "dphi_mean",
            "train_loss",
            "grad_norm",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for c in &self.coordinates {
            h.push(format!("{c}_mean"));
            h.push(format!("{c}_sigma"));
        }
        h.push("train_metric".into());
        h.push("test_metric".into());
        h
    }

    pub fn csv_row(row: &TraceRow) -> Vec<String> {
        let mut r = vec![row.step.to_string(), row.epoch.to_string()];
        for v in [
            row.total,
            row.data_fit,
            row.kl_theta,
            row.kl_phi,
            row.dphi_mean,
            row.train_loss,
            row.grad_norm,
        ] {
            r.push(format!("{v:e}"));
        }
        for (m, s) in &row.phi {
            r.push(format!("{m:e}"));
            r.push(format!("{s:e}"));
        }
        for m in [row.train_metric, row.test_metric] {
            r.push(m.map(|v| format!("{v:e}")).unwrap_or_default());
        }
        r
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&Self::csv_row(row).join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Variational final layer with its KL term.
    FullVi,
    /// Point network; the objective omits `KL(q(theta) || p(theta))`.
    PartialVi,
}

/// Optional callbacks invoked by the trainer.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called before each step with the step index; may rewrite `q(phi)`.
    pub variance_schedule: Option<Box<dyn FnMut(u64, &mut DiagonalGaussian) + 'a>>,
    /// Evaluated at logged steps and stored as `train_metric`.
    pub train_metric: Option<Box<dyn FnMut(&ModelState, &DiagonalGaussian) -> f64 + 'a>>,
    /// Evaluated at logged steps and stored as `test_metric`.
    pub test_metric: Option<Box<dyn FnMut(&ModelState, &DiagonalGaussian) -> f64 + 'a>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub q_phi: DiagonalGaussian,
    pub optimizer: OptimizerState,
    pub trace: TrainTrace,
}

pub struct Trainer<'a> {
    data: &'a Dataset,
    family: &'a AugmentationFamily,
    config: TrainConfig,
    variant: Variant,
    pub model: ModelState,
    pub q_phi: DiagonalGaussian,
    pub optimizer: OptimizerState,
    pub trace: TrainTrace,
    baseline: ScoreBaseline,
    hooks: TrainHooks<'a>,
}

/// Starting `q(phi)`: the family's `phi` as mean, `log_std = log 0.1`.
pub fn initial_q_phi(family: &AugmentationFamily) -> DiagonalGaussian {
    DiagonalGaussian {
        mean: family.phi.clone(),
        log_std: vec![QPHI_INIT_LOG_STD; family.phi.len()],
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a Dataset,
        spec: &NetworkSpec,
        family: &'a AugmentationFamily,
        config: TrainConfig,
        variant: Variant,
    ) -> Result<Self> {
        config.validate()?;
        let mut spec = spec.clone();
        match variant {
            Variant::FullVi if !spec.bayes_last_layer => {
                return Err(Error::InvalidArgument(
                    "full variational training needs a Bayesian final layer".into(),
                ))
            }
            Variant::PartialVi => spec.bayes_last_layer = false,
            _ => {}
        }
        let model = ModelState::init(&spec, NoiseSource::new(config.seed).named("init"))?;
        Self::from_state(data, model, initial_q_phi(family), family, config, variant)
    }

    pub fn from_state(
        data: &'a Dataset,
        model: ModelState,
        q_phi: DiagonalGaussian,
        family: &'a AugmentationFamily,
        config: TrainConfig,
        variant: Variant,
    ) -> Result<Self> {
        config.validate()?;
        if data.dim() != model.spec.input_dim {
            return Err(Error::Dimension {
                expected: model.spec.input_dim,
                got: data.dim(),
            });
        }
        let coordinates = family.summary().into_iter().map(|(n, _, _)| n).collect();
        Ok(Self {
            data,
            family,
            config,
            variant,
            model,
            q_phi,
            optimizer: OptimizerState::default(),
            trace: TrainTrace {
                coordinates,
                rows: Vec::new(),
            },
            baseline: ScoreBaseline::default(),
            hooks: TrainHooks::default(),
        })
    }

    pub fn with_hooks(mut self, hooks: TrainHooks<'a>) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn settings(&self) -> ElboSettings {
        let c = &self.config;
        ElboSettings {
            mc: c.mc,
            beta_net: c.beta_net,
            beta_aug: c.beta_aug,
            estimator: c.estimator,
            mode: c.mode,
            prior_theta_std: c.prior_theta_std,
            include_kl_theta: self.variant == Variant::FullVi,
            nominal_batch: c.batch_size.min(self.data.len()),
        }
    }

    /// Runs every configured epoch. On failure the trace keeps the rows
    /// logged so far.
    pub fn run(&mut self) -> Result<()> {
        let settings = self.settings();
        let root = NoiseSource::new(self.config.seed);
        for epoch in 0..self.config.epochs as u64 {
            let batches = minibatch_iterator(
                self.data.len(),
                self.config.batch_size,
                self.config.seed,
                epoch,
            )?;
            for (bi, batch) in batches.iter().enumerate() {
                let step = self.optimizer.step;
                if let Some(hook) = self.hooks.variance_schedule.as_mut() {
                    hook(step, &mut self.q_phi);
                }
                let noise = root.named("step").child(step);
                let problem = ElboProblem {
                    data: self.data,
                    model: &self.model,
                    q_phi: &self.q_phi,
                    family: self.family,
                    settings: &settings,
                };
                let result = problem
                    .estimate_with_gradient(batch, noise, &mut self.baseline)
                    .map_err(|e| Error::TrainingAborted {
                        step,
                        batch: bi,
                        detail: format!(
                            "{e}; q(phi) mean {:?}, log_std {:?}",
                            self.q_phi.mean, self.q_phi.log_std
                        ),
                    })?;
                let grad_norm = self
                    .apply(result.grads)
                    .map_err(|e| Error::TrainingAborted {
                        step,
                        batch: bi,
                        detail: e.to_string(),
                    })?;
                let done = self.optimizer.step;
                if done % self.config.log_every == 0 {
                    self.log(done, epoch, &result.estimate, grad_norm);
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, grads: ParamSet) -> Result<f64> {
        let settings = self.settings();
        let mut loss_grads: ParamSet = grads.into_iter().map(|(k, g)| (k, g.map(|v| -v))).collect();
        if let Some((name, _)) = loss_grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        clip_global_norm(&mut loss_grads, self.config.clip_norm);
        let post = global_norm(&loss_grads);
        let mut params = self.model.params();
        if settings.mode == AugmentationMode::Learned {
            params.insert(QPHI_MEAN.into(), Tensor::row(self.q_phi.mean.clone()));
            params.insert(QPHI_LOG_STD.into(), Tensor::row(self.q_phi.log_std.clone()));
        }
        let (lr_net, lr_aug) = (self.config.lr_net, self.config.lr_aug);
        adam_step(&mut self.optimizer, &mut params, &loss_grads, |name| {
            if name.starts_with("qphi.") {
                lr_aug
            } else {
                lr_net
            }
        })?;
        for (name, p) in params.iter_mut() {
            if name.ends_with("log_std") {
                for v in p.data_mut() {
                    *v = clamp_log_std(*v);
                }
            }
        }
        if let (Some(m), Some(s)) = (params.remove(QPHI_MEAN), params.remove(QPHI_LOG_STD)) {
            self.q_phi.mean = m.into_data();
            self.q_phi.log_std = s.into_data();
            for i in self.family.kind.log_std_slots() {
                self.q_phi.mean[i] = clamp_log_std(self.q_phi.mean[i]);
            }
        }
        self.model.load_params(&params)?;
        Ok(post)
    }

    fn log(&mut self, step: u64, epoch: u64, e: &ElboEstimate, grad_norm: f64) {
        let phi = self
            .family
            .with_phi(self.q_phi.mean.clone())
            .summary()
            .into_iter()
            .map(|(_, m, s)| (m, s))
            .collect();
        let train_metric = self
            .hooks
            .train_metric
            .as_mut()
            .map(|f| f(&self.model, &self.q_phi));
        let test_metric = self
            .hooks
            .test_metric
            .as_mut()
            .map(|f| f(&self.model, &self.q_phi));
        self.trace.rows.push(TraceRow {
            step,
            epoch,
            total: e.total,
            data_fit: e.data_fit,
            kl_theta: e.kl_theta,
            kl_phi: e.kl_phi,
            phi,
            dphi_mean: e.dphi_mean,
            train_loss: -e.data_fit / self.data.len() as f64,
            grad_norm,
            train_metric,
            test_metric,
        });
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            q_phi: self.q_phi,
            optimizer: self.optimizer,
            trace: self.trace,
        }
    }
}

/// Variational final layer and `q(phi)` trained jointly.
pub fn train_full_vi(
    data: &Dataset,
    spec: &NetworkSpec,
    family: &AugmentationFamily,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, spec, family, config.clone(), Variant::FullVi)?;
    t.run()?;
    Ok(t.into_outcome())
}

/// Point network and `q(phi)` trained jointly.
pub fn train_partial_vi(
    data: &Dataset,
    spec: &NetworkSpec,
    family: &AugmentationFamily,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, spec, family, config.clone(), Variant::PartialVi)?;
    t.run()?;
    Ok(t.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_rate_times_sign() {
        let mut st = OptimizerState::default();
        let mut p = ParamSet::from([("w".to_string(), Tensor::vector(vec![1.0, 1.0, 1.0]))]);
        let g = ParamSet::from([("w".to_string(), Tensor::vector(vec![0.5, -3.0, 1e-3]))]);
        adam_step(&mut st, &mut p, &g, |_| 0.01).unwrap();
        let w = p["w"].data();
        assert!((w[0] - 0.99).abs() < 1e-7);
        assert!((w[1] - 1.01).abs() < 1e-7);
        assert!((w[2] - 0.99).abs() < 1e-4);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut st = OptimizerState::default();
        let mut p = ParamSet::from([("w".to_string(), Tensor::vector(vec![2.0]))]);
        adam_step(
            &mut st,
            &mut p,
            &ParamSet::from([("w".to_string(), Tensor::vector(vec![1.0]))]),
            |_| 0.1,
        )
        .unwrap();
        let before = p["w"].data()[0];
        let (m0, v0) = st.moments["w"].clone();
        let mut q = p.clone();
        let mut st2 = st.clone();
        adam_step(
            &mut st2,
            &mut q,
            &ParamSet::from([("w".to_string(), Tensor::vector(vec![0.0]))]),
            |_| 0.0,
        )
        .unwrap();
        assert_eq!(q["w"].data()[0], before);
        assert!((st2.moments["w"].0.data()[0] - 0.9 * m0.data()[0]).abs() < 1e-15);
        assert!((st2.moments["w"].1.data()[0] - 0.999 * v0.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut st = OptimizerState::default();
        let mut p = ParamSet::from([("x".to_string(), Tensor::vector(vec![0.0]))]);
        for _ in 0..500 {
            let x = p["x"].data()[0];
            let g = ParamSet::from([("x".to_string(), Tensor::vector(vec![2.0 * (x - 3.0)]))]);
            adam_step(&mut st, &mut p, &g, |_| 0.1).unwrap();
        }
        assert!((p["x"].data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_names_the_block() {
        let mut st = OptimizerState::default();
        let mut p = ParamSet::from([
            ("a".to_string(), Tensor::vector(vec![0.0])),
            ("b".to_string(), Tensor::vector(vec![0.0])),
        ]);
        let g = ParamSet::from([
            ("a".to_string(), Tensor::vector(vec![1.0])),
            ("b".to_string(), Tensor::vector(vec![f64::NAN])),
        ]);
        match adam_step(&mut st, &mut p, &g, |_| 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = ParamSet::from([
            ("a".to_string(), Tensor::vector(vec![3.0, 4.0])),
            ("b".to_string(), Tensor::vector(vec![12.0])),
        ]);
        let pre = clip_global_norm(&mut g, 1.0);
        assert!((pre - 13.0).abs() < 1e-12);
        assert!(global_norm(&g) <= 1.0 + 1e-12);
    }

    #[test]
    fn minibatches_partition_each_epoch() {
        assert_eq!(minibatch_iterator(7, 10, 1, 0).unwrap().len(), 1);
        let b = minibatch_iterator(10, 3, 5, 2).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, minibatch_iterator(10, 3, 5, 2).unwrap());
        assert_ne!(b, minibatch_iterator(10, 3, 5, 3).unwrap());
        assert!(minibatch_iterator(0, 3, 5, 2).is_err());
    }
}
