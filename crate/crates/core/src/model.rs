//! Small fully-connected networks with an optional mean-field Gaussian final
//! layer, their likelihoods, and Monte Carlo prediction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augmentation::{
    apply_transform, mix_pair, sample_gamma, AugmentationFamily, FamilyKind, Gamma,
};
use crate::distributions::{kl_diagonal_gaussians, DiagonalGaussian, NoiseSource, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::gradengine::{Bindings, Graph, NodeId};
use crate::tensor::Tensor;

/// Learnable arrays keyed by slot name.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Initial log standard deviation of a Bayesian final layer.
pub const INIT_LOG_STD: f64 = -5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    GaussianRegression { noise_std: f64 },
    Categorical { classes: usize },
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match self {
            Head::GaussianRegression { .. } => 1,
            Head::Categorical { classes } => *classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
    pub head: Head,
    pub bayes_last_layer: bool,
}

impl NetworkSpec {
    /// Two tanh layers of width 32 with a Gaussian head (`noise_std = 0.2`).
    pub fn regression_default(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![32, 32],
            activations: vec![Activation::Tanh; 2],
            head: Head::GaussianRegression { noise_std: 0.2 },
            bayes_last_layer: true,
        }
    }

    /// Two relu layers of width 32 with a categorical head.
    pub fn classification_default(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![32, 32],
            activations: vec![Activation::Relu; 2],
            head: Head::Categorical { classes },
            bayes_last_layer: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        if self.activations.len() != self.hidden.len() {
            return Err(Error::InvalidArgument(format!(
                "{} hidden layers but {} activations",
                self.hidden.len(),
                self.activations.len()
            )));
        }
        match self.head {
            Head::GaussianRegression { noise_std } if !(noise_std > 0.0) => Err(
                Error::InvalidArgument(format!("noise_std must be positive, got {noise_std}")),
            ),
            Head::Categorical { classes } if classes < 2 => Err(Error::InvalidArgument(
                "categorical head needs at least two classes".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// Fan-in of the final layer.
    pub fn last_input_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FinalLayer {
    Point(DenseLayer),
    /// Weights flattened row-major over `[in, out]`.
    Bayes {
        weight: DiagonalGaussian,
        bias: DiagonalGaussian,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: NetworkSpec,
    pub hidden: Vec<DenseLayer>,
    pub last: FinalLayer,
}

fn uniform_layer(
    fan_in: usize,
    fan_out: usize,
    stream: &mut crate::distributions::NoiseStream,
) -> DenseLayer {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| stream.uniform_range(-bound, bound))
        .collect();
    DenseLayer {
        weight: Tensor::matrix(fan_in, fan_out, w).expect("sized"),
        bias: Tensor::zeros(&[fan_out]),
    }
}

/// Graph nodes holding the weights used by one forward pass.
#[derive(Clone, Debug)]
pub struct WeightNodes {
    hidden: Vec<(NodeId, NodeId)>,
    last: (NodeId, NodeId),
}

impl ModelState {
    /// Fan-in scaled uniform weights, zero biases; a Bayesian final layer
    /// starts at those means with `log_std = -5`.
    pub fn init(spec: &NetworkSpec, noise: NoiseSource) -> Result<Self> {
        spec.validate()?;
        let mut stream = noise.stream();
        let mut fan_in = spec.input_dim;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        for &width in &spec.hidden {
            hidden.push(uniform_layer(fan_in, width, &mut stream));
            fan_in = width;
        }
        let point = uniform_layer(fan_in, spec.output_dim(), &mut stream);
        let last = if spec.bayes_last_layer {
            FinalLayer::Bayes {
                weight: DiagonalGaussian {
                    log_std: vec![INIT_LOG_STD; point.weight.len()],
                    mean: point.weight.into_data(),
                },
                bias: DiagonalGaussian {
                    log_std: vec![INIT_LOG_STD; point.bias.len()],
                    mean: point.bias.into_data(),
                },
            }
        } else {
            FinalLayer::Point(point)
        };
        Ok(Self {
            spec: spec.clone(),
            hidden,
            last,
        })
    }

    pub fn is_bayes(&self) -> bool {
        matches!(self.last, FinalLayer::Bayes { .. })
    }

    /// Length of the standard-normal vector that draws final-layer weights
    /// (weights first, then biases); zero for point layers.
    pub fn theta_noise_len(&self) -> usize {
        match &self.last {
            FinalLayer::Point(_) => 0,
            FinalLayer::Bayes { weight, bias } => weight.dim() + bias.dim(),
        }
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, l) in self.hidden.iter().enumerate() {
            p.insert(format!("hidden.{i}.w"), l.weight.clone());
            p.insert(format!("hidden.{i}.b"), l.bias.clone());
        }
        let (fin, fout) = (self.spec.last_input_dim(), self.spec.output_dim());
        match &self.last {
            FinalLayer::Point(l) => {
                p.insert("out.w".into(), l.weight.clone());
                p.insert("out.b".into(), l.bias.clone());
            }
            FinalLayer::Bayes { weight, bias } => {
                p.insert(
                    "out.w.mean".into(),
                    Tensor::matrix(fin, fout, weight.mean.clone()).expect("sized"),
                );
                p.insert(
                    "out.w.log_std".into(),
                    Tensor::matrix(fin, fout, weight.log_std.clone()).expect("sized"),
                );
                p.insert("out.b.mean".into(), Tensor::vector(bias.mean.clone()));
                p.insert("out.b.log_std".into(), Tensor::vector(bias.log_std.clone()));
            }
        }
        p
    }

    /// Copies values for every slot this model owns from `params`.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        let get = |name: &str| {
            params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::MissingBinding(name.to_string()))
        };
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.weight = get(&format!("hidden.{i}.w"))?;
            l.bias = get(&format!("hidden.{i}.b"))?;
        }
        match &mut self.last {
            FinalLayer::Point(l) => {
                l.weight = get("out.w")?;
                l.bias = get("out.b")?;
            }
            FinalLayer::Bayes { weight, bias } => {
                weight.mean = get("out.w.mean")?.into_data();
                weight.log_std = get("out.w.log_std")?.into_data();
                bias.mean = get("out.b.mean")?.into_data();
                bias.log_std = get("out.b.log_std")?.into_data();
            }
        }
        Ok(())
    }

    /// Point model at the posterior mean of the final layer.
    pub fn mean_model(&self) -> ModelState {
        let mut out = self.clone();
        if let FinalLayer::Bayes { weight, bias } = &self.last {
            let (fin, fout) = (self.spec.last_input_dim(), self.spec.output_dim());
            out.last = FinalLayer::Point(DenseLayer {
                weight: Tensor::matrix(fin, fout, weight.mean.clone()).expect("sized"),
                bias: Tensor::vector(bias.mean.clone()),
            });
            out.spec.bayes_last_layer = false;
        }
        out
    }

    /// `KL(q(theta) || N(0, prior_std^2 I))` over the final layer; zero for a
    /// point layer.
    pub fn kl_theta(&self, prior_std: f64) -> f64 {
        match &self.last {
            FinalLayer::Point(_) => 0.0,
            FinalLayer::Bayes { weight, bias } => {
                let pw = DiagonalGaussian::isotropic(vec![0.0; weight.dim()], prior_std);
                let pb = DiagonalGaussian::isotropic(vec![0.0; bias.dim()], prior_std);
                kl_diagonal_gaussians(weight, &pw).expect("same dim")
                    + kl_diagonal_gaussians(bias, &pb).expect("same dim")
            }
        }
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        for (k, v) in self.params() {
            bindings.insert(k, v);
        }
    }

    /// Declares this model's leaves and builds the final-layer weights for one
    /// draw `theta_noise` (ignored for point layers).
    pub fn weight_nodes(&self, g: &mut Graph, theta_noise: Option<&[f64]>) -> Result<WeightNodes> {
        let mut fan_in = self.spec.input_dim;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (i, &width) in self.spec.hidden.iter().enumerate() {
            let w = g.input(&format!("hidden.{i}.w"), &[fan_in, width]);
            let b = g.input(&format!("hidden.{i}.b"), &[width]);
            hidden.push((w, b));
            fan_in = width;
        }
        let fout = self.spec.output_dim();
        let last = match &self.last {
            FinalLayer::Point(_) => {
                if theta_noise.is_some_and(|n| !n.is_empty()) {
                    return Err(Error::InvalidArgument(
                        "point final layer takes no theta noise".into(),
                    ));
                }
                (g.input("out.w", &[fan_in, fout]), g.input("out.b", &[fout]))
            }
            FinalLayer::Bayes { .. } => {
                let noise = theta_noise.ok_or_else(|| {
                    Error::InvalidArgument("Bayesian final layer needs theta noise".into())
                })?;
                let nw = fan_in * fout;
                if noise.len() != nw + fout {
                    return Err(Error::Dimension {
                        expected: nw + fout,
                        got: noise.len(),
                    });
                }
                let wm = g.input("out.w.mean", &[fan_in, fout]);
                let ws = g.input("out.w.log_std", &[fan_in, fout]);
                let bm = g.input("out.b.mean", &[fout]);
                let bs = g.input("out.b.log_std", &[fout]);
                let w = crate::distributions::reparameterize_node(
                    g,
                    wm,
                    ws,
                    Tensor::matrix(fan_in, fout, noise[..nw].to_vec())?,
                );
                let b = crate::distributions::reparameterize_node(
                    g,
                    bm,
                    bs,
                    Tensor::vector(noise[nw..].to_vec()),
                );
                (w, b)
            }
        };
        Ok(WeightNodes { hidden, last })
    }

    /// Network output (`[n, out]`) for inputs `x: [n, input_dim]`.
    pub fn forward_nodes(&self, g: &mut Graph, weights: &WeightNodes, x: NodeId) -> NodeId {
        let mut h = x;
        for ((w, b), act) in weights.hidden.iter().zip(&self.spec.activations) {
            let z = g.affine(h, *w, *b);
            h = match act {
                Activation::Tanh => g.tanh(z),
                Activation::Relu => g.relu(z),
            };
        }
        g.affine(h, weights.last.0, weights.last.1)
    }

    /// Graph node for the KL of the final layer against `N(0, prior_std^2)`.
    pub fn kl_theta_node(&self, g: &mut Graph, prior_std: f64) -> Option<NodeId> {
        let FinalLayer::Bayes { weight, bias } = &self.last else {
            return None;
        };
        let (fin, fout) = (self.spec.last_input_dim(), self.spec.output_dim());
        let wm = g.input("out.w.mean", &[fin, fout]);
        let ws = g.input("out.w.log_std", &[fin, fout]);
        let bm = g.input("out.b.mean", &[fout]);
        let bs = g.input("out.b.log_std", &[fout]);
        let pw = DiagonalGaussian::isotropic(vec![0.0; weight.dim()], prior_std);
        let pb = DiagonalGaussian::isotropic(vec![0.0; bias.dim()], prior_std);
        let kw = crate::distributions::kl_node(g, wm, ws, &pw);
        let kb = crate::distributions::kl_node(g, bm, bs, &pb);
        Some(g.add(kw, kb))
    }
}

/// Network output for one final-layer draw.
pub fn forward(state: &ModelState, theta_noise: Option<&[f64]>, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != state.spec.input_dim {
        return Err(Error::Shape(format!(
            "inputs {:?} do not match input_dim {}",
            x.shape(),
            state.spec.input_dim
        )));
    }
    let mut g = Graph::new();
    let weights = state.weight_nodes(&mut g, theta_noise)?;
    let xin = g.constant(x.clone());
    let out = state.forward_nodes(&mut g, &weights, xin);
    g.set_output(out);
    let mut b = Bindings::new();
    state.bind(&mut b);
    crate::gradengine::evaluate(&g, &b)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Value(f64),
    Class(usize),
    /// `lambda * log p(a) + (1 - lambda) * log p(b)`.
    MixedValue {
        a: f64,
        b: f64,
        lambda: f64,
    },
    MixedClass {
        a: usize,
        b: usize,
        lambda: f64,
    },
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::gradengine::log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

/// Log-likelihood of one example's target given its network output.
pub fn log_likelihood(head: &Head, output: &[f64], y: &Target) -> Result<f64> {
    match (head, y) {
        (Head::GaussianRegression { noise_std }, Target::Value(v)) => {
            Ok(gaussian_ll(output, *v, *noise_std))
        }
        (Head::GaussianRegression { noise_std }, Target::MixedValue { a, b, lambda }) => Ok(lambda
            * gaussian_ll(output, *a, *noise_std)
            + (1.0 - lambda) * gaussian_ll(output, *b, *noise_std)),
        (Head::Categorical { classes }, Target::Class(c)) => {
            check_class(*c, *classes, output)?;
            Ok(log_softmax(output)[*c])
        }
        (Head::Categorical { classes }, Target::MixedClass { a, b, lambda }) => {
            check_class(*a, *classes, output)?;
            check_class(*b, *classes, output)?;
            let lp = log_softmax(output);
            if *lambda == 1.0 {
                return Ok(lp[*a]);
            }
            Ok(lambda * lp[*a] + (1.0 - lambda) * lp[*b])
        }
        _ => Err(Error::InvalidArgument(
            "target kind does not match head".into(),
        )),
    }
}

fn check_class(c: usize, classes: usize, output: &[f64]) -> Result<()> {
    if c >= classes || output.len() != classes {
        return Err(Error::InvalidArgument(format!(
            "class {c} invalid for {classes} classes"
        )));
    }
    Ok(())
}

fn gaussian_ll(output: &[f64], y: f64, noise_std: f64) -> f64 {
    output
        .iter()
        .map(|m| {
            let z = (y - m) / noise_std;
            -HALF_LN_2PI - noise_std.ln() - 0.5 * z * z
        })
        .sum()
}

/// Per-example log-likelihood column `[n, 1]` for network output `out: [n, k]`.
pub fn log_likelihood_node(
    g: &mut Graph,
    head: &Head,
    out: NodeId,
    targets: &[Target],
) -> Result<NodeId> {
    let n = targets.len();
    match head {
        Head::GaussianRegression { noise_std } => {
            let ls = g.constant(Tensor::full(&[n, 1], noise_std.ln()));
            let mut a = Vec::with_capacity(n);
            let mut b = Vec::with_capacity(n);
            let mut lam = Vec::with_capacity(n);
            let mut mixed = false;
            for t in targets {
                match t {
                    Target::Value(v) => {
                        a.push(*v);
                        b.push(*v);
                        lam.push(1.0);
                    }
                    Target::MixedValue {
                        a: ya,
                        b: yb,
                        lambda,
                    } => {
                        a.push(*ya);
                        b.push(*yb);
                        lam.push(*lambda);
                        mixed = true;
                    }
                    _ => {
                        return Err(Error::InvalidArgument(
                            "class target for a regression head".into(),
                        ))
                    }
                }
            }
            let ya = g.constant(Tensor::column(a));
            let la = g.gaussian_log_density(ya, out, ls);
            if !mixed {
                return Ok(la);
            }
            let yb = g.constant(Tensor::column(b));
            let lb = g.gaussian_log_density(yb, out, ls);
            let wa = g.constant(Tensor::column(lam.clone()));
            let wb = g.constant(Tensor::column(lam.iter().map(|l| 1.0 - l).collect()));
            let ta = g.mul(la, wa);
            let tb = g.mul(lb, wb);
            Ok(g.add(ta, tb))
        }
        Head::Categorical { classes } => {
            let c = *classes;
            let mut soft = vec![0.0; n * c];
            for (i, t) in targets.iter().enumerate() {
                match t {
                    Target::Class(k) if *k < c => soft[i * c + k] = 1.0,
                    Target::MixedClass { a, b, lambda } if *a < c && *b < c => {
                        soft[i * c + a] += lambda;
                        soft[i * c + b] += 1.0 - lambda;
                    }
                    Target::Class(k) => {
                        return Err(Error::InvalidArgument(format!(
                            "class {k} invalid for {c} classes"
                        )))
                    }
                    _ => return Err(Error::InvalidArgument("invalid categorical target".into())),
                }
            }
            let lse = g.log_sum_exp(out, 1);
            let ones = g.constant(Tensor::full(&[1, c], 1.0));
            let lse_b = g.matmul(lse, ones);
            let logp = g.sub(out, lse_b);
            let weights = g.constant(Tensor::matrix(n, c, soft)?);
            let picked = g.mul(logp, weights);
            Ok(g.sum_axis(picked, 1))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Mean class probabilities per example.
    Classes(Vec<Vec<f64>>),
    /// Monte Carlo mean and variance of the predicted mean per example, plus
    /// the fixed observation noise variance.
    Values {
        mean: Vec<f64>,
        variance: Vec<f64>,
        noise_var: f64,
    },
}

/// Augmentation applied to inputs at prediction time.
#[derive(Clone, Copy, Debug)]
pub struct TestTimeAugmentation<'a> {
    pub family: &'a AugmentationFamily,
    pub q_phi: Option<&'a DiagonalGaussian>,
}

/// Averages `n_samples` forward passes with independent final-layer draws
/// (and augmentation draws when `augment` is given).
pub fn predict(
    state: &ModelState,
    x: &Tensor,
    n_samples: usize,
    augment: Option<TestTimeAugmentation<'_>>,
    noise: NoiseSource,
) -> Result<Prediction> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "n_samples must be at least 1".into(),
        ));
    }
    let n = x.rows();
    let k = state.spec.output_dim();
    let mut sum = vec![0.0; n * k];
    let mut sum_sq = vec![0.0; n * k];
    for s in 0..n_samples {
        let sample_noise = noise.child(s as u64);
        let theta = state.is_bayes().then(|| {
            sample_noise
                .named("theta")
                .stream()
                .normal_vec(state.theta_noise_len())
        });
        let inputs = match augment {
            Some(aug) => augmented_inputs(x, aug, sample_noise)?,
            None => x.clone(),
        };
        let out = forward(state, theta.as_deref(), &inputs)?;
        match state.spec.head {
            Head::Categorical { .. } => {
                for (i, row) in out.data().chunks(k).enumerate() {
                    let lp = log_softmax(row);
                    for (j, v) in lp.into_iter().enumerate() {
                        sum[i * k + j] += v.exp();
                    }
                }
            }
            Head::GaussianRegression { .. } => {
                for (i, v) in out.data().iter().enumerate() {
                    sum[i] += v;
                    sum_sq[i] += v * v;
                }
            }
        }
    }
    let m = n_samples as f64;
    match state.spec.head {
        Head::Categorical { .. } => Ok(Prediction::Classes(
            sum.chunks(k)
                .map(|row| row.iter().map(|v| v / m).collect())
                .collect(),
        )),
        Head::GaussianRegression { noise_std } => {
            let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
            let variance = sum_sq
                .iter()
                .zip(&mean)
                .map(|(sq, mu)| (sq / m - mu * mu).max(0.0))
                .collect();
            Ok(Prediction::Values {
                mean,
                variance,
                noise_var: noise_std * noise_std,
            })
        }
    }
}

fn augmented_inputs(
    x: &Tensor,
    aug: TestTimeAugmentation<'_>,
    noise: NoiseSource,
) -> Result<Tensor> {
    let family = match aug.q_phi {
        Some(q) => aug
            .family
            .with_phi(q.sample(&mut noise.named("phi").stream())),
        None => aug.family.clone(),
    };
    if family.kind == FamilyKind::MixupBeta {
        // Mixing needs labels; predictions use clean inputs.
        return Ok(x.clone());
    }
    let d = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for (i, row) in x.data().chunks(d).enumerate() {
        let s = sample_gamma(&family, noise.named("gamma").child(i as u64))?;
        data.extend(apply_transform(&family, &s, row)?);
    }
    Tensor::matrix(x.rows(), d, data)
}

/// Applies mixup to a pair, for callers building mixed batches.
pub fn mixup_input(gamma: &Gamma, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    match gamma {
        Gamma::Mixup { lambda, .. } => mix_pair(*lambda, a, b),
        _ => Err(Error::InvalidArgument("not a mixup sample".into())),
    }
}
