//! Shared oracles for the integration suites: random graphs, central
//! differences, a norm-wise relative error and the ELBO gradient check.

#![allow(dead_code)]

use optima_core::distributions::{DiagonalGaussian, NoiseSource};
use optima_core::elbo::{ElboProblem, ScoreBaseline, QPHI_LOG_STD, QPHI_MEAN};
use optima_core::gradengine::{Bindings, Graph, NodeId};
use optima_core::model::ParamSet;
use optima_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences, written independently of the library helper.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(floor)
}

pub struct RandomGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub leaves: Vec<String>,
    pub ops: Vec<&'static str>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn new_leaf(
    g: &mut Graph,
    b: &mut Bindings,
    leaves: &mut Vec<String>,
    rng: &mut ChaCha8Rng,
    shape: [usize; 2],
) -> NodeId {
    let name = format!("x{}", leaves.len());
    let id = g.input(&name, &shape);
    b.insert(
        name.clone(),
        Tensor::matrix(shape[0], shape[1], uniform(rng, shape[0] * shape[1])).unwrap(),
    );
    leaves.push(name);
    id
}

/// Random differentiable graph of depth `<= 4` over leaves of width `<= 8`
/// with inputs in `[-2, 2]`, reduced to a scalar by a random weighted sum.
/// `relu` is excluded: its kink makes central differences unreliable.
pub fn random_graph(rng: &mut ChaCha8Rng) -> RandomGraph {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let mut leaves = Vec::new();
    let mut ops = Vec::new();
    let r = rng.random_range(1..=8);
    let c = rng.random_range(1..=8);
    let mut cur = new_leaf(&mut g, &mut b, &mut leaves, rng, [r, c]);
    let depth = rng.random_range(1..=4);
    for _ in 0..depth {
        let shape = g.shape(cur).unwrap();
        let (r, c) = (shape[0], shape[1]);
        let choice = rng.random_range(0..14);
        cur = match choice {
            0 => {
                ops.push("tanh");
                g.tanh(cur)
            }
            1 => {
                ops.push("exp");
                let s = g.tanh(cur);
                g.exp(s)
            }
            2 => {
                ops.push("square");
                g.square(cur)
            }
            3 => {
                ops.push("log");
                let s = g.square(cur);
                let p = g.offset(s, 1.0);
                g.log(p)
            }
            4 => {
                ops.push("negate");
                g.neg(cur)
            }
            5 => {
                ops.push("add");
                let o = new_leaf(&mut g, &mut b, &mut leaves, rng, [r, c]);
                g.add(cur, o)
            }
            6 => {
                ops.push("subtract");
                let o = new_leaf(&mut g, &mut b, &mut leaves, rng, [r, c]);
                g.sub(o, cur)
            }
            7 => {
                ops.push("multiply");
                let o = new_leaf(&mut g, &mut b, &mut leaves, rng, [r, c]);
                g.mul(cur, o)
            }
            8 => {
                ops.push("matmul");
                let k = rng.random_range(1..=8);
                let w = new_leaf(&mut g, &mut b, &mut leaves, rng, [c, k]);
                g.matmul(cur, w)
            }
            9 => {
                ops.push("affine");
                let k = rng.random_range(1..=8);
                let w = new_leaf(&mut g, &mut b, &mut leaves, rng, [c, k]);
                let name = format!("x{}", leaves.len());
                let bias = g.input(&name, &[k]);
                b.insert(name.clone(), Tensor::vector(uniform(rng, k)));
                leaves.push(name);
                g.affine(cur, w, bias)
            }
            10 => {
                let axis = rng.random_range(0..2);
                ops.push("softmax");
                g.softmax(cur, axis)
            }
            11 => {
                let axis = rng.random_range(0..2);
                ops.push("log-sum-exp");
                g.log_sum_exp(cur, axis)
            }
            12 => {
                let axis = rng.random_range(0..2);
                if rng.random_bool(0.5) {
                    ops.push("sum");
                    g.sum_axis(cur, axis)
                } else {
                    ops.push("mean");
                    g.mean_axis(cur, axis)
                }
            }
            _ => {
                ops.push("gaussian-log-density");
                let m = new_leaf(&mut g, &mut b, &mut leaves, rng, [r, c]);
                let s = new_leaf(&mut g, &mut b, &mut leaves, rng, [r, c]);
                let ls = g.scale(s, 0.25);
                g.gaussian_log_density(cur, m, ls)
            }
        };
    }
    let shape = g.shape(cur).unwrap();
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(shape, uniform(rng, n)).unwrap());
    let weighted = g.mul(cur, w);
    let tot = if rng.random_bool(0.5) {
        ops.push("sum");
        g.sum(weighted)
    } else {
        ops.push("mean");
        g.mean(weighted)
    };
    if rng.random_bool(0.3) {
        let s = g.broadcast_scalar(tot, &[2, 3]);
        ops.push("broadcast-scalar");
        let t = g.square(s);
        let out = g.sum(t);
        g.set_output(out);
    } else {
        g.set_output(tot);
    }
    RandomGraph {
        graph: g,
        bindings: b,
        leaves,
        ops,
    }
}

/// Largest norm-wise relative error between reverse-mode and central
/// differences over all leaves of `rg`.
pub fn graph_gradient_error(rg: &RandomGraph) -> f64 {
    let names: Vec<&str> = rg.leaves.iter().map(String::as_str).collect();
    let grads = rg
        .graph
        .forward(&rg.bindings)
        .unwrap()
        .backward(&names)
        .unwrap();
    let mut worst: f64 = 0.0;
    for name in &rg.leaves {
        let base = rg.bindings.get(name).unwrap().clone();
        let mut f = |p: &[f64]| {
            let mut b = rg.bindings.clone();
            b.insert(
                name.clone(),
                Tensor::new(base.shape().to_vec(), p.to_vec()).unwrap(),
            );
            rg.graph
                .forward(&b)
                .unwrap()
                .output()
                .unwrap()
                .item()
                .unwrap()
        };
        let fd = central_diff(&mut f, base.data(), 1e-5);
        worst = worst.max(rel_err(grads[name].data(), &fd, 1e-6));
    }
    worst
}

fn flatten(p: &ParamSet) -> Vec<(String, usize)> {
    p.iter()
        .flat_map(|(k, v)| (0..v.len()).map(move |i| (k.clone(), i)))
        .collect()
}

/// Worst norm-wise relative error between the reported ELBO gradient and
/// central differences of the same Monte Carlo objective (common random
/// numbers), over every parameter block.
pub fn elbo_gradient_error(
    problem: &ElboProblem<'_>,
    batch: &[usize],
    noise: NoiseSource,
    h: f64,
) -> (f64, String) {
    let learned = problem.settings.mode == optima_core::elbo::AugmentationMode::Learned;
    let analytic = problem
        .estimate_with_gradient(batch, noise, &mut ScoreBaseline::default())
        .unwrap()
        .grads;
    let mut params = problem.model.params();
    if learned {
        params.insert(QPHI_MEAN.into(), Tensor::row(problem.q_phi.mean.clone()));
        params.insert(
            QPHI_LOG_STD.into(),
            Tensor::row(problem.q_phi.log_std.clone()),
        );
    }
    let value = |p: &ParamSet| {
        let mut model = problem.model.clone();
        model.load_params(p).unwrap();
        let q = if learned {
            DiagonalGaussian {
                mean: p[QPHI_MEAN].data().to_vec(),
                log_std: p[QPHI_LOG_STD].data().to_vec(),
            }
        } else {
            problem.q_phi.clone()
        };
        ElboProblem {
            model: &model,
            q_phi: &q,
            ..*problem
        }
        .estimate(batch, noise, &mut ScoreBaseline::default())
        .unwrap()
        .total
    };
    let mut fd: ParamSet = params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    for (name, i) in flatten(&params) {
        let mut p = params.clone();
        let x = params[&name].data()[i];
        p.get_mut(&name).unwrap().data_mut()[i] = x + h;
        let up = value(&p);
        p.get_mut(&name).unwrap().data_mut()[i] = x - h;
        let down = value(&p);
        fd.get_mut(&name).unwrap().data_mut()[i] = (up - down) / (2.0 * h);
    }
    let mut worst = (0.0, String::new());
    for (name, t) in &fd {
        let a = analytic
            .get(name)
            .unwrap_or_else(|| panic!("missing gradient for {name}"));
        let e = rel_err(a.data(), t.data(), 1e-6);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}
