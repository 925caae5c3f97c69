//! Calibration and uncertainty metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PredictionLog {
    Classification {
        probs: Vec<Vec<f64>>,
        labels: Vec<usize>,
    },
    Regression {
        mean: Vec<f64>,
        variance: Vec<f64>,
        targets: Vec<f64>,
    },
}

impl PredictionLog {
    pub fn classification(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Dimension {
                expected: probs.len(),
                got: labels.len(),
            });
        }
        for (i, (p, &y)) in probs.iter().zip(&labels).enumerate() {
            validate_simplex(p)?;
            if y >= p.len() {
                return Err(Error::InvalidArgument(format!(
                    "label {y} of example {i} out of range"
                )));
            }
        }
        Ok(Self::Classification { probs, labels })
    }

    pub fn regression(mean: Vec<f64>, variance: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if mean.len() != targets.len() || variance.len() != targets.len() {
            return Err(Error::Dimension {
                expected: targets.len(),
                got: mean.len().min(variance.len()),
            });
        }
        if variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "variances must be nonnegative".into(),
            ));
        }
        Ok(Self::Regression {
            mean,
            variance,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Classification { labels, .. } => labels.len(),
            Self::Regression { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn validate_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "probabilities must be nonnegative".into(),
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {s}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for an empty bin.
    pub confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityTable {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Right-closed deciles: `(0.1 (b-1), 0.1 b]`, with zero in the first bin.
pub fn bin_index(confidence: f64) -> usize {
    ((confidence * N_BINS as f64).ceil() as usize).clamp(1, N_BINS) - 1
}

/// Lowest index among the maxima.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn expected_calibration_error(log: &PredictionLog) -> Result<(f64, ReliabilityTable)> {
    let PredictionLog::Classification { probs, labels } = log else {
        return Err(Error::InvalidArgument(
            "calibration error needs a classification log".into(),
        ));
    };
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty prediction log".into()));
    }
    let mut count = [0usize; N_BINS];
    let mut conf = [0.0; N_BINS];
    let mut correct = [0.0; N_BINS];
    for (p, &y) in probs.iter().zip(labels) {
        let k = argmax(p);
        let b = bin_index(p[k]);
        count[b] += 1;
        conf[b] += p[k];
        if k == y {
            correct[b] += 1.0;
        }
    }
    let n = probs.len() as f64;
    let mut ece = 0.0;
    let bins = (0..N_BINS)
        .map(|b| {
            let c = count[b] as f64;
            let (confidence, accuracy) = if count[b] > 0 {
                (conf[b] / c, correct[b] / c)
            } else {
                (0.0, 0.0)
            };
            ece += c / n * (accuracy - confidence).abs();
            ReliabilityBin {
                lower: b as f64 / N_BINS as f64,
                upper: (b + 1) as f64 / N_BINS as f64,
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok((ece, ReliabilityTable { bins }))
}

/// Natural-log entropy with `0 log 0 = 0`.
pub fn predictive_entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("negative probability".into()));
    }
    Ok(-p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>())
}

/// `P(out > in) + P(out = in) / 2` over all pairs, via midranks.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::InvalidArgument(
            "auroc needs nonempty score sets".into(),
        ));
    }
    if scores_in.iter().chain(scores_out).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum_out += midrank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let n_out = scores_out.len() as f64;
    let n_in = scores_in.len() as f64;
    Ok((rank_sum_out - n_out * (n_out + 1.0) / 2.0) / (n_out * n_in))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasicMetric {
    Accuracy(f64),
    Mse(f64),
}

impl BasicMetric {
    pub fn value(self) -> f64 {
        match self {
            Self::Accuracy(v) | Self::Mse(v) => v,
        }
    }
}

pub fn basic_metrics(log: &PredictionLog) -> Result<BasicMetric> {
    if log.is_empty() {
        return Err(Error::InvalidArgument("empty prediction log".into()));
    }
    let n = log.len() as f64;
    Ok(match log {
        PredictionLog::Classification { probs, labels } => BasicMetric::Accuracy(
            probs
                .iter()
                .zip(labels)
                .filter(|(p, y)| argmax(p) == **y)
                .count() as f64
                / n,
        ),
        PredictionLog::Regression { mean, targets, .. } => BasicMetric::Mse(
            mean.iter()
                .zip(targets)
                .map(|(m, t)| (m - t).powi(2))
                .sum::<f64>()
                / n,
        ),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn entropy_summary(probs: &[Vec<f64>]) -> Result<(EntropySummary, Vec<f64>)> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    let h = probs
        .iter()
        .map(|p| predictive_entropy(p))
        .collect::<Result<Vec<_>>>()?;
    let summary = EntropySummary {
        mean: h.iter().sum::<f64>() / h.len() as f64,
        min: h.iter().copied().fold(f64::INFINITY, f64::min),
        max: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((summary, h))
}
