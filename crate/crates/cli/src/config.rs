//! Run configuration: parsing, defaults and resolution into core types.

use std::path::{Path, PathBuf};

use optima_core::augmentation::{AugmentationFamily, DiscreteTransform};
use optima_core::data::{
    gen_glyph_classification, gen_synthetic_regression, read_csv, Corruption, Dataset, Task,
};
use optima_core::elbo::{AugmentationMode, Estimator};
use optima_core::model::NetworkSpec;
use optima_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation and every training arm; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    /// Defaults to the task's standard network when absent.
    #[serde(default)]
    pub model: Option<NetworkSpec>,
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    SyntheticRegression {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    Glyphs {
        #[serde(default = "default_glyph_train")]
        n_train: usize,
        #[serde(default = "default_glyph_test")]
        n_test: usize,
        #[serde(default = "default_glyph_size")]
        size: usize,
        #[serde(default = "default_glyph_classes")]
        classes: usize,
        #[serde(default = "default_pose_jitter")]
        pose_jitter: f64,
    },
    /// CSV files as written by `gen-data`; relative paths resolve against
    /// the config file's directory.
    Files { train: PathBuf, test: PathBuf },
}

fn default_n_train() -> usize {
    50
}
fn default_n_test() -> usize {
    1000
}
fn default_glyph_train() -> usize {
    400
}
fn default_glyph_test() -> usize {
    400
}
fn default_glyph_size() -> usize {
    16
}
fn default_glyph_classes() -> usize {
    4
}
fn default_pose_jitter() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentationConfig {
    AdditiveShift {
        #[serde(default = "default_sigma")]
        init_sigma: f64,
        #[serde(default = "default_prior_sigma")]
        prior_sigma: f64,
        /// Prior standard deviations of the `(mean, log sigma)` coordinates.
        #[serde(default = "default_shift_spread")]
        prior_spread: (f64, f64),
    },
    AffineImage {
        #[serde(default = "default_sigma")]
        init_sigma: f64,
        #[serde(default = "default_affine_spread")]
        prior_spread: f64,
    },
    Categorical {
        transforms: Vec<DiscreteTransform>,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    Mixup {
        #[serde(default = "default_alpha")]
        init_alpha: f64,
        #[serde(default = "default_affine_spread")]
        prior_spread: f64,
    },
}

fn default_sigma() -> f64 {
    0.1
}
fn default_prior_sigma() -> f64 {
    0.2
}
fn default_shift_spread() -> (f64, f64) {
    (0.2, 0.1)
}
fn default_affine_spread() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_mc_samples: usize,
    /// Average predictions over draws from the learned augmentation.
    pub marginalize_aug: bool,
    pub split: Split,
    /// Shift used for the out-of-distribution AUROC; defaults by task.
    pub ood: Option<OodConfig>,
    pub pac_bayes_delta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_mc_samples: 100,
            marginalize_aug: false,
            split: Split::Test,
            ood: None,
            pac_bayes_delta: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub corruption: Corruption,
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Baseline {
    NoAug,
    /// The family frozen at its configured `phi`, optionally with every
    /// Gaussian scale replaced by `sigma`.
    FixedAug {
        #[serde(default)]
        sigma: Option<f64>,
    },
    /// `k` replicas per example under the mean-of-logs objective; with
    /// `overcount` each replica counts as a separate observation.
    NaiveAug {
        k: usize,
        #[serde(default = "default_true")]
        overcount: bool,
    },
}

fn default_true() -> bool {
    true
}

/// One trained configuration within a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub id: String,
    pub name: String,
    pub family: AugmentationFamily,
    pub train: TrainConfig,
}

pub fn parse_config(text: &str, origin: &str) -> CliResult<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{origin}: at `{path}`: {}", e.into_inner()))
    })
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = parse_config(&text, &path.display().to_string())?;
    if let DataConfig::Files { train, test } = &mut config.data {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [train, test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(config)
}

impl RunConfig {
    /// Applies the seed override and fills every default, so the result
    /// re-runs bit-identically on its own.
    pub fn resolve(mut self, seed: Option<u64>) -> CliResult<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if self.eval.n_mc_samples == 0 {
            return Err(CliError::Config(
                "at `eval.n_mc_samples`: must be at least 1".into(),
            ));
        }
        if !(self.eval.pac_bayes_delta > 0.0 && self.eval.pac_bayes_delta < 1.0) {
            return Err(CliError::Config(
                "at `eval.pac_bayes_delta`: must lie in (0, 1)".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("at `train`: {e}")))?;
        for (i, b) in self.baselines.iter().enumerate() {
            match b {
                Baseline::NaiveAug { k: 0, .. } => {
                    return Err(CliError::Config(format!(
                        "at `baselines[{i}].k`: must be at least 1"
                    )))
                }
                Baseline::FixedAug { sigma: Some(s) } if !(*s > 0.0) => {
                    return Err(CliError::Config(format!(
                        "at `baselines[{i}].sigma`: must be positive"
                    )))
                }
                _ => {}
            }
        }
        Ok(self)
    }

    pub fn load_data(&self) -> CliResult<(Dataset, Dataset)> {
        let cfg = |e: optima_core::Error| CliError::Config(format!("at `data`: {e}"));
        match &self.data {
            DataConfig::SyntheticRegression { n_train, n_test } => {
                gen_synthetic_regression(*n_train, *n_test, self.seed).map_err(cfg)
            }
            DataConfig::Glyphs {
                n_train,
                n_test,
                size,
                classes,
                pose_jitter,
            } => {
                if *n_train == 0 || *n_test == 0 {
                    return Err(CliError::Config(
                        "at `data`: counts must be at least 1".into(),
                    ));
                }
                let all = gen_glyph_classification(
                    n_train + n_test,
                    *size,
                    *classes,
                    *pose_jitter,
                    self.seed,
                )
                .map_err(cfg)?;
                let train: Vec<usize> = (0..*n_train).collect();
                let test: Vec<usize> = (*n_train..n_train + n_test).collect();
                Ok((all.subset(&train)?, all.subset(&test)?))
            }
            DataConfig::Files { train, test } => {
                let a = read_csv(train).map_err(cfg)?;
                let b = read_csv(test).map_err(cfg)?;
                if a.task != b.task || a.shape != b.shape {
                    return Err(CliError::Config(format!(
                        "at `data`: {} and {} hold different tasks or shapes",
                        train.display(),
                        test.display()
                    )));
                }
                Ok((a, b))
            }
        }
    }

    pub fn network(&self, data: &Dataset) -> CliResult<NetworkSpec> {
        let spec = match (&self.model, data.task) {
            (Some(s), _) => s.clone(),
            (None, Task::Regression) => NetworkSpec::regression_default(data.dim()),
            (None, Task::Classification { classes }) => {
                NetworkSpec::classification_default(data.dim(), classes)
            }
        };
        spec.validate()
            .map_err(|e| CliError::Config(format!("at `model`: {e}")))?;
        if spec.input_dim != data.dim() || spec.output_dim() != data.task_output_dim() {
            return Err(CliError::Config(format!(
                "at `model`: network maps {} -> {} but the data is {} with input width {}",
                spec.input_dim,
                spec.output_dim(),
                data.task,
                data.dim()
            )));
        }
        Ok(spec)
    }

    pub fn family(&self, data: &Dataset) -> CliResult<AugmentationFamily> {
        let (h, w) = match data.shape.as_slice() {
            [h, w] => (*h, *w),
            _ => (1, data.dim()),
        };
        let family = match &self.augmentation {
            AugmentationConfig::AdditiveShift {
                init_sigma,
                prior_sigma,
                prior_spread,
            } => AugmentationFamily::additive_shift(
                data.dim(),
                *init_sigma,
                *prior_sigma,
                *prior_spread,
            ),
            AugmentationConfig::AffineImage {
                init_sigma,
                prior_spread,
            } => {
                if data.shape.len() != 2 {
                    return Err(CliError::Config(
                        "at `augmentation`: affine-image needs raster data".into(),
                    ));
                }
                AugmentationFamily::affine_image(h, w, *init_sigma, *prior_spread)
            }
            AugmentationConfig::Categorical {
                transforms,
                temperature,
            } => AugmentationFamily::categorical(transforms.clone(), *temperature, h, w)
                .map_err(|e| CliError::Config(format!("at `augmentation`: {e}")))?,
            AugmentationConfig::Mixup {
                init_alpha,
                prior_spread,
            } => AugmentationFamily::mixup(*init_alpha, *prior_spread),
        };
        family
            .sanitized_phi()
            .map_err(|e| CliError::Config(format!("at `augmentation`: {e}")))?;
        Ok(family)
    }

    /// Baselines in configured order, then the learned arm.
    pub fn arms(&self, family: &AugmentationFamily) -> Vec<Arm> {
        let mut arms = Vec::new();
        for b in &self.baselines {
            let mut train = self.train.clone();
            let mut fam = family.clone();
            let (id, name) = match b {
                Baseline::NoAug => {
                    train.mode = AugmentationMode::Off;
                    ("no-aug".to_string(), "No Aug".to_string())
                }
                Baseline::FixedAug { sigma } => {
                    train.mode = AugmentationMode::Fixed;
                    train.lr_aug = 0.0;
                    if let Some(s) = sigma {
                        for i in fam.kind.log_std_slots() {
                            fam.phi[i] = s.ln();
                        }
                    }
                    ("fixed-aug".to_string(), "Fixed Aug".to_string())
                }
                Baseline::NaiveAug { k, overcount } => {
                    train.mode = AugmentationMode::Fixed;
                    train.lr_aug = 0.0;
                    train.estimator = Estimator::Naive {
                        overcount: *overcount,
                    };
                    train.mc.k_naive = *k;
                    (format!("naive-aug-k{k}"), format!("Naive Aug (K={k})"))
                }
            };
            arms.push(Arm {
                id,
                name,
                family: fam,
                train,
            });
        }
        let mut train = self.train.clone();
        train.mode = AugmentationMode::Learned;
        arms.push(Arm {
            id: "optima".into(),
            name: "OPTIMA".into(),
            family: family.clone(),
            train,
        });
        arms
    }

    pub fn ood(&self, task: Task) -> OodConfig {
        self.eval.ood.unwrap_or(match task {
            Task::Regression => OodConfig {
                corruption: Corruption::MeanShift,
                severity: 3.0,
            },
            Task::Classification { .. } => OodConfig {
                corruption: Corruption::GaussianNoise,
                severity: 0.5,
            },
        })
    }
}

pub fn variant(spec: &NetworkSpec) -> Variant {
    if spec.bayes_last_layer {
        Variant::FullVi
    } else {
        Variant::PartialVi
    }
}

trait TaskWidth {
    fn task_output_dim(&self) -> usize;
}

impl TaskWidth for Dataset {
    fn task_output_dim(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification { classes } => classes,
        }
    }
}
