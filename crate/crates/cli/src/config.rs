//! Run configuration (TOML).
//!
//! ```toml
//! name = "probit-synthetic"
//!
//! [dataset]
//! kind = "synthetic_probit"   # or csv, synthetic_linreg, synthetic_classification, toy_cubic
//! n = 500
//! d = 8
//! seed = 1
//!
//! [model]
//! kind = "probit"             # linreg, mlp_regression, mlp_classification
//!
//! [train]                     # every training field, see `TrainConfig`
//! alpha = 0.5                 # or "vb"
//! epochs = 200
//!
//! [protocol]
//! n_splits = 50
//! alphas = [1e-6, 0.5, 1.0]  # optional: several methods on the same splits
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use bbalpha::diagnostics::BiasConfig;
use bbalpha::models::{
    gen_toy_cubic_n, read_csv, synthetic_classification, synthetic_linreg, synthetic_probit, CsvSchema, Dataset,
    LikelihoodModel, Task,
};
use bbalpha::optim::{AlphaSetting, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub bias: BiasConfig,
    /// Where `train` writes its artifacts; overridable on the command line.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub n_splits: usize,
    pub train_fraction: f64,
    /// Monte-Carlo samples for test-time predictions.
    pub metrics_k: usize,
    /// Worker threads for splits; 0 uses every core.
    pub workers: usize,
    /// Methods trained on every split; defaults to `[train.alpha]`.
    pub alphas: Option<Vec<AlphaSetting>>,
    /// Persist the fitted posterior of every split.
    pub save_posteriors: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { n_splits: 50, train_fraction: 0.9, metrics_k: 100, workers: 0, alphas: None, save_posteriors: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        target: String,
        task: Task,
        #[serde(default)]
        features: Option<Vec<String>>,
    },
    SyntheticProbit {
        n: usize,
        d: usize,
        #[serde(default)]
        seed: u64,
    },
    SyntheticLinreg {
        n: usize,
        d: usize,
        sigma2: f64,
        #[serde(default)]
        seed: u64,
    },
    SyntheticClassification {
        n: usize,
        d: usize,
        n_classes: usize,
        #[serde(default)]
        seed: u64,
    },
    ToyCubic {
        #[serde(default = "default_toy_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_toy_n() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Standardize features with training-split statistics.
    #[serde(default = "yes")]
    pub standardize_features: bool,
    /// Standardize regression targets with training-split statistics.
    #[serde(default = "yes")]
    pub standardize_targets: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Probit,
    Linreg,
    MlpRegression,
    MlpClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden widths of an MLP; regression uses exactly one layer.
    pub hidden: Vec<usize>,
    /// Probit intercept.
    pub intercept: bool,
    /// Initial (or fixed) noise variance for regression, in the units the
    /// model is trained in.
    pub noise_var: f64,
    /// Variance of the factorized zero-mean prior.
    pub prior_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kind: ModelKind::Probit, hidden: vec![50], intercept: true, noise_var: 1.0, prior_var: 1.0 }
    }
}

impl RunConfig {
    /// Parse and validate a config file, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|message| CliError::Config { path: path.into(), message })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Csv { path: p, .. } = &mut cfg.dataset.source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = &self.protocol;
        if p.n_splits == 0 {
            return Err("protocol.n_splits must be positive".into());
        }
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return Err(format!("protocol.train_fraction {} not in (0, 1)", p.train_fraction));
        }
        if p.metrics_k == 0 {
            return Err("protocol.metrics_k must be positive".into());
        }
        if matches!(&p.alphas, Some(a) if a.is_empty()) {
            return Err("protocol.alphas must not be empty".into());
        }
        let m = &self.model;
        if !(m.noise_var > 0.0) || !(m.prior_var > 0.0) {
            return Err("model.noise_var and model.prior_var must be positive".into());
        }
        let task = self.task();
        let expected = match m.kind {
            ModelKind::Probit => Task::Probit,
            ModelKind::Linreg | ModelKind::MlpRegression => Task::Regression,
            ModelKind::MlpClassification => Task::Classification,
        };
        if task != expected {
            return Err(format!("model.kind {:?} does not fit a {:?} dataset", m.kind, task));
        }
        if m.kind == ModelKind::MlpRegression && m.hidden.len() != 1 {
            return Err("mlp_regression takes exactly one hidden layer".into());
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        match &self.dataset.source {
            DatasetSource::Csv { task, .. } => *task,
            DatasetSource::SyntheticProbit { .. } => Task::Probit,
            DatasetSource::SyntheticLinreg { .. } | DatasetSource::ToyCubic { .. } => Task::Regression,
            DatasetSource::SyntheticClassification { .. } => Task::Classification,
        }
    }

    /// Methods trained on each split.
    pub fn methods(&self) -> Vec<AlphaSetting> {
        self.protocol.alphas.clone().unwrap_or_else(|| vec![self.train.alpha])
    }

    /// Raw (unstandardized) data.
    pub fn load_dataset(&self) -> Result<Dataset<f64>, CliError> {
        Ok(match &self.dataset.source {
            DatasetSource::Csv { path, target, task, features } => {
                let schema = CsvSchema { target: target.clone(), task: *task, features: features.clone() };
                read_csv(path, &schema)?
            }
            DatasetSource::SyntheticProbit { n, d, seed } => synthetic_probit(*seed, *n, *d).0,
            DatasetSource::SyntheticLinreg { n, d, sigma2, seed } => synthetic_linreg(*seed, *n, *d, *sigma2).0,
            DatasetSource::SyntheticClassification { n, d, n_classes, seed } => {
                synthetic_classification(*seed, *n, *d, *n_classes)
            }
            DatasetSource::ToyCubic { n, seed } => gen_toy_cubic_n(*seed, *n),
        })
    }

    /// Likelihood for `data`; the class count comes from the labels.
    pub fn build_model(&self, data: &Dataset<f64>) -> Result<LikelihoodModel, CliError> {
        let d = data.n_features();
        let m = &self.model;
        let model = match m.kind {
            ModelKind::Probit => LikelihoodModel::probit(d, m.intercept),
            ModelKind::Linreg => LikelihoodModel::linreg(d),
            ModelKind::MlpRegression => LikelihoodModel::mlp_regression(d, m.hidden[0]),
            ModelKind::MlpClassification => {
                let classes = data.targets().iter().fold(0.0_f64, |a, &b| a.max(b)) as usize + 1;
                LikelihoodModel::mlp_classification(d, &m.hidden, classes.max(2))
            }
        };
        model.validate()?;
        Ok(model)
    }
}
