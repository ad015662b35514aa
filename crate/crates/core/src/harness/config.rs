//! Run configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, which is
//! how command-line overrides are layered on top of a file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::optimizers::{OptimizerConfig, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    /// Directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
    /// `a theta^2 / 2` with `points` virtual examples for batch scheduling.
    Parabola { a: f64, theta0: f64, points: usize },
    /// Gaussian clusters; the test split is drawn from the same centers.
    Blobs {
        n: usize,
        test_n: usize,
        width: usize,
        classes: usize,
        spread: f64,
        data_seed: u64,
    },
}

impl DatasetSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetSpec::Mnist { .. } => "mnist",
            DatasetSpec::Parabola { .. } => "parabola",
            DatasetSpec::Blobs { .. } => "blobs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
    /// Softmax regression.
    M0,
    /// Two ReLU hidden layers.
    M2 { hidden: (usize, usize) },
    Parabola1d,
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::M0 => "m0",
            Model::M2 { .. } => "m2",
            Model::Parabola1d => "parabola1d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: Model,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Train on the first `n` training examples only.
    pub train_limit: Option<usize>,
    /// Also evaluate the full training set after each epoch.
    pub eval_train: bool,
    /// Examples per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Mnist {
                dir: PathBuf::from("data/mnist"),
            },
            model: Model::M0,
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            seed: 0,
            out: None,
            train_limit: None,
            eval_train: true,
            eval_chunk: 2000,
        }
    }
}

/// The keys [`RunConfig::set`] accepts.
pub const KEYS: &[&str] = &[
    "dataset",
    "mnist_dir",
    "model",
    "hidden",
    "optimizer",
    "eta0",
    "alpha",
    "gain",
    "rho",
    "gamma",
    "beta1",
    "beta2",
    "eps",
    "ph_lambda",
    "ph_delta",
    "ph_warmup",
    "layerwise",
    "paramwise_per_layer",
    "epochs",
    "seed",
    "out",
    "train_limit",
    "eval_train",
    "eval_chunk",
    "parabola_a",
    "parabola_theta0",
    "parabola_points",
    "blobs_n",
    "blobs_test",
    "blobs_width",
    "blobs_classes",
    "blobs_spread",
    "blobs_seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    match value.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => parse(key, value),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

/// Splits `key = value` lines, skipping blanks and comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one assignment. Switching `dataset` resets its parameters to
    /// defaults, so put it before the dataset-specific keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let o = &mut self.optimizer;
        match key {
            "dataset" => {
                self.dataset = match value.to_ascii_lowercase().as_str() {
                    "mnist" => DatasetSpec::Mnist {
                        dir: PathBuf::from("data/mnist"),
                    },
                    "parabola" => DatasetSpec::Parabola {
                        a: 1.0,
                        theta0: 1.0,
                        points: 1,
                    },
                    "blobs" => DatasetSpec::Blobs {
                        n: 1000,
                        test_n: 500,
                        width: 20,
                        classes: 10,
                        spread: 1.0,
                        data_seed: 0,
                    },
                    _ => return Err(Error::Config(format!("unknown dataset `{value}`"))),
                };
            }
            "mnist_dir" => match &mut self.dataset {
                DatasetSpec::Mnist { dir } => *dir = PathBuf::from(value),
                _ => return Err(Error::Config("`mnist_dir` needs dataset = mnist".into())),
            },
            "model" => {
                self.model = match value.to_ascii_lowercase().as_str() {
                    "m0" => Model::M0,
                    "m2" => Model::M2 { hidden: (500, 300) },
                    "parabola1d" | "parabola" => Model::Parabola1d,
                    _ => return Err(Error::Config(format!("unknown model `{value}`"))),
                };
            }
            "hidden" => {
                let widths: Vec<usize> = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?;
                match (&mut self.model, widths.as_slice()) {
                    (Model::M2 { hidden }, &[a, b]) => *hidden = (a, b),
                    _ => return Err(Error::Config("`hidden` takes two widths and needs model = m2".into())),
                }
            }
            "optimizer" => o.variant = value.parse::<Variant>()?,
            "eta0" => o.eta0 = parse_f64(key, value)?,
            "alpha" => o.alpha = parse_f64(key, value)?,
            "gain" => o.gain = parse_f64(key, value)?,
            "rho" => o.rho = parse_f64(key, value)?,
            "gamma" => o.gamma = parse_f64(key, value)?,
            "beta1" => o.beta1 = parse_f64(key, value)?,
            "beta2" => o.beta2 = parse_f64(key, value)?,
            "eps" => o.eps = parse_f64(key, value)?,
            "ph_lambda" => o.ph_lambda = parse_f64(key, value)?,
            "ph_delta" => {
                o.ph_delta = match value.to_ascii_lowercase().as_str() {
                    "" | "auto" | "none" => None,
                    _ => Some(parse_f64(key, value)?),
                }
            }
            "ph_warmup" => o.ph_warmup_batches = parse(key, value)?,
            "layerwise" => o.layerwise = parse_bool(key, value)?,
            "paramwise_per_layer" => o.paramwise_per_layer = parse_bool(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "train_limit" => self.train_limit = Some(parse(key, value)?),
            "eval_train" => self.eval_train = parse_bool(key, value)?,
            "eval_chunk" => self.eval_chunk = parse(key, value)?,
            _ => return self.set_dataset_field(key, value),
        }
        Ok(())
    }

    fn set_dataset_field(&mut self, key: &str, value: &str) -> Result<()> {
        match (&mut self.dataset, key) {
            (DatasetSpec::Parabola { a, .. }, "parabola_a") => *a = parse_f64(key, value)?,
            (DatasetSpec::Parabola { theta0, .. }, "parabola_theta0") => *theta0 = parse_f64(key, value)?,
            (DatasetSpec::Parabola { points, .. }, "parabola_points") => *points = parse(key, value)?,
            (DatasetSpec::Blobs { n, .. }, "blobs_n") => *n = parse(key, value)?,
            (DatasetSpec::Blobs { test_n, .. }, "blobs_test") => *test_n = parse(key, value)?,
            (DatasetSpec::Blobs { width, .. }, "blobs_width") => *width = parse(key, value)?,
            (DatasetSpec::Blobs { classes, .. }, "blobs_classes") => *classes = parse(key, value)?,
            (DatasetSpec::Blobs { spread, .. }, "blobs_spread") => *spread = parse_f64(key, value)?,
            (DatasetSpec::Blobs { data_seed, .. }, "blobs_seed") => *data_seed = parse(key, value)?,
            (_, k) if KEYS.contains(&k) => {
                return Err(Error::Config(format!(
                    "`{k}` does not apply to dataset `{}`",
                    self.dataset.kind()
                )))
            }
            (_, k) => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_chunk == 0 {
            return Err(Error::Config("eval_chunk must be at least 1".into()));
        }
        let parabola_data = matches!(self.dataset, DatasetSpec::Parabola { .. });
        if parabola_data != (self.model == Model::Parabola1d) {
            return Err(Error::Config("model parabola1d goes with dataset parabola and only with it".into()));
        }
        if let DatasetSpec::Mnist { dir } = &self.dataset {
            if !dir.is_dir() {
                return Err(Error::Config(format!("MNIST directory {} does not exist", dir.display())));
            }
        }
        self.optimizer.validate()
    }

    /// Short identifier of the hyperparameters (seed excluded).
    pub fn label(&self) -> String {
        let o = &self.optimizer;
        let mut s = format!("{}-{}-{}-eta{}", self.dataset.kind(), self.model.name(), o.variant, o.eta0);
        if matches!(o.variant, Variant::Alera | Variant::Salera | Variant::Spalera | Variant::AgAdam) {
            s.push_str(&format!("-a{}-c{}", o.alpha, o.gain));
        }
        s.push_str(&format!("-rho{}", o.rho));
        s
    }
}
