//! The training loop and its metric files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, Model, RunConfig};
use crate::data::{load_mnist_dir, make_blobs, minibatch_schedule, standardize, Dataset, Parabola};
use crate::nn::{evaluate, Architecture, ClassifierObjective};
use crate::optimizers::Optimizer;
use crate::vecmath::{FlatVector, RngStream};
use crate::{Error, Objective, Result};

/// Runs above this final test error count as failed.
pub const FAILURE_ERROR: f64 = 0.8;

/// Number of classes of the classification datasets.
const CLASSES: usize = 10;

/// Standardized train/test splits, shareable between runs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub enum Prepared {
    Classification(PreparedData),
    Parabola(Parabola),
}

pub fn prepare_data(spec: &DatasetSpec) -> Result<Prepared> {
    match spec {
        DatasetSpec::Mnist { dir } => {
            let (train, test) = load_mnist_dir(dir)?;
            let (train, test, _) = standardize(&train, &test)?;
            Ok(Prepared::Classification(PreparedData { train, test }))
        }
        DatasetSpec::Blobs {
            n,
            test_n,
            width,
            classes,
            spread,
            data_seed,
        } => {
            let mut rng = RngStream::new(*data_seed);
            let all = make_blobs(n + test_n, *width, *classes, *spread, &mut rng)?;
            let train = Dataset::new(
                all.inputs.slice(ndarray::s![..*n, ..]).to_owned(),
                all.labels[..*n].to_vec(),
                "blobs-train",
            )?;
            let test = Dataset::new(
                all.inputs.slice(ndarray::s![*n.., ..]).to_owned(),
                all.labels[*n..].to_vec(),
                "blobs-test",
            )?;
            let (train, test, _) = standardize(&train, &test)?;
            Ok(Prepared::Classification(PreparedData { train, test }))
        }
        DatasetSpec::Parabola { a, theta0, points } => Ok(Prepared::Parabola(Parabola::with_points(*a, *theta0, *points)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub global_batch: u64,
    pub epoch: usize,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
    pub etas: Vec<f64>,
    pub ph_gap: Option<f64>,
    pub triggered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub train_error: Option<f64>,
    pub test_loss: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerRow {
    pub global_batch: u64,
    pub ph_gap: f64,
    pub delta: f64,
    /// Mean rate before and after halving.
    pub eta_before: f64,
    pub eta_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub dataset: String,
    pub model: String,
    pub optimizer: String,
    pub eta0: f64,
    pub seed: u64,
    pub epochs: usize,
    pub test_error_5: Option<f64>,
    pub test_error_final: Option<f64>,
    pub test_loss_final: f64,
    pub triggers: u64,
    /// Steps that raised a numerical error and were skipped.
    pub step_errors: u64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rate_labels: Vec<String>,
    pub batches: Vec<BatchRow>,
    pub epochs: Vec<EpochRow>,
    pub triggers: Vec<TriggerRow>,
    pub summary: Summary,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Loads the data named by `config`, trains and, if `config.out` is set,
/// writes the metric files there.
pub fn run_training(config: &RunConfig) -> Result<MetricsRecord> {
    config.validate()?;
    let prepared = prepare_data(&config.dataset)?;
    let record = run_training_on(config, &prepared)?;
    if let Some(dir) = &config.out {
        write_metrics(dir, &record)?;
    }
    Ok(record)
}

/// Trains on already prepared data; writes nothing.
pub fn run_training_on(config: &RunConfig, prepared: &Prepared) -> Result<MetricsRecord> {
    let root = RngStream::new(config.seed);
    match (config.model, prepared) {
        (Model::Parabola1d, Prepared::Parabola(p)) => {
            let initial = p.initial();
            let start_loss = p.value(p.theta0);
            train_loop(config, p, initial, &root, |theta| {
                let loss = p.value(theta[0]);
                let failed = !(loss.is_finite() && loss <= start_loss);
                Ok((EvalResult { train: None, test_loss: loss, test_error: None }, failed))
            })
        }
        (Model::M0 | Model::M2 { .. }, Prepared::Classification(data)) => {
            let train = match config.train_limit {
                Some(n) => data.train.head(n),
                None => data.train.clone(),
            };
            let width = train.width();
            let arch = match config.model {
                Model::M2 { hidden } => Architecture::m2(width, hidden, CLASSES)?,
                _ => Architecture::m0(width, CLASSES)?,
            };
            let objective = ClassifierObjective::new(&arch, &train)?;
            let initial = arch.init_glorot(&mut root.substream(0));
            train_loop(config, &objective, initial, &root, |theta| {
                let (test_loss, test_error) = evaluate(&arch, theta, &data.test, config.eval_chunk)?;
                let train = if config.eval_train {
                    Some(evaluate(&arch, theta, &train, config.eval_chunk)?)
                } else {
                    None
                };
                Ok((
                    EvalResult {
                        train,
                        test_loss,
                        test_error: Some(test_error),
                    },
                    !(test_error <= FAILURE_ERROR),
                ))
            })
        }
        _ => Err(Error::Config("model and dataset do not match".into())),
    }
}

struct EvalResult {
    train: Option<(f64, f64)>,
    test_loss: f64,
    test_error: Option<f64>,
}

fn train_loop<O, E>(config: &RunConfig, objective: &O, mut theta: FlatVector, root: &RngStream, mut eval: E) -> Result<MetricsRecord>
where
    O: Objective,
    E: FnMut(&[f64]) -> Result<(EvalResult, bool)>,
{
    let mut opt = Optimizer::new(config.optimizer.clone(), objective.partition())?;
    let mut schedule = minibatch_schedule(objective.num_examples(), config.optimizer.rho, config.epochs, root.substream(1))?;
    let mut batches = Vec::new();
    let mut epochs = Vec::new();
    let mut triggers = Vec::new();
    let mut step_errors = 0;
    let mut global = 0u64;
    let mut failed = false;
    let mut epoch = 0;
    while let Some(epoch_batches) = schedule.next_epoch() {
        epoch += 1;
        for batch in &epoch_batches {
            global += 1;
            match opt.step(objective, &mut theta, batch) {
                Ok(report) => {
                    let etas = opt.learning_rates();
                    if let Some(before) = &report.rates_before {
                        triggers.push(TriggerRow {
                            global_batch: global,
                            ph_gap: report.ph_gap.unwrap_or(f64::NAN),
                            delta: report.ph_delta.unwrap_or(f64::NAN),
                            eta_before: mean(before),
                            eta_after: mean(&etas),
                        });
                    }
                    batches.push(BatchRow {
                        global_batch: global,
                        epoch,
                        raw_loss: report.loss,
                        smoothed_loss: report.smoothed_loss,
                        etas,
                        ph_gap: report.ph_gap,
                        triggered: report.verdict.is_triggered(),
                    });
                }
                // numerical breakdown without a detector: log and keep going
                Err(Error::Parameter(_) | Error::ZeroGradient) => {
                    step_errors += 1;
                    batches.push(BatchRow {
                        global_batch: global,
                        epoch,
                        raw_loss: f64::NAN,
                        smoothed_loss: f64::NAN,
                        etas: opt.learning_rates(),
                        ph_gap: None,
                        triggered: false,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let (result, epoch_failed) = eval(&theta)?;
        failed = epoch_failed;
        epochs.push(EpochRow {
            epoch,
            train_loss: result.train.map(|t| t.0),
            train_error: result.train.map(|t| t.1),
            test_loss: result.test_loss,
            test_error: result.test_error,
        });
    }
    let last = epochs.last().expect("at least one epoch");
    let summary = Summary {
        label: config.label(),
        dataset: config.dataset.kind().to_string(),
        model: config.model.name().to_string(),
        optimizer: config.optimizer.variant.to_string(),
        eta0: config.optimizer.eta0,
        seed: config.seed,
        epochs: config.epochs,
        test_error_5: epochs.get(4).and_then(|e| e.test_error),
        test_error_final: last.test_error,
        test_loss_final: last.test_loss,
        triggers: opt.triggers(),
        step_errors,
        failed,
    };
    Ok(MetricsRecord {
        rate_labels: opt.rate_labels().to_vec(),
        batches,
        epochs,
        triggers,
        summary,
    })
}

fn opt_str(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Summary as one JSON line.
pub fn summary_line(summary: &Summary) -> String {
    serde_json::to_string(summary).expect("summary serializes")
}

/// Writes `batches.csv`, `epochs.csv`, `triggers.csv` and `summary.json`.
///
/// Column orders:
/// - batches: `global_batch, epoch, raw_loss, smoothed_loss, ph_gap, triggered, eta_<layer>...`
/// - epochs: `epoch, train_loss, train_error, test_loss, test_error`
/// - triggers: `global_batch, ph_gap, delta, eta_before, eta_after`
pub fn write_metrics(dir: &Path, record: &MetricsRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("batches.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let mut header: Vec<String> = ["global_batch", "epoch", "raw_loss", "smoothed_loss", "ph_gap", "triggered"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(record.rate_labels.iter().map(|l| format!("eta_{l}")));
    w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
    for b in &record.batches {
        let mut row = vec![
            b.global_batch.to_string(),
            b.epoch.to_string(),
            b.raw_loss.to_string(),
            b.smoothed_loss.to_string(),
            opt_str(b.ph_gap),
            u8::from(b.triggered).to_string(),
        ];
        row.extend(b.etas.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("epochs.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["epoch", "train_loss", "train_error", "test_loss", "test_error"])
        .map_err(|e| Error::csv(&path, e))?;
    for e in &record.epochs {
        w.write_record([
            e.epoch.to_string(),
            opt_str(e.train_loss),
            opt_str(e.train_error),
            e.test_loss.to_string(),
            opt_str(e.test_error),
        ])
        .map_err(|err| Error::csv(&path, err))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("triggers.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["global_batch", "ph_gap", "delta", "eta_before", "eta_after"])
        .map_err(|e| Error::csv(&path, e))?;
    for t in &record.triggers {
        w.write_record([
            t.global_batch.to_string(),
            t.ph_gap.to_string(),
            t.delta.to_string(),
            t.eta_before.to_string(),
            t.eta_after.to_string(),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("summary.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", summary_line(&record.summary)).map_err(|e| Error::io(&path, e))
}
