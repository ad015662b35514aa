//! Hyperparameter grids over seeds.
//!
//! A grid spec uses the run-config keys, with comma-separated alternatives
//! (semicolon-separated for `hidden`, whose values already contain a comma).
//! Every combination is one cell; every cell runs once per seed.
//!
//! ```text
//! dataset = mnist
//! model = m0
//! optimizer = sgd, salera
//! eta0 = 1e-3, 1e-2, 1e-1
//! epochs = 20
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{parse_pairs, RunConfig};
use super::train::{prepare_data, run_training_on, summary_line, Prepared, Summary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Keys in file order with their alternatives.
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: usize,
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

impl GridSpec {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        let mut seeds = 5;
        let mut jobs = 1;
        let mut out = None;
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "seeds" => seeds = v.parse().map_err(|_| Error::Config(format!("`seeds`: cannot parse `{v}`")))?,
                "jobs" => jobs = v.parse().map_err(|_| Error::Config(format!("`jobs`: cannot parse `{v}`")))?,
                "out" => out = Some(PathBuf::from(v)),
                "seed" => return Err(Error::Config("grids take `seeds = k`, not `seed`".into())),
                _ => {
                    let sep = if k == "hidden" { ';' } else { ',' };
                    let values: Vec<String> = v.split(sep).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    if values.is_empty() {
                        return Err(Error::Config(format!("`{k}` has no values")));
                    }
                    match axes.iter_mut().find(|(name, _)| *name == k) {
                        Some(axis) => axis.1 = values,
                        None => axes.push((k, values)),
                    }
                }
            }
        }
        Ok(Self { axes, seeds, jobs, out })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// All cells as run configurations (seed 0, no output directory).
    pub fn cells(&self) -> Result<Vec<RunConfig>> {
        let mut combos: Vec<Vec<(&str, &str)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.as_str(), v.as_str()));
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|assignments| {
                let mut cfg = RunConfig::default();
                for (k, v) in assignments {
                    cfg.set(k, v)?;
                }
                cfg.out = None;
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub model: String,
    pub optimizer: String,
    pub eta0: f64,
    pub runs: usize,
    pub failures: usize,
    /// Messages of runs that stopped with an error.
    pub errors: Vec<String>,
    pub mean_error_5: Option<f64>,
    pub std_error_5: Option<f64>,
    pub mean_error_final: Option<f64>,
    pub std_error_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub model: String,
    /// `5` or the final epoch count.
    pub epoch_mark: String,
    pub label: String,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<CellSummary>,
    pub best: Vec<BestCell>,
    /// Failed runs over all runs, per optimizer. Runs that errored count as failed.
    pub failure_rate: BTreeMap<String, f64>,
    pub runs: Vec<Summary>,
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

/// Runs every cell for seeds `0..seeds` on `jobs` threads. Failing runs are
/// recorded in their cell and never stop the grid.
pub fn run_grid(spec: &GridSpec) -> Result<GridReport> {
    let cells = spec.cells()?;
    if cells.is_empty() || spec.seeds == 0 {
        return Err(Error::Config("the grid is empty".into()));
    }
    let mut datasets: Vec<(super::config::DatasetSpec, Prepared)> = Vec::new();
    for cell in &cells {
        if !datasets.iter().any(|(d, _)| *d == cell.dataset) {
            datasets.push((cell.dataset.clone(), prepare_data(&cell.dataset)?));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| (0..spec.seeds as u64).map(move |s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<(usize, Result<Summary>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let mut cfg = cells[c].clone();
                cfg.seed = seed;
                let prepared = &datasets.iter().find(|(d, _)| *d == cfg.dataset).expect("prepared above").1;
                (c, run_training_on(&cfg, prepared).map(|r| r.summary))
            })
            .collect()
    });

    let mut summaries = Vec::new();
    let mut per_cell: Vec<CellSummary> = cells
        .iter()
        .map(|cfg| CellSummary {
            label: cfg.label(),
            model: cfg.model.name().to_string(),
            optimizer: cfg.optimizer.variant.to_string(),
            eta0: cfg.optimizer.eta0,
            runs: 0,
            failures: 0,
            errors: Vec::new(),
            mean_error_5: None,
            std_error_5: None,
            mean_error_final: None,
            std_error_final: None,
        })
        .collect();
    let mut e5: Vec<Vec<f64>> = vec![Vec::new(); cells.len()];
    let mut ef: Vec<Vec<f64>> = vec![Vec::new(); cells.len()];
    for (c, outcome) in outcomes {
        let cell = &mut per_cell[c];
        cell.runs += 1;
        match outcome {
            Ok(s) => {
                if s.failed {
                    cell.failures += 1;
                }
                e5[c].extend(s.test_error_5);
                ef[c].extend(s.test_error_final);
                summaries.push(s);
            }
            Err(e) => {
                cell.failures += 1;
                cell.errors.push(e.to_string());
            }
        }
    }
    for (c, cell) in per_cell.iter_mut().enumerate() {
        if let Some((m, s)) = mean_std(&e5[c]) {
            cell.mean_error_5 = Some(m);
            cell.std_error_5 = Some(s);
        }
        if let Some((m, s)) = mean_std(&ef[c]) {
            cell.mean_error_final = Some(m);
            cell.std_error_final = Some(s);
        }
    }

    let mut best: Vec<BestCell> = Vec::new();
    let mut models: Vec<&str> = per_cell.iter().map(|c| c.model.as_str()).collect();
    models.dedup();
    models.sort_unstable();
    models.dedup();
    for model in models {
        for (mark, pick) in [
            ("5", (|c: &CellSummary| c.mean_error_5.zip(c.std_error_5)) as fn(&CellSummary) -> Option<(f64, f64)>),
            ("final", |c: &CellSummary| c.mean_error_final.zip(c.std_error_final)),
        ] {
            let winner = per_cell
                .iter()
                .filter(|c| c.model == model)
                .filter_map(|c| pick(c).map(|(m, s)| (c, m, s)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((c, m, s)) = winner {
                best.push(BestCell {
                    model: model.to_string(),
                    epoch_mark: mark.to_string(),
                    label: c.label.clone(),
                    mean_error: m,
                    std_error: s,
                });
            }
        }
    }

    let mut failure_rate = BTreeMap::new();
    for cell in &per_cell {
        let entry = failure_rate.entry(cell.optimizer.clone()).or_insert((0usize, 0usize));
        entry.0 += cell.failures;
        entry.1 += cell.runs;
    }
    let failure_rate = failure_rate
        .into_iter()
        .map(|(k, (f, n))| (k, f as f64 / n as f64))
        .collect();

    let report = GridReport {
        cells: per_cell,
        best,
        failure_rate,
        runs: summaries,
    };
    if let Some(dir) = &spec.out {
        write_grid(dir, &report)?;
    }
    Ok(report)
}

/// Writes `grid_cells.csv` and `grid_runs.jsonl`.
///
/// `grid_cells.csv` columns: `label, model, optimizer, eta0, runs, failures,
/// mean_error_5, std_error_5, mean_error_final, std_error_final`.
pub fn write_grid(dir: &Path, report: &GridReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("grid_cells.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record([
        "label",
        "model",
        "optimizer",
        "eta0",
        "runs",
        "failures",
        "mean_error_5",
        "std_error_5",
        "mean_error_final",
        "std_error_final",
    ])
    .map_err(|e| Error::csv(&path, e))?;
    let s = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    for c in &report.cells {
        w.write_record([
            c.label.clone(),
            c.model.clone(),
            c.optimizer.clone(),
            c.eta0.to_string(),
            c.runs.to_string(),
            c.failures.to_string(),
            s(c.mean_error_5),
            s(c.std_error_5),
            s(c.mean_error_final),
            s(c.std_error_final),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("grid_runs.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for run in &report.runs {
        writeln!(f, "{}", summary_line(run)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLOBS: &str = "dataset = blobs\nblobs_n = 200\nblobs_test = 100\nepochs = 5\nrho = 0.1\n";

    #[test]
    fn cartesian_product_in_file_order() {
        let spec = GridSpec::from_text(&format!("{BLOBS}optimizer = sgd, adam\neta0 = 0.1, 0.01, 0.001\nseeds = 2")).unwrap();
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(spec.seeds, 2);
        assert_eq!(cells[0].optimizer.eta0, 0.1);
        assert_eq!(cells[1].optimizer.eta0, 0.01);
        assert_eq!(cells[3].optimizer.variant.to_string(), "adam");
    }

    #[test]
    fn one_cell_reproduces_its_run() {
        let mut spec = GridSpec::from_text(&format!("{BLOBS}eta0 = 0.05")).unwrap();
        spec.seeds = 1;
        let report = run_grid(&spec).unwrap();
        let mut cfg = spec.cells().unwrap().remove(0);
        cfg.seed = 0;
        let single = super::super::train::run_training(&cfg).unwrap().summary;
        assert_eq!(report.runs, vec![single.clone()]);
        assert_eq!(report.cells[0].mean_error_final, single.test_error_final);
        assert_eq!(report.cells[0].std_error_final, Some(0.0));
    }

    #[test]
    fn statistics_over_seeds_and_failure_rates() {
        let mut spec = GridSpec::from_text(&format!("{BLOBS}optimizer = sgd\neta0 = 0.5, 1e6")).unwrap();
        spec.seeds = 5;
        spec.jobs = 2;
        let report = run_grid(&spec).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells.iter().all(|c| c.runs == 5));
        let good = &report.cells[0];
        let e: Vec<f64> = report
            .runs
            .iter()
            .filter(|r| r.eta0 == 0.5)
            .filter_map(|r| r.test_error_final)
            .collect();
        assert_eq!(e.len(), 5);
        let (m, s) = mean_std(&e).unwrap();
        assert!((good.mean_error_final.unwrap() - m).abs() < 1e-15);
        assert!((good.std_error_final.unwrap() - s).abs() < 1e-15);
        let rate = report.failure_rate["sgd"];
        let expected = report.cells.iter().map(|c| c.failures).sum::<usize>() as f64 / 10.0;
        assert_eq!(rate, expected);
        assert_eq!(report.best.len(), 2);
        assert!(report.best.iter().all(|b| b.label == good.label));
    }

    #[test]
    fn grid_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = GridSpec::from_text(&format!("{BLOBS}eta0 = 0.05\nseeds = 2")).unwrap();
        spec.out = Some(dir.path().to_path_buf());
        run_grid(&spec).unwrap();
        let cells = fs::read_to_string(dir.path().join("grid_cells.csv")).unwrap();
        assert_eq!(cells.lines().count(), 2);
        let runs = fs::read_to_string(dir.path().join("grid_runs.jsonl")).unwrap();
        assert_eq!(runs.lines().count(), 2);
    }
}
