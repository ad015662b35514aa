//! Datasets, IDX parsing, standardization, mini-batch schedules and the
//! synthetic objectives used in tests.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::vecmath::{FlatVector, Partition, RngStream};
use crate::{Error, Objective, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Standard deviations below this are treated as constant coordinates.
pub const EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One example per row.
    pub inputs: Array2<f64>,
    pub labels: Vec<u8>,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<u8>, name: impl Into<String>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter("dataset contains non-finite values".into()));
        }
        Ok(Self {
            inputs,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.ncols()
    }

    /// First `n` examples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
        }
    }
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file).read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_error(path: &Path, field: &'static str, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_error(path, field, "file truncated inside the header"))
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(format_error(path, "image magic", format!("expected 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4, path, "image count")? as usize;
    let rows = be_u32(bytes, 8, path, "image rows")? as usize;
    let cols = be_u32(bytes, 12, path, "image columns")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or_else(|| format_error(path, "image count", "dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(format_error(
            path,
            "image payload",
            format!("expected {expected} pixel bytes, found {}", payload.len()),
        ));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(format_error(path, "label magic", format!("expected 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4, path, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(format_error(
            path,
            "label payload",
            format!("expected {count} labels, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads an image/label IDX pair (plain or gzip) into a dataset with pixels
/// scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if images.count() != labels.len() {
        return Err(format_error(
            labels_path,
            "label count",
            format!("{} labels for {} images", labels.len(), images.count()),
        ));
    }
    let width = images.rows * images.cols;
    let inputs = Array2::from_shape_vec(
        (labels.len(), width),
        images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .expect("payload length checked");
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(inputs, labels, name)
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    // some mirrors use dots instead of dashes
    let dotted = stem.replacen("-idx", ".idx", 1);
    for candidate in [dotted.clone(), format!("{dotted}.gz")] {
        let p = dir.join(candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io {
        path: dir.join(stem),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    })
}

/// Loads the standard four MNIST files from one directory as (train, test).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = load_idx(
        &find_idx(dir, "train-images-idx3-ubyte")?,
        &find_idx(dir, "train-labels-idx1-ubyte")?,
    )?;
    let mut test = load_idx(
        &find_idx(dir, "t10k-images-idx3-ubyte")?,
        &find_idx(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    train.name = "mnist-train".into();
    test.name = "mnist-test".into();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Parameter("cannot standardize an empty training set".into()));
        }
        let mean: Array1<f64> = train.inputs.mean_axis(Axis(0)).expect("nonempty");
        let std = train.inputs.std_axis(Axis(0), 0.0);
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.width() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "dataset has {} features, statistics have {}",
                data.width(),
                self.mean.len()
            )));
        }
        let mut inputs = data.inputs.clone();
        for mut row in inputs.rows_mut() {
            for ((x, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = if s < EPS_STD { 0.0 } else { (*x - m) / s };
            }
        }
        Dataset::new(inputs, data.labels.clone(), data.name.clone())
    }
}

/// Standardizes both splits with statistics from `train` only.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, NormalizationStats)> {
    if train.width() != test.width() {
        return Err(Error::Dimension(format!(
            "train has {} features, test has {}",
            train.width(),
            test.width()
        )));
    }
    let stats = NormalizationStats::fit(train)?;
    Ok((stats.apply(train)?, stats.apply(test)?, stats))
}

/// Mini-batch size `round(rho * n)`.
pub fn batch_size(n: usize, rho: f64) -> Result<usize> {
    let raw = rho * n as f64;
    if !(rho > 0.0 && rho <= 1.0) || raw < 1.0 {
        return Err(Error::Parameter(format!(
            "mini-batch ratio {rho} gives fewer than one example out of {n}"
        )));
    }
    Ok((raw.round() as usize).clamp(1, n))
}

/// Per-epoch shuffled index batches; the last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct MinibatchSchedule {
    order: Vec<usize>,
    batch: usize,
    epochs_left: usize,
    cursor: usize,
    rng: RngStream,
}

pub fn minibatch_schedule(n: usize, rho: f64, epochs: usize, rng: RngStream) -> Result<MinibatchSchedule> {
    let batch = batch_size(n, rho)?;
    Ok(MinibatchSchedule {
        order: (0..n).collect(),
        batch,
        epochs_left: epochs,
        cursor: n,
        rng,
    })
}

impl MinibatchSchedule {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    /// The next epoch's batches, or `None` once the budget is spent.
    pub fn next_epoch(&mut self) -> Option<Vec<Vec<usize>>> {
        if self.epochs_left == 0 {
            return None;
        }
        self.epochs_left -= 1;
        self.cursor = self.order.len();
        self.rng.shuffle(&mut self.order);
        Some(self.order.chunks(self.batch).map(<[usize]>::to_vec).collect())
    }
}

impl Iterator for MinibatchSchedule {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            if self.epochs_left == 0 {
                return None;
            }
            self.epochs_left -= 1;
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(out)
    }
}

/// `F(theta) = a theta^2 / 2` in one dimension. The loss does not depend on
/// the batch; `points` only sets how many examples the schedule sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Parabola {
    pub a: f64,
    pub theta0: f64,
    points: usize,
    partition: Partition,
}

impl Parabola {
    pub fn new(a: f64, theta0: f64) -> Result<Self> {
        Self::with_points(a, theta0, 1)
    }

    pub fn with_points(a: f64, theta0: f64, points: usize) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Parameter(format!("curvature must be positive, got {a}")));
        }
        if points == 0 {
            return Err(Error::Parameter("a parabola needs at least one virtual example".into()));
        }
        Ok(Self {
            a,
            theta0,
            points,
            partition: Partition::single(1)?,
        })
    }

    pub fn value(&self, theta: f64) -> f64 {
        0.5 * self.a * theta * theta
    }

    pub fn gradient(&self, theta: f64) -> f64 {
        self.a * theta
    }

    /// Rate reaching the minimum in one step.
    pub fn eta_star(&self) -> f64 {
        1.0 / self.a
    }

    /// Largest rate that does not increase the loss.
    pub fn eta_minus(&self) -> f64 {
        2.0 / self.a
    }

    pub fn initial(&self) -> FlatVector {
        FlatVector::filled(1, self.theta0)
    }
}

pub fn make_parabola(a: f64, theta0: f64) -> Result<Parabola> {
    Parabola::new(a, theta0)
}

impl Objective for Parabola {
    type Pass = ();

    fn partition(&self) -> &Partition {
        &self.partition
    }

    fn num_examples(&self) -> usize {
        self.points
    }

    fn forward(&self, params: &[f64], _batch: &[usize]) -> (f64, ()) {
        (self.value(params[0]), ())
    }

    fn backward(&self, params: &[f64], _pass: ()) -> FlatVector {
        FlatVector::filled(1, self.gradient(params[0]))
    }
}

/// Isotropic Gaussian clusters around random centers, one per class.
pub fn make_blobs(n: usize, width: usize, classes: usize, spread: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 || width == 0 || classes == 0 || classes > 256 {
        return Err(Error::Parameter("blobs need n, width >= 1 and 1..=256 classes".into()));
    }
    let centers = Array2::from_shape_fn((classes, width), |_| rng.uniform_range(-3.0, 3.0));
    let mut inputs = Array2::zeros((n, width));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in inputs.rows_mut().into_iter().enumerate() {
        let k = i % classes;
        for (x, c) in row.iter_mut().zip(centers.row(k)) {
            *x = c + spread * rng.standard_normal();
        }
        labels.push(k as u8);
    }
    Dataset::new(inputs, labels, "blobs")
}
