//! Dense feed-forward classifiers with hand-written backpropagation.
//!
//! Parameters live outside the network in one [`FlatVector`]; each layer owns
//! a contiguous segment holding its `out x in` weight matrix (row-major)
//! followed by its `out` biases. The last layer produces logits, trained with
//! softmax cross-entropy averaged over the mini-batch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::Dataset;
use crate::vecmath::{FlatVector, Partition, RngStream};
use crate::{Error, Objective, Result};

const SNAPSHOT_MAGIC: &[u8; 4] = b"SALR";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn num_params(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }
}

/// Layer shapes and the matching parameter partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    layers: Vec<LayerShape>,
    partition: Partition,
}

impl Architecture {
    /// `widths = [input, hidden..., classes]`; hidden layers use ReLU, the
    /// output layer is linear.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Parameter(format!("need at least two positive widths, got {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| LayerShape {
                inputs: widths[i],
                outputs: widths[i + 1],
                activation: if i + 1 == n { Activation::Identity } else { Activation::Relu },
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Dimension(format!(
                    "layer widths do not chain: {} outputs feed {} inputs",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        let partition =
            Partition::from_lengths(layers.iter().enumerate().map(|(i, l)| (format!("layer{i}"), l.num_params())))?;
        Ok(Self { layers, partition })
    }

    /// Softmax regression on `inputs` features.
    pub fn m0(inputs: usize, classes: usize) -> Result<Self> {
        Self::mlp(&[inputs, classes])
    }

    /// Two ReLU hidden layers.
    pub fn m2(inputs: usize, hidden: (usize, usize), classes: usize) -> Result<Self> {
        Self::mlp(&[inputs, hidden.0, hidden.1, classes])
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn num_params(&self) -> usize {
        self.partition.dim()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn weights<'a>(&self, params: &'a [f64], layer: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let shape = self.layers[layer];
        let seg = &params[self.partition.segments()[layer].range()];
        let (w, b) = seg.split_at(shape.outputs * shape.inputs);
        let w = ArrayView2::from_shape((shape.outputs, shape.inputs), w).expect("segment sized from shape");
        (w, ArrayView1::from(b))
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_glorot(&self, rng: &mut RngStream) -> FlatVector {
        let mut params = FlatVector::zeros(self.num_params());
        for (shape, seg) in self.layers.iter().zip(self.partition.segments()) {
            let bound = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            let start = seg.start;
            for w in &mut params[start..start + shape.inputs * shape.outputs] {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        params
    }

    /// Logits for a batch of row inputs, plus what `backward` needs.
    pub fn forward(&self, params: &[f64], inputs: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if inputs.ncols() != self.input_width() {
            return Err(Error::Dimension(format!(
                "input width {} does not match the first layer ({})",
                inputs.ncols(),
                self.input_width()
            )));
        }
        let mut activations = vec![inputs.to_owned()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for (i, shape) in self.layers.iter().enumerate() {
            let (w, b) = self.weights(params, i);
            let mut z = activations[i].dot(&w.t());
            z += &b;
            let a = match shape.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => z.mapv(|x| x.max(0.0)),
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let logits = activations.pop().expect("at least one layer");
        Ok((logits, ForwardCache { activations, pre_activations }))
    }

    /// Gradient of the mean cross-entropy over the batch held in `cache`.
    pub fn backward(&self, params: &[f64], cache: &ForwardCache, logits: &Array2<f64>, labels: &[u8]) -> FlatVector {
        let batch = logits.nrows();
        assert_eq!(labels.len(), batch, "one label per cached example");
        assert_eq!(cache.activations.len(), self.layers.len(), "cache from another network");
        let mut grad = FlatVector::zeros(self.num_params());
        let mut delta = softmax(logits.view());
        for (row, &label) in delta.rows_mut().into_iter().zip(labels) {
            let mut row = row;
            row[label as usize] -= 1.0;
        }
        delta /= batch as f64;

        for i in (0..self.layers.len()).rev() {
            let shape = self.layers[i];
            if i + 1 < self.layers.len() && shape.activation == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre_activations[i])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let seg = &mut grad[self.partition.segments()[i].range()];
            let (gw, gb) = seg.split_at_mut(shape.outputs * shape.inputs);
            let dw = delta.t().dot(&cache.activations[i]);
            gw.copy_from_slice(dw.as_slice().expect("standard layout"));
            let db = delta.sum_axis(Axis(0));
            gb.copy_from_slice(db.as_slice().expect("contiguous"));
            if i > 0 {
                let (w, _) = self.weights(params, i);
                delta = delta.dot(&w);
            }
        }
        grad
    }
}

/// Per-layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer; `activations[0]` is the batch itself.
    pub activations: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and error rate of a batch of logits.
pub fn loss_and_error(logits: ArrayView2<'_, f64>, labels: &[u8]) -> (f64, f64) {
    let (loss_sum, errors) = loss_and_error_sums(logits, labels);
    let n = labels.len() as f64;
    (loss_sum / n, errors as f64 / n)
}

fn loss_and_error_sums(logits: ArrayView2<'_, f64>, labels: &[u8]) -> (f64, usize) {
    assert_eq!(logits.nrows(), labels.len(), "one label per row");
    let mut loss = 0.0;
    let mut errors = 0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[label as usize];
        if argmax(row) != label as usize {
            errors += 1;
        }
    }
    (loss, errors)
}

/// Mean loss and error of `params` on the whole dataset, in chunks.
pub fn evaluate(arch: &Architecture, params: &[f64], data: &Dataset, chunk: usize) -> Result<(f64, f64)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Parameter("cannot evaluate on an empty dataset".into()));
    }
    let chunk = chunk.max(1);
    let mut loss = 0.0;
    let mut errors = 0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let (logits, _) = arch.forward(params, data.inputs.slice(s![start..end, ..]))?;
        let (l, e) = loss_and_error_sums(logits.view(), &data.labels[start..end]);
        loss += l;
        errors += e;
        start = end;
    }
    Ok((loss / n as f64, errors as f64 / n as f64))
}

/// Central finite differences against [`Architecture::backward`]; returns the
/// largest `|a - n| / max(|a|, |n|, 1e-3)` over all parameters.
pub fn max_relative_gradient_error(
    arch: &Architecture,
    params: &[f64],
    inputs: ArrayView2<'_, f64>,
    labels: &[u8],
    h: f64,
) -> Result<f64> {
    let (logits, cache) = arch.forward(params, inputs)?;
    let analytic = arch.backward(params, &cache, &logits, labels);
    let mut probe = params.to_vec();
    let loss_at = |p: &[f64]| -> Result<f64> {
        let (z, _) = arch.forward(p, inputs)?;
        Ok(loss_and_error(z.view(), labels).0)
    };
    let mut worst: f64 = 0.0;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss_at(&probe)?;
        probe[i] = orig - h;
        let down = loss_at(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Glorot parameters with perturbed biases, a Gaussian batch and random labels.
pub fn random_instance(arch: &Architecture, batch: usize, rng: &mut RngStream) -> (FlatVector, Array2<f64>, Vec<u8>) {
    let mut params = arch.init_glorot(rng);
    for p in params.iter_mut() {
        *p += 0.1 * rng.standard_normal();
    }
    let x = Array2::from_shape_fn((batch, arch.input_width()), |_| rng.standard_normal());
    let labels = (0..batch).map(|_| rng.below(arch.classes()) as u8).collect();
    (params, x, labels)
}

/// A network bound to a training set, usable by the optimizers.
pub struct ClassifierObjective<'a> {
    arch: &'a Architecture,
    data: &'a Dataset,
}

impl<'a> ClassifierObjective<'a> {
    pub fn new(arch: &'a Architecture, data: &'a Dataset) -> Result<Self> {
        if data.width() != arch.input_width() {
            return Err(Error::Dimension(format!(
                "dataset has {} features, network expects {}",
                data.width(),
                arch.input_width()
            )));
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l as usize >= arch.classes()) {
            return Err(Error::Parameter(format!("label {bad} out of range for {} classes", arch.classes())));
        }
        Ok(Self { arch, data })
    }
}

/// Forward state kept for the matching backward call.
pub struct ClassifierPass {
    logits: Array2<f64>,
    cache: ForwardCache,
    labels: Vec<u8>,
}

impl Objective for ClassifierObjective<'_> {
    type Pass = ClassifierPass;

    fn partition(&self) -> &Partition {
        self.arch.partition()
    }

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn forward(&self, params: &[f64], batch: &[usize]) -> (f64, ClassifierPass) {
        let inputs = self.data.inputs.select(Axis(0), batch);
        let labels: Vec<u8> = batch.iter().map(|&i| self.data.labels[i]).collect();
        let (logits, cache) = self.arch.forward(params, inputs.view()).expect("shapes checked at construction");
        let (loss, _) = loss_and_error(logits.view(), &labels);
        (loss, ClassifierPass { logits, cache, labels })
    }

    fn backward(&self, params: &[f64], pass: ClassifierPass) -> FlatVector {
        self.arch.backward(params, &pass.cache, &pass.logits, &pass.labels)
    }
}

/// Writes the architecture header and the parameters as little-endian `f64`.
pub fn save_snapshot(path: &Path, arch: &Architecture, params: &[f64]) -> Result<()> {
    if params.len() != arch.num_params() {
        return Err(Error::Dimension(format!(
            "snapshot of {} parameters for a network of {}",
            params.len(),
            arch.num_params()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::new();
    header.extend_from_slice(SNAPSHOT_MAGIC);
    header.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    header.extend_from_slice(&(arch.layers.len() as u32).to_le_bytes());
    for l in &arch.layers {
        header.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        header.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        header.push(l.activation.code());
    }
    header.extend_from_slice(&(params.len() as u64).to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for x in params {
        w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<(Architecture, FlatVector)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(4, "magic")? != SNAPSHOT_MAGIC {
        return Err(cur.error("magic", "not a network snapshot"));
    }
    let version = cur.u32("version")?;
    if version != SNAPSHOT_VERSION {
        return Err(cur.error("version", format!("unsupported version {version}")));
    }
    let count = cur.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let inputs = cur.u32("layer inputs")? as usize;
        let outputs = cur.u32("layer outputs")? as usize;
        let code = cur.take(1, "activation")?[0];
        let activation = Activation::from_code(code).ok_or_else(|| cur.error("activation", format!("unknown code {code}")))?;
        layers.push(LayerShape { inputs, outputs, activation });
    }
    let arch = Architecture::from_layers(layers).map_err(|e| cur.error("layer shapes", e.to_string()))?;
    let n = u64::from_le_bytes(cur.take(8, "parameter count")?.try_into().expect("8 bytes")) as usize;
    if n != arch.num_params() {
        return Err(cur.error("parameter count", format!("{n} does not match the layer shapes")));
    }
    let block = cur.take(n * 8, "parameters")?;
    let params = block
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if cur.pos != bytes.len() {
        return Err(cur.error("parameters", "trailing bytes"));
    }
    Ok((arch, FlatVector::new(params)?))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn error(&self, field: &'static str, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            field,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(field, "file truncated")),
        }
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}
