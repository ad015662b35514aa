//! SGD, NAG, Adagrad, Adam and the agnostic family behind one step interface.
//!
//! The update kernels (`sgd_apply`, `adam_apply`, `alera_step`, ...) are plain
//! functions over slices. [`Optimizer`] owns the per-run state, drives an
//! [`Objective`] through one mini-batch per [`Optimizer::step`] and, for
//! SALeRA and SPALeRA, runs the Page-Hinkley test between the forward and the
//! backward pass:
//!
//! - on a trigger the parameters are restored from the checkpoint, the rates
//!   are halved, the detector is reset and no gradient is computed;
//! - otherwise the current parameters are checkpointed and the regular update
//!   runs.
//!
//! Optimizer internals (paths, moments) are not rolled back on a trigger.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agnostic::{lr_update, lr_update_paramwise, AgnosticReference, PathState};
use crate::page_hinkley::{backtrack, Checkpoint, PHState, Verdict, DEFAULT_LAMBDA};
use crate::vecmath::{FlatVector, Partition, Segment};
use crate::{Error, Objective, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Sgd,
    Nag,
    Adagrad,
    Adam,
    Alera,
    Salera,
    Spalera,
    AgAdam,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Sgd,
        Variant::Nag,
        Variant::Adagrad,
        Variant::Adam,
        Variant::Alera,
        Variant::Salera,
        Variant::Spalera,
        Variant::AgAdam,
    ];

    /// Whether the variant runs change detection and backtracking.
    pub fn is_safe(self) -> bool {
        matches!(self, Variant::Salera | Variant::Spalera)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::Nag => "nag",
            Variant::Adagrad => "adagrad",
            Variant::Adam => "adam",
            Variant::Alera => "alera",
            Variant::Salera => "salera",
            Variant::Spalera => "spalera",
            Variant::AgAdam => "agadam",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub variant: Variant,
    /// Initial learning rate.
    pub eta0: f64,
    /// NAG momentum.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Numerical-stability constant for Adagrad and Adam.
    pub eps: f64,
    /// Memory rate of the cumulative path.
    pub alpha: f64,
    /// Gain `C` of the agnostic update.
    pub gain: f64,
    /// Page-Hinkley threshold divisor: `delta = first loss / lambda`.
    pub ph_lambda: f64,
    /// Fixed threshold overriding `ph_lambda`.
    pub ph_delta: Option<f64>,
    pub ph_warmup_batches: u64,
    /// Mini-batch ratio, also the smoothing factor of the monitored loss.
    pub rho: f64,
    /// One rate per layer (ALeRA, SALeRA, Ag-Adam) rather than one global rate.
    pub layerwise: bool,
    /// SPALeRA only: one path per layer instead of a single global path.
    pub paramwise_per_layer: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Salera,
            eta0: 0.01,
            gamma: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            alpha: 0.01,
            gain: 3e-6,
            ph_lambda: DEFAULT_LAMBDA,
            ph_delta: None,
            ph_warmup_batches: 0,
            rho: 0.01,
            layerwise: true,
            paramwise_per_layer: false,
        }
    }
}

impl OptimizerConfig {
    pub fn new(variant: Variant, eta0: f64) -> Self {
        Self {
            variant,
            eta0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, x: f64| {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must lie in (0, 1), got {x}")))
            }
        };
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Parameter(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Parameter(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        match self.variant {
            Variant::Sgd => {}
            Variant::Nag => {
                if !(0.0..1.0).contains(&self.gamma) {
                    return Err(Error::Parameter(format!("gamma must lie in [0, 1), got {}", self.gamma)));
                }
            }
            Variant::Adagrad => {
                if !(self.eps >= 0.0) {
                    return Err(Error::Parameter("eps must be nonnegative".into()));
                }
            }
            Variant::Adam => {
                open_unit("beta1", self.beta1)?;
                open_unit("beta2", self.beta2)?;
            }
            Variant::Alera | Variant::Salera | Variant::Spalera | Variant::AgAdam => {
                open_unit("alpha", self.alpha)?;
                if !(self.gain >= 0.0 && self.gain.is_finite()) {
                    return Err(Error::Parameter(format!("gain must be nonnegative, got {}", self.gain)));
                }
                if self.variant == Variant::AgAdam {
                    open_unit("beta1", self.beta1)?;
                    open_unit("beta2", self.beta2)?;
                }
                if self.variant.is_safe() {
                    if !(self.ph_lambda > 0.0) {
                        return Err(Error::Parameter("ph_lambda must be positive".into()));
                    }
                    if let Some(d) = self.ph_delta {
                        if !(d > 0.0) {
                            return Err(Error::Parameter("ph_delta must be positive".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Update kernels
// ---------------------------------------------------------------------------

/// `theta <- theta - eta * g`.
pub fn sgd_apply(theta: &mut [f64], g: &[f64], eta: f64) {
    debug_assert_eq!(theta.len(), g.len());
    for (t, gi) in theta.iter_mut().zip(g) {
        *t -= eta * gi;
    }
}

/// Nesterov momentum in the lookahead form:
/// `v <- gamma * v - eta * grad(theta + gamma * v)`, `theta <- theta + v`.
pub fn nag_apply<F>(velocity: &mut [f64], theta: &mut [f64], lookahead_grad: F, eta: f64, gamma: f64)
where
    F: FnOnce(&[f64]) -> FlatVector,
{
    let lookahead: Vec<f64> = theta.iter().zip(velocity.iter()).map(|(t, v)| t + gamma * v).collect();
    let g = lookahead_grad(&lookahead);
    for ((v, t), gi) in velocity.iter_mut().zip(theta.iter_mut()).zip(g.iter()) {
        *v = gamma * *v - eta * gi;
        *t += *v;
    }
}

/// `G <- G + g^2`, `theta <- theta - eta * g / (sqrt(G) + eps)`.
pub fn adagrad_apply(accum: &mut [f64], theta: &mut [f64], g: &[f64], eta: f64, eps: f64) {
    for ((acc, t), gi) in accum.iter_mut().zip(theta.iter_mut()).zip(g) {
        *acc += gi * gi;
        *t -= eta * gi / (acc.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: FlatVector,
    pub v: FlatVector,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: FlatVector::zeros(dim),
            v: FlatVector::zeros(dim),
            t: 0,
        }
    }

    /// Folds `g` into both moments and returns the bias corrections
    /// `(1 - beta1^t, 1 - beta2^t)`.
    fn accumulate(&mut self, g: &[f64], beta1: f64, beta2: f64) -> (f64, f64) {
        self.t += 1;
        for ((m, v), gi) in self.m.iter_mut().zip(self.v.iter_mut()).zip(g) {
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
        }
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        (1.0 - beta1.powi(t), 1.0 - beta2.powi(t))
    }

    fn apply_range(&self, theta: &mut [f64], range: std::ops::Range<usize>, eta: f64, eps: f64, bias: (f64, f64)) {
        let (bc1, bc2) = bias;
        for i in range {
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= eta * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Bias-corrected Adam step with a single step size.
pub fn adam_apply(state: &mut AdamState, theta: &mut [f64], g: &[f64], eta: f64, beta1: f64, beta2: f64, eps: f64) {
    let bias = state.accumulate(g, beta1, beta2);
    state.apply_range(theta, 0..theta.len(), eta, eps, bias);
}

/// Per-segment cumulative paths and learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseAgnostic {
    pub alpha: f64,
    pub gain: f64,
    pub segments: Vec<Segment>,
    pub paths: Vec<PathState>,
    pub references: Vec<AgnosticReference>,
    pub etas: Vec<f64>,
}

impl LayerwiseAgnostic {
    pub fn new(partition: &Partition, alpha: f64, gain: f64, eta0: f64) -> Result<Self> {
        let segments = partition.segments().to_vec();
        let references = segments
            .iter()
            .map(|s| AgnosticReference::new(alpha, s.len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alpha,
            gain,
            paths: segments.iter().map(|s| PathState::new(s.len)).collect(),
            etas: vec![eta0; segments.len()],
            segments,
            references,
        })
    }

    /// Updates every layer's path from its gradient slice, then its rate.
    /// Layers with a zero gradient keep both unchanged.
    fn adapt(&mut self, g: &[f64]) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            match self.paths[i].update(&g[seg.range()], self.alpha) {
                Ok(()) => {
                    self.etas[i] = lr_update(self.etas[i], &self.paths[i], &self.references[i], self.gain);
                }
                Err(Error::ZeroGradient) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// One ALeRA update: per layer, fold the normalized gradient into the path,
/// adapt the layer rate, then take an SGD step with the new rate.
pub fn alera_step(state: &mut LayerwiseAgnostic, theta: &mut [f64], g: &[f64]) -> Result<()> {
    check_len(theta, g)?;
    state.adapt(g)?;
    for (seg, &eta) in state.segments.iter().zip(&state.etas) {
        sgd_apply(&mut theta[seg.range()], &g[seg.range()], eta);
    }
    Ok(())
}

/// Agnostic rate adaptation on top of Adam. Paths are built from the raw
/// gradient; each layer's Adam step uses that layer's rate.
pub fn agadam_step(
    agnostic: &mut LayerwiseAgnostic,
    adam: &mut AdamState,
    theta: &mut [f64],
    g: &[f64],
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_len(theta, g)?;
    agnostic.adapt(g)?;
    let bias = adam.accumulate(g, beta1, beta2);
    for (seg, &eta) in agnostic.segments.iter().zip(&agnostic.etas) {
        adam.apply_range(theta, seg.range(), eta, eps, bias);
    }
    Ok(())
}

/// Parameter-wise state: a global scale `eta0` and one positive multiplier
/// per parameter, giving effective rates `eta0 * m_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamwiseAgnostic {
    pub alpha: f64,
    pub gain: f64,
    pub eta0: f64,
    pub segments: Vec<Segment>,
    pub paths: Vec<PathState>,
    pub references: Vec<AgnosticReference>,
    pub multipliers: FlatVector,
}

impl ParamwiseAgnostic {
    /// `partition` decides the path granularity; pass [`Partition::single`]
    /// for one global path.
    pub fn new(partition: &Partition, alpha: f64, gain: f64, eta0: f64) -> Result<Self> {
        let segments = partition.segments().to_vec();
        let references = segments
            .iter()
            .map(|s| AgnosticReference::new(alpha, s.len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alpha,
            gain,
            eta0,
            paths: segments.iter().map(|s| PathState::new(s.len)).collect(),
            references,
            multipliers: FlatVector::filled(partition.dim(), 1.0),
            segments,
        })
    }
}

/// One parameter-wise update: path, multipliers, then
/// `theta <- theta - (eta0 * m) * g` coordinate-wise.
pub fn spalera_update(state: &mut ParamwiseAgnostic, theta: &mut [f64], g: &[f64]) -> Result<()> {
    check_len(theta, g)?;
    for (i, seg) in state.segments.iter().enumerate() {
        match state.paths[i].update(&g[seg.range()], state.alpha) {
            Ok(()) => lr_update_paramwise(
                &mut state.multipliers[seg.range()],
                &state.paths[i].p,
                &state.references[i],
                state.gain,
            )?,
            Err(Error::ZeroGradient) => {}
            Err(e) => return Err(e),
        }
    }
    let eta0 = state.eta0;
    for ((t, m), gi) in theta.iter_mut().zip(state.multipliers.iter()).zip(g) {
        *t -= (eta0 * m) * gi;
    }
    Ok(())
}

fn check_len(theta: &[f64], g: &[f64]) -> Result<()> {
    if theta.len() != g.len() {
        return Err(Error::Dimension(format!(
            "parameters have {} entries, gradient has {}",
            theta.len(),
            g.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stateful driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Kind {
    Sgd,
    Nag { velocity: FlatVector },
    Adagrad { accum: FlatVector },
    Adam(AdamState),
    Alera(LayerwiseAgnostic),
    Spalera(ParamwiseAgnostic),
    AgAdam { agnostic: LayerwiseAgnostic, adam: AdamState },
}

#[derive(Debug, Clone)]
struct Recovery {
    detector: Option<PHState>,
    checkpoint: Option<Checkpoint>,
    triggers: u64,
}

/// What happened during one [`Optimizer::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Mean loss of the mini-batch at the evaluated point (the lookahead
    /// point for NAG).
    pub loss: f64,
    /// `rho`-smoothed loss; for SALeRA/SPALeRA this is the detector's signal.
    pub smoothed_loss: f64,
    /// `L - Lmin` after the observation, for the variants that monitor it.
    pub ph_gap: Option<f64>,
    pub ph_delta: Option<f64>,
    pub verdict: Verdict,
    /// Rates before halving, on triggered steps.
    pub rates_before: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    kind: Kind,
    recovery: Option<Recovery>,
    smoothed: f64,
    steps: u64,
    rate_labels: Vec<String>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, partition: &Partition) -> Result<Self> {
        config.validate()?;
        let dim = partition.dim();
        let single = Partition::single(dim)?;
        let layers = if config.layerwise { partition } else { &single };
        let kind = match config.variant {
            Variant::Sgd => Kind::Sgd,
            Variant::Nag => Kind::Nag {
                velocity: FlatVector::zeros(dim),
            },
            Variant::Adagrad => Kind::Adagrad {
                accum: FlatVector::zeros(dim),
            },
            Variant::Adam => Kind::Adam(AdamState::new(dim)),
            Variant::Alera | Variant::Salera => {
                Kind::Alera(LayerwiseAgnostic::new(layers, config.alpha, config.gain, config.eta0)?)
            }
            Variant::AgAdam => Kind::AgAdam {
                agnostic: LayerwiseAgnostic::new(layers, config.alpha, config.gain, config.eta0)?,
                adam: AdamState::new(dim),
            },
            Variant::Spalera => {
                let paths = if config.paramwise_per_layer { partition } else { &single };
                Kind::Spalera(ParamwiseAgnostic::new(paths, config.alpha, config.gain, config.eta0)?)
            }
        };
        let rate_labels = match &kind {
            Kind::Alera(s) | Kind::AgAdam { agnostic: s, .. } => s.segments.iter().map(|s| s.name.clone()).collect(),
            _ => vec!["global".to_string()],
        };
        let recovery = config.variant.is_safe().then_some(Recovery {
            detector: None,
            checkpoint: None,
            triggers: 0,
        });
        Ok(Self {
            config,
            kind,
            recovery,
            smoothed: 0.0,
            steps: 0,
            rate_labels,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Current learning rates: one per layer for the layer-wise agnostic
    /// variants, the global scale otherwise.
    pub fn learning_rates(&self) -> Vec<f64> {
        match &self.kind {
            Kind::Alera(s) | Kind::AgAdam { agnostic: s, .. } => s.etas.clone(),
            Kind::Spalera(s) => vec![s.eta0],
            _ => vec![self.config.eta0],
        }
    }

    pub fn rate_labels(&self) -> &[String] {
        &self.rate_labels
    }

    /// SPALeRA's per-parameter multipliers.
    pub fn multipliers(&self) -> Option<&FlatVector> {
        match &self.kind {
            Kind::Spalera(s) => Some(&s.multipliers),
            _ => None,
        }
    }

    /// Cumulative paths of the agnostic variants, one per path segment.
    pub fn paths(&self) -> Option<&[PathState]> {
        match &self.kind {
            Kind::Alera(s) | Kind::AgAdam { agnostic: s, .. } => Some(&s.paths),
            Kind::Spalera(s) => Some(&s.paths),
            _ => None,
        }
    }

    pub fn detector(&self) -> Option<&PHState> {
        self.recovery.as_ref().and_then(|r| r.detector.as_ref())
    }

    pub fn checkpoint(&self) -> Option<&Checkpoint> {
        self.recovery.as_ref().and_then(|r| r.checkpoint.as_ref())
    }

    pub fn triggers(&self) -> u64 {
        self.recovery.as_ref().map_or(0, |r| r.triggers)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn rates_mut(&mut self) -> &mut [f64] {
        match &mut self.kind {
            Kind::Alera(s) | Kind::AgAdam { agnostic: s, .. } => &mut s.etas,
            Kind::Spalera(s) => std::slice::from_mut(&mut s.eta0),
            _ => std::slice::from_mut(&mut self.config.eta0),
        }
    }

    /// Runs one mini-batch.
    pub fn step<O: Objective>(&mut self, objective: &O, theta: &mut FlatVector, batch: &[usize]) -> Result<StepReport> {
        if theta.len() != objective.partition().dim() {
            return Err(Error::Dimension(format!(
                "parameters have {} entries, objective expects {}",
                theta.len(),
                objective.partition().dim()
            )));
        }
        self.steps += 1;
        let rho = self.config.rho;

        if let Kind::Nag { velocity } = &mut self.kind {
            let mut loss = f64::NAN;
            nag_apply(
                velocity,
                theta,
                |ahead| {
                    let (l, g) = objective.loss_and_grad(ahead, batch);
                    loss = l;
                    g
                },
                self.config.eta0,
                self.config.gamma,
            );
            self.smoothed = rho * loss + (1.0 - rho) * self.smoothed;
            return Ok(StepReport {
                loss,
                smoothed_loss: self.smoothed,
                ph_gap: None,
                ph_delta: None,
                verdict: Verdict::Ok,
                rates_before: None,
            });
        }

        let (loss, pass) = objective.forward(theta, batch);
        let mut report = StepReport {
            loss,
            smoothed_loss: 0.0,
            ph_gap: None,
            ph_delta: None,
            verdict: Verdict::Ok,
            rates_before: None,
        };

        if let Some(rec) = self.recovery.as_mut() {
            if rec.detector.is_none() {
                let detector = match self.config.ph_delta {
                    Some(delta) => PHState::with_delta(delta)?,
                    None => crate::page_hinkley::ph_init(loss, self.config.ph_lambda)?,
                };
                rec.detector = Some(detector.with_warmup(self.config.ph_warmup_batches));
                rec.checkpoint = Some(Checkpoint::new(theta));
            }
            let detector = rec.detector.as_mut().expect("initialized above");
            let verdict = detector.observe(loss, rho);
            report.smoothed_loss = detector.smoothed;
            report.ph_gap = Some(detector.gap());
            report.ph_delta = Some(detector.delta);
            report.verdict = verdict;
            self.smoothed = detector.smoothed;
            if verdict.is_triggered() {
                detector.reset();
                rec.triggers += 1;
                let checkpoint = rec.checkpoint.take().expect("initialized above");
                report.rates_before = Some(self.learning_rates());
                backtrack(theta, &checkpoint, self.rates_mut());
                self.recovery.as_mut().expect("present").checkpoint = Some(checkpoint);
                return Ok(report);
            }
            rec.checkpoint.as_mut().expect("initialized above").save(theta);
        } else {
            self.smoothed = rho * loss + (1.0 - rho) * self.smoothed;
            report.smoothed_loss = self.smoothed;
        }

        let g = objective.backward(theta, pass);
        self.apply_gradient(theta, &g)?;
        Ok(report)
    }

    /// Applies one update from a precomputed gradient, bypassing the forward
    /// pass and change detection. NAG is not supported here since it needs
    /// the gradient at its lookahead point.
    pub fn apply_gradient(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        check_len(theta, g)?;
        let c = &self.config;
        match &mut self.kind {
            Kind::Sgd => sgd_apply(theta, g, c.eta0),
            Kind::Nag { .. } => {
                return Err(Error::Parameter("NAG needs the lookahead gradient; use step".into()));
            }
            Kind::Adagrad { accum } => adagrad_apply(accum, theta, g, c.eta0, c.eps),
            Kind::Adam(state) => adam_apply(state, theta, g, c.eta0, c.beta1, c.beta2, c.eps),
            Kind::Alera(state) => alera_step(state, theta, g)?,
            Kind::Spalera(state) => spalera_update(state, theta, g)?,
            Kind::AgAdam { agnostic, adam } => agadam_step(agnostic, adam, theta, g, c.beta1, c.beta2, c.eps)?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Parabola;
    use crate::vecmath::RngStream;

    /// `0.5 * sum_i a_i (theta_i - c_i)^2` split in two layers, with a
    /// batch-dependent shift of the centers so that gradient directions vary.
    struct Bowl {
        curvature: Vec<f64>,
        center: Vec<f64>,
        partition: Partition,
    }

    impl Bowl {
        fn new(dim: usize, seed: u64) -> Self {
            let mut rng = RngStream::new(seed);
            Self {
                curvature: (0..dim).map(|_| rng.uniform_range(0.5, 2.0)).collect(),
                center: (0..dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                partition: Partition::from_lengths([("a", dim / 2), ("b", dim - dim / 2)]).unwrap(),
            }
        }

        fn shift(&self, batch: &[usize], i: usize) -> f64 {
            batch.first().map_or(0.0, |&b| ((b * 7 + i * 3) % 5) as f64 * 0.05 - 0.1)
        }
    }

    impl Objective for Bowl {
        type Pass = Vec<usize>;

        fn partition(&self) -> &Partition {
            &self.partition
        }

        fn num_examples(&self) -> usize {
            10
        }

        fn forward(&self, params: &[f64], batch: &[usize]) -> (f64, Vec<usize>) {
            let loss = params
                .iter()
                .enumerate()
                .map(|(i, x)| 0.5 * self.curvature[i] * (x - self.center[i] - self.shift(batch, i)).powi(2))
                .sum();
            (loss, batch.to_vec())
        }

        fn backward(&self, params: &[f64], batch: Vec<usize>) -> FlatVector {
            let g = params
                .iter()
                .enumerate()
                .map(|(i, x)| self.curvature[i] * (x - self.center[i] - self.shift(&batch, i)))
                .collect();
            FlatVector::new(g).unwrap()
        }
    }

    fn trajectory(config: OptimizerConfig, steps: usize) -> Vec<FlatVector> {
        let bowl = Bowl::new(6, 3);
        let mut opt = Optimizer::new(config, bowl.partition()).unwrap();
        let mut theta = FlatVector::filled(6, 2.0);
        let mut out = Vec::new();
        for s in 0..steps {
            opt.step(&bowl, &mut theta, &[s % 10]).unwrap();
            out.push(theta.clone());
        }
        out
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("Ag-Adam".parse::<Variant>().unwrap(), Variant::AgAdam);
        assert!("rmsprop".parse::<Variant>().is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut theta = [1.0, 1.0];
        sgd_apply(&mut theta, &[1.0, 0.0], 0.5);
        assert_eq!(theta, [0.5, 1.0]);
        sgd_apply(&mut theta, &[0.0, 0.0], 0.5);
        assert_eq!(theta, [0.5, 1.0]);
        let parabola = Parabola::new(1.0, 1.0).unwrap();
        let mut theta = [1.0];
        sgd_apply(&mut theta, &[parabola.gradient(1.0)], parabola.eta_star());
        assert_eq!(theta, [0.0]);
    }

    #[test]
    fn nag_by_hand_on_a_parabola() {
        let mut v = [0.0];
        let mut theta = [1.0];
        let grad = |x: &[f64]| FlatVector::new(vec![x[0]]).unwrap();
        nag_apply(&mut v, &mut theta, grad, 0.1, 0.9);
        assert!((v[0] + 0.1).abs() < 1e-15 && (theta[0] - 0.9).abs() < 1e-15);
        nag_apply(&mut v, &mut theta, grad, 0.1, 0.9);
        assert!((v[0] + 0.171).abs() < 1e-15, "{}", v[0]);
        assert!((theta[0] - 0.729).abs() < 1e-15, "{}", theta[0]);
    }

    #[test]
    fn nag_without_momentum_is_sgd() {
        let mut nag = OptimizerConfig::new(Variant::Nag, 0.05);
        nag.gamma = 0.0;
        assert_eq!(trajectory(nag, 50), trajectory(OptimizerConfig::new(Variant::Sgd, 0.05), 50));
    }

    #[test]
    fn adagrad_examples() {
        let mut acc = [0.0];
        let mut theta = [0.0];
        adagrad_apply(&mut acc, &mut theta, &[3.0], 1.0, 0.0);
        assert_eq!(theta, [-1.0]);
        adagrad_apply(&mut acc, &mut theta, &[3.0], 1.0, 0.0);
        assert!((theta[0] - (-1.0 - 3.0 / 18f64.sqrt())).abs() < 1e-15);

        let mut acc = [0.0, 0.0];
        let mut theta = [0.3, -0.2];
        for _ in 0..5 {
            adagrad_apply(&mut acc, &mut theta, &[-4.0, 0.0], 0.1, 1e-8);
        }
        assert_eq!(theta[1], -0.2);
    }

    #[test]
    fn adam_examples() {
        let mut s = AdamState::new(1);
        let mut theta = [0.0];
        adam_apply(&mut s, &mut theta, &[2.0], 0.1, 0.9, 0.999, 1e-8);
        let expected = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-16);
        assert!((theta[0] + 0.0999999995).abs() < 1e-12);

        let mut s = AdamState::new(3);
        let mut theta = [1.0, 2.0, 3.0];
        for _ in 0..10 {
            adam_apply(&mut s, &mut theta, &[0.0; 3], 0.1, 0.9, 0.999, 1e-8);
        }
        assert_eq!(theta, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn alera_two_coherent_steps_raise_the_rate() {
        let partition = Partition::single(3).unwrap();
        let mut state = LayerwiseAgnostic::new(&partition, 0.5, 0.1, 0.01).unwrap();
        let mut theta = [0.0; 3];
        let g = [1.0, 2.0, 2.0];
        alera_step(&mut state, &mut theta, &g).unwrap();
        let eta1 = state.etas[0];
        alera_step(&mut state, &mut theta, &g).unwrap();
        assert!((state.paths[0].norm_sq() - 0.5625).abs() < 1e-15);
        assert!(state.references[0].mean < 0.5625);
        assert!(state.etas[0] > eta1);
    }

    #[test]
    fn alera_at_reference_mean_is_plain_sgd() {
        let partition = Partition::single(2).unwrap();
        let mut state = LayerwiseAgnostic::new(&partition, 0.5, 1.0, 0.1).unwrap();
        // one step with alpha = 0.5 from p = 0 gives |p|^2 = 0.25; start from
        // a path whose update lands exactly on |p|^2 = 1/3
        let mu = state.references[0].mean;
        let target = mu.sqrt();
        state.paths[0].p[0] = (target - 0.5) / 0.5;
        let mut theta = [1.0, 1.0];
        alera_step(&mut state, &mut theta, &[1.0, 0.0]).unwrap();
        assert!((state.paths[0].norm_sq() - mu).abs() < 1e-15);
        assert!((state.etas[0] - 0.1).abs() < 1e-13);
        assert!((theta[0] - 0.9).abs() < 1e-13);
    }

    #[test]
    fn zero_layer_gradient_skips_that_layer() {
        let partition = Partition::from_lengths([("a", 2), ("b", 2)]).unwrap();
        let mut state = LayerwiseAgnostic::new(&partition, 0.1, 1.0, 0.1).unwrap();
        let mut theta = [1.0; 4];
        alera_step(&mut state, &mut theta, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(state.paths[1].t, 0);
        assert_eq!(state.etas[1], 0.1);
        assert_eq!(&theta[2..], &[1.0, 1.0]);
        assert_eq!(state.paths[0].t, 1);
    }

    #[test]
    fn layerwise_off_uses_one_global_path() {
        let bowl = Bowl::new(6, 1);
        let mut cfg = OptimizerConfig::new(Variant::Alera, 0.05);
        cfg.layerwise = false;
        let opt = Optimizer::new(cfg, bowl.partition()).unwrap();
        assert_eq!(opt.learning_rates().len(), 1);
        assert_eq!(opt.paths().unwrap()[0].dim(), 6);
    }

    #[test]
    fn equivalences_are_bitwise() {
        let mut alera = OptimizerConfig::new(Variant::Alera, 0.05);
        alera.alpha = 0.1;
        alera.gain = 0.02;
        let mut salera = alera.clone();
        salera.variant = Variant::Salera;
        salera.ph_delta = Some(f64::INFINITY);
        assert_eq!(trajectory(salera, 100), trajectory(alera.clone(), 100));

        let mut flat = alera.clone();
        flat.gain = 0.0;
        assert_eq!(trajectory(flat, 100), trajectory(OptimizerConfig::new(Variant::Sgd, 0.05), 100));

        let mut ag = OptimizerConfig::new(Variant::AgAdam, 0.05);
        ag.gain = 0.0;
        assert_eq!(trajectory(ag, 100), trajectory(OptimizerConfig::new(Variant::Adam, 0.05), 100));
    }

    #[test]
    fn agadam_rates_grow_on_coherent_gradients() {
        let partition = Partition::single(4).unwrap();
        let mut ag = LayerwiseAgnostic::new(&partition, 0.1, 0.01, 0.01).unwrap();
        let mut adam_ag = AdamState::new(4);
        let mut adam = AdamState::new(4);
        let g = [1.0, -1.0, 0.5, 2.0];
        let (mut th_ag, mut th) = ([0.0; 4], [0.0; 4]);
        for _ in 0..200 {
            let before_ag = th_ag;
            let before = th;
            agadam_step(&mut ag, &mut adam_ag, &mut th_ag, &g, 0.9, 0.999, 1e-8).unwrap();
            adam_apply(&mut adam, &mut th, &g, 0.01, 0.9, 0.999, 1e-8);
            let _ = (before_ag, before);
        }
        let step_ag = (th_ag[0] - 0.0).abs();
        let step = th[0].abs();
        assert!(ag.etas[0] > 0.01);
        assert!(step_ag > step);
    }

    #[test]
    fn spalera_at_reference_is_sgd_and_halving_hits_the_scale() {
        let partition = Partition::single(4).unwrap();
        let mut s = ParamwiseAgnostic::new(&partition, 0.1, 1e-3, 0.05).unwrap();
        let mut theta = [1.0; 4];
        // gradient direction (1,1,1,1)/2, fresh path: p_i = 0.05, p_i^2 = 0.0025
        spalera_update(&mut s, &mut theta, &[1.0; 4]).unwrap();
        assert!(s.multipliers.iter().all(|&m| m < 1.0));

        let mut opt = Optimizer::new(OptimizerConfig::new(Variant::Spalera, 0.2), &Partition::single(1).unwrap()).unwrap();
        let parabola = Parabola::new(1.0, 1.0).unwrap();
        let mut theta = FlatVector::new(vec![1.0]).unwrap();
        let before = opt.multipliers().unwrap().clone();
        // rho = 0.01 and a positive first loss: force a trigger with a tiny delta
        opt.config.ph_delta = Some(1e-12);
        let r = opt.step(&parabola, &mut theta, &[0]).unwrap();
        assert!(r.verdict.is_triggered());
        assert_eq!(opt.learning_rates(), vec![0.1]);
        assert_eq!(opt.multipliers().unwrap(), &before);
        assert_eq!(theta[0], 1.0);
    }

    #[test]
    fn spalera_in_one_dimension_tracks_global_salera() {
        let parabola = Parabola::with_points(1.0, 3.0, 10).unwrap();
        let mut base = OptimizerConfig::new(Variant::Salera, 0.3);
        base.alpha = 0.2;
        base.gain = 0.05;
        base.rho = 0.1;
        base.layerwise = false;
        let mut pw = base.clone();
        pw.variant = Variant::Spalera;
        let mut a = Optimizer::new(base, parabola.partition()).unwrap();
        let mut b = Optimizer::new(pw, parabola.partition()).unwrap();
        let mut ta = FlatVector::new(vec![3.0]).unwrap();
        let mut tb = ta.clone();
        for s in 0..200 {
            let ra = a.step(&parabola, &mut ta, &[s % 10]).unwrap();
            let rb = b.step(&parabola, &mut tb, &[s % 10]).unwrap();
            assert_eq!(ra.verdict, rb.verdict);
            assert!((ta[0] - tb[0]).abs() <= 1e-12 * (1.0 + ta[0].abs()));
            let eff = b.learning_rates()[0] * b.multipliers().unwrap()[0];
            assert!((a.learning_rates()[0] - eff).abs() <= 1e-12 * eff);
        }
    }

    #[test]
    fn salera_recovers_from_a_divergent_rate() {
        let parabola = Parabola::with_points(1.0, 1.0, 10).unwrap();
        let mut cfg = OptimizerConfig::new(Variant::Salera, 4.0);
        cfg.alpha = 0.1;
        cfg.gain = 1e-3;
        cfg.rho = 0.1;
        let mut opt = Optimizer::new(cfg, parabola.partition()).unwrap();
        let mut theta = FlatVector::new(vec![1.0]).unwrap();
        let mut reached = false;
        for s in 0..200 {
            opt.step(&parabola, &mut theta, &[s % 10]).unwrap();
            if parabola.value(theta[0]) < 0.5 {
                reached = true;
                break;
            }
        }
        assert!(opt.triggers() >= 1);
        assert!(opt.learning_rates()[0] < 2.0);
        assert!(reached);
    }

    #[test]
    fn repeated_triggers_halve_geometrically_and_pin_theta() {
        let bowl = Bowl::new(4, 9);
        let mut cfg = OptimizerConfig::new(Variant::Salera, 0.8);
        cfg.ph_delta = Some(1e-300);
        cfg.rho = 1.0;
        let mut opt = Optimizer::new(cfg, bowl.partition()).unwrap();
        let start = FlatVector::filled(4, 0.5);
        let mut theta = start.clone();
        for k in 1..=6 {
            let r = opt.step(&bowl, &mut theta, &[0]).unwrap();
            assert!(r.verdict.is_triggered());
            assert_eq!(theta, start);
            for eta in opt.learning_rates() {
                assert_eq!(eta, 0.8 / 2f64.powi(k));
            }
        }
    }

    #[test]
    fn nan_loss_triggers_a_backtrack() {
        struct Blowup(Partition);
        impl Objective for Blowup {
            type Pass = ();
            fn partition(&self) -> &Partition {
                &self.0
            }
            fn num_examples(&self) -> usize {
                1
            }
            fn forward(&self, params: &[f64], _: &[usize]) -> (f64, ()) {
                (if params[0] > 1.5 { f64::NAN } else { 1.0 + params[0] }, ())
            }
            fn backward(&self, _: &[f64], _: ()) -> FlatVector {
                FlatVector::new(vec![-1.0]).unwrap()
            }
        }
        let obj = Blowup(Partition::single(1).unwrap());
        let mut cfg = OptimizerConfig::new(Variant::Salera, 1.0);
        cfg.ph_delta = Some(1e9);
        let mut opt = Optimizer::new(cfg, obj.partition()).unwrap();
        let mut theta = FlatVector::new(vec![1.0]).unwrap();
        opt.step(&obj, &mut theta, &[0]).unwrap();
        assert!(theta[0] > 1.5);
        let r = opt.step(&obj, &mut theta, &[0]).unwrap();
        assert_eq!(r.verdict, Verdict::NonFinite);
        assert_eq!(theta[0], 1.0);
    }

    #[test]
    fn restored_point_reproduces_the_checkpoint_loss() {
        let bowl = Bowl::new(6, 11);
        let mut cfg = OptimizerConfig::new(Variant::Salera, 3.0);
        cfg.alpha = 0.1;
        cfg.gain = 0.01;
        cfg.rho = 0.5;
        let mut opt = Optimizer::new(cfg, bowl.partition()).unwrap();
        let initial = FlatVector::filled(6, 2.0);
        let mut theta = initial.clone();
        let mut saw_trigger = false;
        for s in 0..100 {
            let batch = [s % 10];
            let before = Some(opt.checkpoint().map_or_else(|| initial.clone(), |c| c.saved().clone()));
            let r = opt.step(&bowl, &mut theta, &batch).unwrap();
            if r.verdict.is_triggered() {
                saw_trigger = true;
                assert_eq!(Some(theta.clone()), before);
                let saved_loss = bowl.forward(before.as_ref().unwrap(), &batch).0;
                assert_eq!(bowl.forward(&theta, &batch).0, saved_loss);
            }
        }
        assert!(saw_trigger);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        struct Flat(Partition);
        impl Objective for Flat {
            type Pass = ();
            fn partition(&self) -> &Partition {
                &self.0
            }
            fn num_examples(&self) -> usize {
                1
            }
            fn forward(&self, _: &[f64], _: &[usize]) -> (f64, ()) {
                (1.0, ())
            }
            fn backward(&self, _: &[f64], _: ()) -> FlatVector {
                FlatVector::zeros(4)
            }
        }
        let obj = Flat(Partition::from_lengths([("a", 1), ("b", 3)]).unwrap());
        for variant in Variant::ALL {
            let mut cfg = OptimizerConfig::new(variant, 0.1);
            cfg.ph_delta = Some(f64::INFINITY);
            let mut opt = Optimizer::new(cfg, obj.partition()).unwrap();
            let mut theta = FlatVector::new(vec![0.1, -0.2, 0.3, 0.4]).unwrap();
            let start = theta.clone();
            for _ in 0..20 {
                opt.step(&obj, &mut theta, &[0]).unwrap();
            }
            assert_eq!(theta, start, "{variant}");
        }
    }

    #[test]
    fn rates_stay_positive_and_paths_stay_in_the_unit_ball() {
        for variant in [Variant::Alera, Variant::Salera, Variant::Spalera, Variant::AgAdam] {
            let mut cfg = OptimizerConfig::new(variant, 0.5);
            cfg.alpha = 0.25;
            cfg.gain = 5.0;
            cfg.rho = 0.3;
            let bowl = Bowl::new(6, 21);
            let mut opt = Optimizer::new(cfg, bowl.partition()).unwrap();
            let mut theta = FlatVector::filled(6, 1.0);
            for s in 0..300 {
                // an exploding plain variant may stop producing finite gradients
                let _ = opt.step(&bowl, &mut theta, &[s % 10]);
                assert!(opt.learning_rates().iter().all(|&e| e > 0.0), "{variant}");
                if let Some(m) = opt.multipliers() {
                    assert!(m.iter().all(|&x| x > 0.0));
                }
                for p in opt.paths().unwrap() {
                    assert!(p.norm_sq() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::new(Variant::Sgd, 0.0).validate().is_err());
        let mut c = OptimizerConfig::new(Variant::Alera, 0.1);
        c.alpha = 1.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::new(Variant::Nag, 0.1);
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::new(Variant::Adam, 0.1);
        c.beta2 = 0.0;
        assert!(c.validate().is_err());
    }
}
