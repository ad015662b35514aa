//! Monte Carlo estimates of the reference-path moments and the cost model
//! for the learning-rate dividing factor.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agnostic::{mean_t, var_t, var_t_exact};
use crate::vecmath::{dot, fill_unit_vector, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub alpha: f64,
    pub d: usize,
    pub t: u64,
    pub n_reps: usize,
    pub mean_est: f64,
    /// Unbiased sample variance of `|r_t|^2`.
    pub var_est: f64,
    pub stderr_mean: f64,
}

/// Simulates `n_reps` independent reference walks of `t` steps in dimension
/// `d`. Replica `i` draws from `rng.substream(i)`, so the result does not
/// depend on how replicas are scheduled across threads.
///
/// `|r_t|^2` is tracked through
/// `|r_t|^2 = q |r_{t-1}|^2 + 2 a (1-a) <r_{t-1}, u_t> + a^2` with
/// `q = (1-a)^2`, using `|u_t| = 1`; at `t = 1` every replica yields
/// `a^2` exactly.
pub fn monte_carlo_rt(alpha: f64, d: usize, t: u64, n_reps: usize, rng: &RngStream) -> Result<MomentEstimate> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("memory rate must lie in (0, 1], got {alpha}")));
    }
    if d == 0 || t == 0 {
        return Err(Error::Parameter("dimension and horizon must be at least 1".into()));
    }
    if n_reps < 2 {
        return Err(Error::Parameter(format!("need at least 2 replicas, got {n_reps}")));
    }
    let samples: Vec<f64> = (0..n_reps as u64)
        .into_par_iter()
        .map_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(r, u), i| {
                let mut rng = rng.substream(i);
                r.iter_mut().for_each(|x| *x = 0.0);
                let keep = 1.0 - alpha;
                let q = keep * keep;
                let mut n2 = 0.0;
                for _ in 0..t {
                    fill_unit_vector(u, &mut rng);
                    n2 = q * n2 + 2.0 * alpha * keep * dot(r, u) + alpha * alpha;
                    for (ri, ui) in r.iter_mut().zip(u.iter()) {
                        *ri = keep * *ri + alpha * ui;
                    }
                }
                n2
            },
        )
        .collect();
    let n = n_reps as f64;
    let mean = compensated_sum(samples.iter().copied()) / n;
    let var = compensated_sum(samples.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0);
    Ok(MomentEstimate {
        alpha,
        d,
        t,
        n_reps,
        mean_est: mean,
        var_est: var,
        stderr_mean: (var / n).sqrt(),
    })
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// A simulated cell next to the closed forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentComparison {
    pub estimate: MomentEstimate,
    pub mean_closed: f64,
    pub var_closed: f64,
    pub var_exact: f64,
}

impl MomentComparison {
    pub fn new(estimate: MomentEstimate) -> Result<Self> {
        let (a, d, t) = (estimate.alpha, estimate.d, estimate.t);
        Ok(Self {
            mean_closed: mean_t(a, t)?,
            var_closed: var_t(a, d, t)?,
            var_exact: var_t_exact(a, d, t)?,
            estimate,
        })
    }

    /// `|mean_est - mean_t|` in units of the standard error.
    pub fn mean_z(&self) -> f64 {
        let e = &self.estimate;
        if e.stderr_mean == 0.0 {
            return if e.mean_est == self.mean_closed { 0.0 } else { f64::INFINITY };
        }
        (e.mean_est - self.mean_closed).abs() / e.stderr_mean
    }

    /// `var_est / var_t - 1`.
    pub fn var_rel_error(&self) -> f64 {
        self.estimate.var_est / self.var_closed - 1.0
    }

    /// `var_est / var_t_exact - 1`.
    pub fn var_exact_rel_error(&self) -> f64 {
        self.estimate.var_est / self.var_exact - 1.0
    }
}

pub fn write_moments_csv(path: &Path, rows: &[MomentComparison]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "alpha",
        "d",
        "t",
        "n_reps",
        "mean_closed",
        "mean_est",
        "stderr_mean",
        "var_closed",
        "var_exact",
        "var_est",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let e = &r.estimate;
        w.write_record([
            e.alpha.to_string(),
            e.d.to_string(),
            e.t.to_string(),
            e.n_reps.to_string(),
            r.mean_closed.to_string(),
            e.mean_est.to_string(),
            e.stderr_mean.to_string(),
            r.var_closed.to_string(),
            r.var_exact.to_string(),
            e.var_est.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const LN2: f64 = std::f64::consts::LN_2;

/// Time spent at rates in the safe half of the interval: `(log 2 - 1/2) / eps`.
pub fn cost_t(eps_rate: f64) -> Result<f64> {
    check_eps(eps_rate)?;
    Ok((LN2 - 0.5) / eps_rate)
}

/// Time to climb back from `eta / zeta`:
/// `(1/2 - log(zeta)/zeta - (1 - log 2)/zeta) / eps`.
pub fn cost_u(zeta: f64, eps_rate: f64) -> Result<f64> {
    check_eps(eps_rate)?;
    if !(zeta >= 2.0) {
        return Err(Error::Domain(format!("U is defined for zeta >= 2, got {zeta}")));
    }
    Ok(u_bracket(zeta) / eps_rate)
}

fn u_bracket(zeta: f64) -> f64 {
    0.5 - zeta.ln() / zeta - (1.0 - LN2) / zeta
}

fn check_eps(eps_rate: f64) -> Result<()> {
    if !(eps_rate > 0.0 && eps_rate.is_finite()) {
        return Err(Error::Parameter(format!("rate increase must be positive, got {eps_rate}")));
    }
    Ok(())
}

/// `J(zeta) = C/log(zeta) + (zeta-2)/(2(zeta-1)) * U + zeta/(2(zeta-1)) * T`
/// with `U` and `T` scaled by `eps`. Below `zeta = 2` the `U` bracket is used
/// as written.
pub fn cost_j(zeta: f64, c_const: f64) -> Result<f64> {
    if !(zeta > 1.0) {
        return Err(Error::Domain(format!("J is defined for zeta > 1, got {zeta}")));
    }
    if !(c_const > 0.0) {
        return Err(Error::Parameter(format!("cost constant must be positive, got {c_const}")));
    }
    let w = zeta - 1.0;
    Ok(c_const / zeta.ln() + 0.5 * (zeta - 2.0) / w * u_bracket(zeta) + 0.5 * zeta / w * (LN2 - 0.5))
}

/// `[low, high]` in steps of `step` (the upper end included when hit).
pub fn zeta_grid(low: f64, high: f64, step: f64) -> Vec<f64> {
    let n = ((high - low) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| low + i as f64 * step).collect()
}

/// The default grid `[1.05, 20]`, step `0.01`.
pub fn default_zeta_grid() -> Vec<f64> {
    zeta_grid(1.05, 20.0, 0.01)
}

/// Grid minimum of `J`, refined by the vertex of the parabola through the
/// minimum and its two neighbours when that improves on the grid value.
pub fn argmin_j(c_const: f64, grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::Parameter("empty zeta grid".into()));
    }
    let values = grid.iter().map(|&z| cost_j(z, c_const)).collect::<Result<Vec<_>>>()?;
    let (i, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let (mut best_z, mut best_j) = (grid[i], values[i]);
    if i > 0 && i + 1 < grid.len() {
        let (x0, x1, x2) = (grid[i - 1], grid[i], grid[i + 1]);
        let (y0, y1, y2) = (values[i - 1], values[i], values[i + 1]);
        let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
        let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
        let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
        if a > 0.0 {
            let vertex = (-b / (2.0 * a)).clamp(x0, x2);
            let jv = cost_j(vertex, c_const)?;
            if jv < best_j {
                best_z = vertex;
                best_j = jv;
            }
        }
    }
    Ok((best_z, best_j))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub c_const: f64,
    pub points: Vec<(f64, f64)>,
    pub argmin: f64,
    pub min: f64,
}

pub fn cost_curve(c_const: f64, grid: &[f64]) -> Result<CostCurve> {
    let points = grid
        .iter()
        .map(|&z| cost_j(z, c_const).map(|j| (z, j)))
        .collect::<Result<Vec<_>>>()?;
    let (argmin, min) = argmin_j(c_const, grid)?;
    Ok(CostCurve {
        c_const,
        points,
        argmin,
        min,
    })
}

pub fn write_cost_csv(path: &Path, curve: &CostCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["zeta", "j"]).map_err(|e| Error::csv(path, e))?;
    for (z, j) in &curve.points {
        w.write_record([z.to_string(), j.to_string()]).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_is_deterministic() {
        for (alpha, d) in [(0.01, 10), (0.25, 3), (0.7, 100)] {
            let e = monte_carlo_rt(alpha, d, 1, 200, &RngStream::new(1)).unwrap();
            assert_eq!(e.mean_est, alpha * alpha);
            assert_eq!(e.var_est, 0.0);
            assert_eq!(e.stderr_mean, 0.0);
        }
    }

    #[test]
    fn two_step_mean_matches_closed_form() {
        let e = monte_carlo_rt(0.1, 10, 2, 10_000, &RngStream::new(2)).unwrap();
        let mu = mean_t(0.1, 2).unwrap();
        assert!((mu - 0.0181).abs() < 1e-12);
        assert!((e.mean_est - mu).abs() <= 4.0 * e.stderr_mean);
        // the exact second moment is the sharper oracle
        let exact = var_t_exact(0.1, 10, 2).unwrap();
        assert!((e.var_est / exact - 1.0).abs() < 0.1, "{} vs {exact}", e.var_est);
    }

    #[test]
    fn replicas_do_not_depend_on_thread_count() {
        let rng = RngStream::new(5);
        let a = monte_carlo_rt(0.25, 7, 5, 300, &rng).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| monte_carlo_rt(0.25, 7, 5, 300, &rng).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn cost_examples() {
        assert!((cost_t(1.0).unwrap() - 0.193147).abs() < 1e-6);
        assert!((cost_t(0.5).unwrap() - 2.0 * 0.193147).abs() < 1e-5);
        assert!(cost_u(2.0, 1.0).unwrap().abs() < 1e-15);
        let u4 = 0.5 - 4f64.ln() / 4.0 - (1.0 - 2f64.ln()) / 4.0;
        assert!((cost_u(4.0, 1.0).unwrap() - u4).abs() < 1e-15);
        assert!((u4 - 0.076713).abs() < 1e-6);
        assert!(matches!(cost_u(1.5, 1.0), Err(Error::Domain(_))));
        assert!((cost_j(2.0, 0.01).unwrap() - 0.20757).abs() < 1e-4);
        assert!((cost_j(4.0, 0.01).unwrap() - 0.16155).abs() < 1e-4);
        assert!(matches!(cost_j(1.0, 0.01), Err(Error::Domain(_))));
    }

    #[test]
    fn minimum_between_three_and_five() {
        let grid = default_zeta_grid();
        assert_eq!(grid.len(), 1896);
        assert!((grid[grid.len() - 1] - 20.0).abs() < 1e-9);
        for c in [1e-3, 1e-2, 1e-1] {
            let (z, j) = argmin_j(c, &grid).unwrap();
            assert!(z > 3.0 && z < 5.0, "C = {c}: zeta* = {z}");
            assert!(j <= cost_j(2.0, c).unwrap());
            let grid_min = grid.iter().map(|&x| cost_j(x, c).unwrap()).fold(f64::INFINITY, f64::min);
            assert!(j <= grid_min);
        }
    }

    #[test]
    fn large_cost_constant_pushes_the_minimum_out() {
        let grid = default_zeta_grid();
        let mut last = 0.0;
        for c in [0.1, 1.0, 10.0, 1000.0] {
            let (z, _) = argmin_j(c, &grid).unwrap();
            assert!(z >= last);
            last = z;
        }
        assert!((last - 20.0).abs() < 1e-9);
    }

    #[test]
    fn small_constants_are_indistinguishable() {
        let bound = 0.0009 / 1.05f64.ln();
        for z in default_zeta_grid() {
            let diff = (cost_j(z, 1e-3).unwrap() - cost_j(z, 1e-4).unwrap()).abs();
            assert!(diff <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let curve = cost_curve(0.01, &zeta_grid(1.5, 3.0, 0.5)).unwrap();
        let p = dir.path().join("j.csv");
        write_cost_csv(&p, &curve).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("zeta,j"));
        assert_eq!(text.lines().count(), 5);

        let row = MomentComparison::new(monte_carlo_rt(0.1, 5, 3, 100, &RngStream::new(0)).unwrap()).unwrap();
        let p = dir.path().join("m.csv");
        write_moments_csv(&p, &[row]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }

    proptest! {
        #[test]
        fn j_is_finite_above_one(z in 1.0001f64..50.0, c in 1e-6f64..10.0) {
            prop_assert!(cost_j(z, c).unwrap().is_finite());
        }
    }
}
