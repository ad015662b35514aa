//! Self-checks behind the `verify` subcommand. Each returns one verdict per
//! check; a failing check is a verdict, not an error.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agnostic::{mean_t, var_t};
use crate::analysis::{argmin_j, cost_j, default_zeta_grid, monte_carlo_rt, MomentComparison};
use crate::nn::{max_relative_gradient_error, random_instance, Architecture};
use crate::vecmath::RngStream;
use crate::Result;

pub const MOMENT_ALPHAS: [f64; 3] = [0.01, 0.1, 0.25];
pub const MOMENT_DIMS: [usize; 3] = [10, 100, 1000];
pub const MOMENT_HORIZONS: [u64; 3] = [2, 10, 100];
pub const MOMENT_REPS: usize = 10_000;
/// Allowed `|mean_est - mean_t|` in standard errors.
pub const MEAN_Z: f64 = 4.0;
/// Allowed `|var_est / var_t - 1|`.
pub const VAR_REL: f64 = 0.10;
pub const ZETA_CONSTANTS: [f64; 3] = [1e-3, 1e-2, 1e-1];
pub const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} {}", self.name, self.detail)
    }
}

/// Monte Carlo against the closed-form moments on the full
/// `alpha x d x t` grid, plus the exact `t = 1` identities.
pub fn verify_moments(n_reps: usize, seed: u64) -> Result<(Vec<Check>, Vec<MomentComparison>)> {
    let root = RngStream::new(seed);
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for alpha in MOMENT_ALPHAS {
        checks.push(Check {
            name: format!("moments.t1 alpha={alpha}"),
            pass: mean_t(alpha, 1)? == alpha * alpha && MOMENT_DIMS.iter().all(|&d| matches!(var_t(alpha, d, 1), Ok(v) if v == 0.0)),
            detail: format!("mean_t(alpha,1)={:e} var_t(alpha,d,1)=0", mean_t(alpha, 1)?),
        });
    }
    let mut cell = 0u64;
    for alpha in MOMENT_ALPHAS {
        for d in MOMENT_DIMS {
            for t in MOMENT_HORIZONS {
                let est = monte_carlo_rt(alpha, d, t, n_reps, &root.substream(cell))?;
                cell += 1;
                let row = MomentComparison::new(est)?;
                let z = row.mean_z();
                let rel = row.var_rel_error();
                checks.push(Check {
                    name: format!("moments alpha={alpha} d={d} t={t}"),
                    pass: z <= MEAN_Z && rel.abs() <= VAR_REL,
                    detail: format!(
                        "mean_z={z:.2} var_est/var_t-1={rel:+.4} var_est/var_exact-1={:+.4}",
                        row.var_exact_rel_error()
                    ),
                });
                rows.push(row);
            }
        }
    }
    Ok((checks, rows))
}

pub fn verify_zeta() -> Result<Vec<Check>> {
    let grid = default_zeta_grid();
    let mut checks = Vec::new();
    for c in ZETA_CONSTANTS {
        let (z, j) = argmin_j(c, &grid)?;
        let j2 = cost_j(2.0, c)?;
        checks.push(Check {
            name: format!("zeta.argmin C={c}"),
            pass: z > 3.0 && z < 5.0 && j <= j2,
            detail: format!("zeta*={z:.4} J(zeta*)={j:.6} J(2)={j2:.6}"),
        });
    }
    let (j2, j4) = (cost_j(2.0, 0.01)?, cost_j(4.0, 0.01)?);
    checks.push(Check {
        name: "zeta.values C=0.01".into(),
        pass: (j2 - 0.20757).abs() <= 1e-4 && (j4 - 0.16155).abs() <= 1e-4 && j4 < j2,
        detail: format!("J(2)={j2:.6} J(4)={j4:.6}"),
    });
    Ok(checks)
}

/// Finite differences on small random softmax-regression and two-hidden-layer
/// networks.
pub fn verify_gradcheck(seed: u64) -> Result<Vec<Check>> {
    let cases = [
        ("m0", Architecture::m0(4, 4)?),
        ("m0", Architecture::m0(12, 10)?),
        ("m2", Architecture::m2(6, (8, 5), 4)?),
        ("m2", Architecture::m2(10, (12, 8), 10)?),
    ];
    let mut checks = Vec::new();
    for (i, (name, arch)) in cases.iter().enumerate() {
        let mut rng = RngStream::new(seed).substream(i as u64);
        let (params, x, labels) = random_instance(arch, 8, &mut rng);
        let err = max_relative_gradient_error(arch, &params, x.view(), &labels, 1e-6)?;
        checks.push(Check {
            name: format!("gradcheck {name} params={}", arch.num_params()),
            pass: err < GRADCHECK_TOL,
            detail: format!("max_rel_err={err:.3e}"),
        });
    }
    Ok(checks)
}
