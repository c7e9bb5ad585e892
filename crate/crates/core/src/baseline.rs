//! Ridge-fused comparator
//!
//! ```text
//! minimize  Σ_i ‖Y_i − Φ_iθ_i‖² + λ Σ_i ‖θ − θ_i‖₂²
//! ```
//!
//! Stationarity gives `(G_i + λI)θ_i = b_i + λθ` with `G_i = Φ_iᵀΦ_i`,
//! `b_i = Φ_iᵀY_i`, and `θ = mean_i θ_i`. Eliminating the `θ_i` leaves
//! `[Σ_i (G_i + λI)⁻¹G_i] θ = Σ_i (G_i + λI)⁻¹b_i`, whose matrix is symmetric
//! because `G_i` and `(G_i + λI)⁻¹` commute. Deviations are generically all
//! nonzero, so anomalies must be picked out by a threshold.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{FleetError, Result};
use crate::linalg;
use crate::model::{residual_sse, solve_normal_equations, support, Diagnostics, FleetDataset, PNorm, Solution};
use crate::par::{self, Execution};

/// Joint ridge estimate; systems whose deviation exceeds `threshold` are
/// flagged.
pub fn solve_tikhonov(fleet: &FleetDataset, lambda: f64, threshold: f64) -> Result<Solution> {
    solve_tikhonov_with(fleet, lambda, threshold, Execution::default())
}

pub fn solve_tikhonov_with(
    fleet: &FleetDataset,
    lambda: f64,
    threshold: f64,
    execution: Execution,
) -> Result<Solution> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(FleetError::domain("lambda must be finite and nonnegative"));
    }
    if !(threshold >= 0.0) {
        return Err(FleetError::domain("threshold must be nonnegative"));
    }
    let stats = fleet.stats();
    let m = stats.dim();
    let n = stats.systems.len();

    let per_system: Vec<DVector<f64>>;
    let nominal: DVector<f64>;
    if lambda == 0.0 {
        per_system = par::try_map(execution, &stats.systems, |i, s| {
            solve_normal_equations(&s.gram, &s.moment, &format!("least squares of system {}", i + 1))
        })?;
        nominal = mean(&per_system, m);
    } else {
        let eig: Vec<SymmetricEigen<f64, nalgebra::Dyn>> =
            par::map(execution, &stats.systems, |_, s| s.gram.clone().symmetric_eigen());
        let mut lhs = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (e, s) in eig.iter().zip(&stats.systems) {
            let v = &e.eigenvectors;
            let h = e.eigenvalues.map(|h| h.max(0.0));
            let shrink = h.map(|h| h / (h + lambda));
            let inv = h.map(|h| 1.0 / (h + lambda));
            lhs += v * DMatrix::from_diagonal(&shrink) * v.transpose();
            rhs += v * inv.component_mul(&(v.tr_mul(&s.moment)));
        }
        lhs = (&lhs + lhs.transpose()) * 0.5;
        let chol = linalg::spd_factor(&lhs, "ridge-fused nominal equations")?;
        let mut theta = chol.solve(&rhs);
        theta += chol.solve(&(&rhs - &lhs * &theta));
        per_system = par::try_map(execution, &stats.systems, |i, s| {
            let a = &s.gram + DMatrix::identity(m, m) * lambda;
            let rhs = &s.moment + &theta * lambda;
            solve_normal_equations(&a, &rhs, &format!("ridge block of system {}", i + 1))
        })?;
        nominal = theta;
    }

    let mut obj = 0.0;
    for (s, t) in fleet.systems().iter().zip(&per_system) {
        obj += residual_sse(s, t)? + lambda * (t - &nominal).norm_squared();
    }
    debug_assert_eq!(per_system.len(), n);
    Ok(Solution::new(
        nominal,
        per_system,
        lambda,
        PNorm::L2,
        threshold,
        obj,
        Diagnostics {
            method: "tikhonov".into(),
            converged: true,
            objective_history: vec![obj],
            ..Diagnostics::default()
        },
    ))
}

fn mean(v: &[DVector<f64>], m: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(m);
    for x in v {
        acc += x;
    }
    acc / v.len().max(1) as f64
}

/// Flagged set at a threshold and how cleanly it separates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    /// Zero-based.
    pub flagged: Vec<usize>,
    pub smallest_flagged: Option<f64>,
    pub largest_unflagged: Option<f64>,
    /// `smallest_flagged / largest_unflagged`; infinite when every unflagged
    /// deviation is exactly zero or nothing is left unflagged, `None` when
    /// nothing is flagged.
    pub margin_ratio: Option<f64>,
}

pub fn threshold_report(sol: &Solution, threshold: f64) -> ThresholdReport {
    let flagged = support(&sol.deviations, threshold);
    let mut smallest: Option<f64> = None;
    let mut largest: Option<f64> = None;
    for (i, &d) in sol.deviations.iter().enumerate() {
        if flagged.binary_search(&i).is_ok() {
            smallest = Some(smallest.map_or(d, |s| s.min(d)));
        } else {
            largest = Some(largest.map_or(d, |l| l.max(d)));
        }
    }
    let margin_ratio = smallest.map(|s| match largest {
        Some(l) if l > 0.0 => s / l,
        _ => f64::INFINITY,
    });
    ThresholdReport {
        threshold,
        flagged,
        smallest_flagged: smallest,
        largest_unflagged: largest,
        margin_ratio,
    }
}
