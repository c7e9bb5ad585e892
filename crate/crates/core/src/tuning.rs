//! Choosing the regularization weight: bisection for a target anomaly
//! count, and BIC over a grid.

use log::warn;
use serde::Serialize;

use crate::error::{FleetError, Result};
use crate::model::{residual_sse, FleetDataset, Hypothesis, Solution};
use crate::oracle::Oracle;
use crate::solver::{GroupLasso, SolverConfig};

/// Bisection bracket and depth for [`tune_lambda_for_k`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    /// The bracket's lower end is `lower_ratio * λ_max`.
    pub lower_ratio: f64,
    pub max_depth: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            lower_ratio: 1e-6,
            max_depth: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub lambda: f64,
    pub solution: Solution,
    pub target: usize,
    pub achieved: usize,
    pub lambda_max: f64,
    /// Every `(λ, count)` the bisection evaluated, in order.
    pub trail: Vec<(f64, usize)>,
}

impl TuneResult {
    pub fn exact(&self) -> bool {
        self.achieved == self.target
    }
}

/// Finds `λ ∈ (0, λ_max]` whose solution flags exactly `k_target` systems.
///
/// Bisects geometrically, warm-starting every solve from the previous one.
/// When no evaluated λ hits the target, returns the one whose count is
/// closest, preferring the smaller count.
pub fn tune_lambda_for_k(fleet: &FleetDataset, k_target: usize, cfg: &SolverConfig) -> Result<TuneResult> {
    tune_lambda_for_k_with(fleet, k_target, cfg, TuneOptions::default())
}

pub fn tune_lambda_for_k_with(
    fleet: &FleetDataset,
    k_target: usize,
    cfg: &SolverConfig,
    opts: TuneOptions,
) -> Result<TuneResult> {
    let n = fleet.len();
    if k_target > n {
        return Err(FleetError::domain(format!(
            "cannot flag {k_target} systems in a fleet of {n}"
        )));
    }
    if !(opts.lower_ratio > 0.0 && opts.lower_ratio < 1.0) {
        return Err(FleetError::domain("lower_ratio must lie in (0, 1)"));
    }
    let solver = GroupLasso::new(fleet);
    let lambda_max = solver.lambda_max(cfg.p)?;
    let mut trail = Vec::new();

    let mut hi = lambda_max;
    let hi_sol = solver.solve(&cfg.with_lambda(hi), None)?;
    trail.push((hi, hi_sol.flagged.len()));
    if k_target == 0 || lambda_max == 0.0 {
        let achieved = hi_sol.flagged.len();
        return Ok(TuneResult {
            lambda: hi,
            solution: hi_sol,
            target: k_target,
            achieved,
            lambda_max,
            trail,
        });
    }

    let mut lo = lambda_max * opts.lower_ratio;
    let lo_sol = solver.solve(&cfg.with_lambda(lo), None)?;
    trail.push((lo, lo_sol.flagged.len()));
    let mut best = (hi, hi_sol);
    let consider = |lambda: f64, sol: Solution, best: &mut (f64, Solution)| {
        let key = |c: usize| (c.abs_diff(k_target), c);
        if key(sol.flagged.len()) < key(best.1.flagged.len()) {
            *best = (lambda, sol);
        }
    };
    let lo_count = lo_sol.flagged.len();
    consider(lo, lo_sol.clone(), &mut best);
    if lo_count == k_target {
        return Ok(finish(best, k_target, lambda_max, trail));
    }
    if lo_count < k_target {
        warn!("only {lo_count} systems flagged at the bottom of the bracket, target {k_target}");
        return Ok(finish(best, k_target, lambda_max, trail));
    }

    let mut warm = lo_sol;
    for _ in 0..opts.max_depth {
        if hi / lo <= 1.0 + 1e-12 {
            break;
        }
        let mid = (lo * hi).sqrt();
        let sol = solver.solve(&cfg.with_lambda(mid), Some(&warm))?;
        let count = sol.flagged.len();
        trail.push((mid, count));
        if count == k_target {
            return Ok(finish((mid, sol), k_target, lambda_max, trail));
        }
        if count > k_target {
            lo = mid;
        } else {
            hi = mid;
        }
        consider(mid, sol.clone(), &mut best);
        warm = sol;
    }
    warn!(
        "no λ flags exactly {k_target} systems; closest count is {}",
        best.1.flagged.len()
    );
    Ok(finish(best, k_target, lambda_max, trail))
}

fn finish(best: (f64, Solution), target: usize, lambda_max: f64, trail: Vec<(f64, usize)>) -> TuneResult {
    let achieved = best.1.flagged.len();
    TuneResult {
        lambda: best.0,
        solution: best.1,
        target,
        achieved,
        lambda_max,
        trail,
    }
}

/// Total squared residual of `sol` over the whole fleet.
pub fn solution_sse(fleet: &FleetDataset, sol: &Solution) -> Result<f64> {
    fleet
        .systems()
        .iter()
        .zip(&sol.per_system)
        .map(|(s, t)| residual_sse(s, t))
        .sum()
}

/// Squared residual after refitting on the support of `flagged`: every
/// flagged system gets its own least-squares fit and the rest share one.
pub fn refit_sse(oracle: &Oracle, flagged: &[usize]) -> Result<f64> {
    let n = oracle.fleet_size();
    if flagged.len() == n {
        return oracle.own_fits_sse();
    }
    Ok(oracle.evaluate(&Hypothesis::new(flagged.to_vec(), n)?)?.cost)
}

/// Effective parameter count: the nominal vector plus one free vector per
/// flagged system.
pub fn degrees_of_freedom(dim: usize, flagged: usize) -> usize {
    dim * (1 + flagged)
}

/// `n·log(SSE/n) + df·log(n)` over all `n` observations in the fleet, with
/// SSE taken at the refit estimates for the solution's support (the
/// shrunken estimates would penalize sparse supports twice); `−∞` when the
/// fit is exact.
pub fn bic_score(fleet: &FleetDataset, sol: &Solution) -> Result<f64> {
    let sse = refit_sse(&Oracle::new(fleet), &sol.flagged)?;
    Ok(bic_from_parts(
        sse,
        fleet.total_observations(),
        degrees_of_freedom(fleet.dim(), sol.flagged.len()),
    ))
}

pub fn bic_from_parts(sse: f64, observations: usize, df: usize) -> f64 {
    let n = observations as f64;
    if sse <= 0.0 {
        warn!("zero residual: BIC is -inf");
        return f64::NEG_INFINITY;
    }
    n * (sse / n).ln() + df as f64 * n.ln()
}

/// One grid point of [`select_lambda_bic`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BicRow {
    pub lambda: f64,
    pub flagged: usize,
    /// Squared residual after refitting on the flagged support.
    pub sse: f64,
    pub bic: f64,
    /// Set when the solve failed; the other fields are then NaN or zero.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BicSelection {
    pub lambda: f64,
    pub solution: Solution,
    /// Rows in descending λ order.
    pub table: Vec<BicRow>,
}

/// Logarithmic grid from `λ_max` down to `ratio·λ_max`, descending.
pub fn log_grid(lambda_max: f64, points: usize, ratio: f64) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lambda_max],
        _ => (0..points)
            .map(|j| lambda_max * ratio.powf(j as f64 / (points - 1) as f64))
            .collect(),
    }
}

/// Solves at every grid value (descending, warm-started) and returns the
/// BIC minimizer (see [`bic_score`]). Failed solves are recorded in the table and skipped.
pub fn select_lambda_bic(fleet: &FleetDataset, grid: &[f64], cfg: &SolverConfig) -> Result<BicSelection> {
    if grid.is_empty() {
        return Err(FleetError::domain("λ grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(FleetError::domain(format!("grid value {bad} is not positive")));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let solver = GroupLasso::new(fleet);
    let oracle = Oracle::new(fleet);
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, Solution)> = None;
    let mut warm: Option<Solution> = None;
    for &lambda in &grid {
        let outcome = solver
            .solve(&cfg.with_lambda(lambda), warm.as_ref())
            .and_then(|sol| Ok((refit_sse(&oracle, &sol.flagged)?, sol)));
        match outcome {
            Ok((sse, sol)) => {
                let bic = bic_from_parts(
                    sse,
                    fleet.total_observations(),
                    degrees_of_freedom(fleet.dim(), sol.flagged.len()),
                );
                table.push(BicRow {
                    lambda,
                    flagged: sol.flagged.len(),
                    sse,
                    bic,
                    error: None,
                });
                if best.as_ref().is_none_or(|b| bic < b.1) {
                    best = Some((lambda, bic, sol.clone()));
                }
                warm = Some(sol);
            }
            Err(e) => {
                warn!("solve at λ = {lambda} failed: {e}");
                table.push(BicRow {
                    lambda,
                    flagged: 0,
                    sse: f64::NAN,
                    bic: f64::NAN,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (lambda, _, solution) =
        best.ok_or_else(|| FleetError::domain("every grid point failed to solve"))?;
    Ok(BicSelection {
        lambda,
        solution,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_fleet, GenConfig};
    use crate::model::{Diagnostics, PNorm};
    use crate::oracle::{brute_force_detect, OracleOptions};
    use crate::solver::compute_lambda_max;
    use nalgebra::DVector;

    fn planted(n: usize, tags: Vec<usize>, seed: u64) -> FleetDataset {
        let cfg = GenConfig::planted(n, 40, vec![1.0, -0.5, 0.2], vec![3.0, -2.0, 1.0], tags, 0.5, seed);
        generate_fleet(&cfg).unwrap()
    }

    fn cfg() -> SolverConfig {
        SolverConfig::new(0.0, PNorm::L2)
    }

    #[test]
    fn zero_target_returns_lambda_max() {
        let f = planted(8, vec![3], 1);
        let r = tune_lambda_for_k(&f, 0, &cfg()).unwrap();
        assert_eq!(r.lambda, compute_lambda_max(&f, PNorm::L2).unwrap());
        assert!(r.solution.flagged.is_empty());
        assert!(r.exact());
    }

    #[test]
    fn too_many_is_a_domain_error() {
        let f = planted(4, vec![1], 1);
        assert!(matches!(tune_lambda_for_k(&f, 5, &cfg()), Err(FleetError::Domain(_))));
    }

    #[test]
    fn single_planted_anomaly_matches_the_oracle() {
        let f = planted(10, vec![7], 3);
        let r = tune_lambda_for_k(&f, 1, &cfg()).unwrap();
        assert_eq!(r.solution.flagged, vec![6]);
        let bf = brute_force_detect(&f, 1, OracleOptions::default()).unwrap();
        assert_eq!(bf.best.hypothesis.anomaly_set(), r.solution.flagged.as_slice());
    }

    #[test]
    fn full_target_flags_everyone() {
        let f = planted(6, vec![2], 4);
        let r = tune_lambda_for_k(&f, 6, &cfg()).unwrap();
        assert_eq!(r.achieved, 6);
    }

    #[test]
    fn bisection_keeps_the_bracket_ordered() {
        let f = planted(10, vec![2, 5], 6);
        let r = tune_lambda_for_k(&f, 2, &cfg()).unwrap();
        // Evaluations with larger λ than an exact hit flag no more than
        // the target; smaller ones no fewer.
        for &(l, c) in &r.trail {
            if l > r.lambda {
                assert!(c <= 2 || l == r.lambda_max * 1e-6);
            } else if l < r.lambda {
                assert!(c >= 2);
            }
        }
    }

    fn fake(flagged: usize, n: usize) -> Solution {
        let nominal = DVector::zeros(2);
        let per = (0..n)
            .map(|i| if i < flagged { DVector::from_vec(vec![1.0, 0.0]) } else { DVector::zeros(2) })
            .collect();
        Solution::new(nominal, per, 1.0, PNorm::L2, 1e-9, 0.0, Diagnostics::default())
    }

    #[test]
    fn bic_penalizes_extra_anomalies() {
        assert!(bic_from_parts(10.0, 100, degrees_of_freedom(3, 1)) < bic_from_parts(10.0, 100, degrees_of_freedom(3, 3)));
        assert_eq!(degrees_of_freedom(4, fake(0, 5).flagged.len()), 4);
        assert_eq!(bic_from_parts(0.0, 10, 2), f64::NEG_INFINITY);
    }

    #[test]
    fn bic_grid_picks_planted_pair() {
        let f = planted(8, vec![2, 6], 2);
        let lm = compute_lambda_max(&f, PNorm::L2).unwrap();
        let sel = select_lambda_bic(&f, &log_grid(lm, 30, 1e-3), &cfg()).unwrap();
        assert_eq!(sel.solution.flagged, vec![1, 5]);
        assert_eq!(sel.table.len(), 30);
        let sel20 = select_lambda_bic(&f, &log_grid(lm, 20, 1e-3), &cfg()).unwrap();
        assert_eq!(sel20.solution.flagged.len(), 2);
    }

    #[test]
    fn single_point_grid_and_duplicates() {
        let f = planted(6, vec![2], 5);
        let lm = compute_lambda_max(&f, PNorm::L2).unwrap();
        let sel = select_lambda_bic(&f, &[lm], &cfg()).unwrap();
        assert_eq!(sel.lambda, lm);
        assert_eq!(sel.table[0].flagged, 0);
        let sel = select_lambda_bic(&f, &[lm * 0.5, lm, lm * 0.5, lm], &cfg()).unwrap();
        assert_eq!(sel.table.len(), 2);
        assert!(sel.table[0].lambda > sel.table[1].lambda);
        assert!(select_lambda_bic(&f, &[], &cfg()).is_err());
        assert!(select_lambda_bic(&f, &[-1.0], &cfg()).is_err());
    }

    #[test]
    fn selection_is_deterministic() {
        let f = planted(7, vec![4], 9);
        let lm = compute_lambda_max(&f, PNorm::L1).unwrap();
        let grid = log_grid(lm, 12, 1e-2);
        let c = SolverConfig::new(0.0, PNorm::L1);
        let a = select_lambda_bic(&f, &grid, &c).unwrap();
        let b = select_lambda_bic(&f, &grid, &c).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.solution, b.solution);
    }

    #[test]
    fn log_grid_shape() {
        assert!(log_grid(5.0, 0, 0.1).is_empty());
        assert_eq!(log_grid(5.0, 1, 0.1), vec![5.0]);
        let g = log_grid(100.0, 3, 0.01);
        assert_eq!(g[0], 100.0);
        assert!((g[1] - 10.0).abs() < 1e-12 && (g[2] - 1.0).abs() < 1e-12);
    }
}
