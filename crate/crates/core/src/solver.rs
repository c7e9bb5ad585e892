//! Centralized solver for the sum-of-norms problem
//!
//! ```text
//! minimize_{θ, θ_1..θ_N}  Σ_i ‖Y_i − Φ_i θ_i‖² + λ Σ_i ‖θ − θ_i‖_p
//! ```
//!
//! Writing `θ_i = θ + d_i`, every deviation block `d_i` can be minimized
//! exactly for a fixed nominal `θ` (see [`crate::prox::QuadraticBlock`]).
//! What remains is the reduced function
//! `F(θ) = Σ_i min_{d_i} ‖Y_i − Φ_i(θ + d_i)‖² + λ‖d_i‖_p`, which is convex
//! with a Lipschitz gradient `∇F(θ) = −Σ_i g_i`, `g_i = 2Φ_iᵀ(Y_i − Φ_iθ_i)`.
//! `F` is minimized by Newton steps on its generalized Hessian with
//! backtracking, falling back to a pooled-Gram preconditioned gradient step;
//! each iteration also tries the exact nominal update for fixed `θ_i`
//! (geometric or coordinatewise median) and keeps the best candidate, so the
//! objective never increases beyond rounding error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FleetError, Result};
use crate::linalg;
use crate::model::{
    residual_sse, support, Diagnostics, FleetDataset, FleetStats, PNorm, Solution, SystemStats,
};
use crate::par::{self, Execution};
use crate::prox::QuadraticBlock;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub p: PNorm,
    pub max_iterations: usize,
    /// Relative objective decrease below which the iteration may stop.
    pub objective_tolerance: f64,
    pub kkt_tolerance: f64,
    /// Deviation norm above which a system is flagged. `None` selects
    /// `1e-6 * (1 + ‖θ̂‖_p)`.
    pub support_tolerance: Option<f64>,
    /// Ridge-perturb a singular pooled Gram matrix instead of failing.
    pub ridge_fallback: bool,
    pub execution: Execution,
}

impl SolverConfig {
    pub fn new(lambda: f64, p: PNorm) -> Self {
        Self {
            lambda,
            p,
            max_iterations: 500,
            objective_tolerance: 1e-10,
            kkt_tolerance: 1e-6,
            support_tolerance: None,
            ridge_fallback: false,
            execution: Execution::default(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FleetError::domain("lambda must be finite and nonnegative"));
        }
        if !(self.objective_tolerance > 0.0 && self.kkt_tolerance > 0.0) {
            return Err(FleetError::domain("tolerances must be positive"));
        }
        if self.support_tolerance.is_some_and(|t| !(t >= 0.0)) {
            return Err(FleetError::domain("support tolerance must be nonnegative"));
        }
        Ok(())
    }

    pub fn support_tolerance_for(&self, nominal: &DVector<f64>) -> f64 {
        self.support_tolerance
            .unwrap_or_else(|| 1e-6 * (1.0 + self.p.norm(nominal)))
    }
}

/// The sum-of-norms objective evaluated on raw data.
pub fn objective(
    fleet: &FleetDataset,
    nominal: &DVector<f64>,
    per_system: &[DVector<f64>],
    lambda: f64,
    p: PNorm,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, theta) in fleet.systems().iter().zip(per_system) {
        total += residual_sse(s, theta)? + lambda * p.norm(&(theta - nominal));
    }
    Ok(total)
}

/// Per-system dual norms `‖2Φ_iᵀ(Φ_iθ* − Y_i)‖_d` at the pooled fit `θ*`.
pub fn lambda_max_profile(fleet: &FleetDataset, p: PNorm) -> Result<Vec<f64>> {
    let stats = fleet.stats();
    let pooled = stats.pooled_least_squares()?;
    Ok(stats
        .systems
        .iter()
        .map(|s| p.dual_norm(&s.neg_gradient(&pooled)))
        .collect())
}

/// Smallest λ for which every system is fused to the pooled fit.
pub fn compute_lambda_max(fleet: &FleetDataset, p: PNorm) -> Result<f64> {
    Ok(lambda_max_profile(fleet, p)?.into_iter().fold(0.0, f64::max))
}

/// Largest violation of the optimality conditions at `sol`.
///
/// With `g_i = 2Φ_iᵀ(Y_i − Φ_iθ_i)`: a block with deviation above the
/// support tolerance must have `g_i` equal to `λ` times the norm gradient of
/// its deviation; a fused block needs `‖g_i‖_d ≤ λ`; and the nominal
/// estimate needs `Σ_i g_i = 0`.
pub fn kkt_residual(fleet: &FleetDataset, sol: &Solution, cfg: &SolverConfig) -> f64 {
    kkt_from_stats(&fleet.stats().systems, sol, cfg.lambda, cfg.p)
}

fn kkt_from_stats(stats: &[SystemStats], sol: &Solution, lambda: f64, p: PNorm) -> f64 {
    let tol = sol.support_tolerance;
    let m = sol.nominal.len();
    let mut worst = 0.0_f64;
    let mut total = DVector::zeros(m);
    for (st, theta) in stats.iter().zip(&sol.per_system) {
        let g = st.neg_gradient(theta);
        let dev = theta - &sol.nominal;
        let viol = match p {
            PNorm::L2 => {
                let n = dev.norm();
                if n > tol {
                    (&g - &dev * (lambda / n)).amax()
                } else {
                    (g.norm() - lambda).max(0.0)
                }
            }
            PNorm::L1 => (0..m)
                .map(|q| {
                    if dev[q].abs() > tol {
                        (g[q] - lambda * dev[q].signum()).abs()
                    } else {
                        (g[q].abs() - lambda).max(0.0)
                    }
                })
                .fold(0.0, f64::max),
        };
        worst = worst.max(viol);
        total += g;
    }
    worst.max(total.amax())
}

/// `{i : deviation_i > support_tolerance}`
pub fn anomaly_support(sol: &Solution, support_tolerance: f64) -> Vec<usize> {
    support(&sol.deviations, support_tolerance)
}

/// Cached per-fleet data for repeated centralized solves.
#[derive(Debug, Clone)]
pub struct GroupLasso<'a> {
    fleet: &'a FleetDataset,
    stats: FleetStats,
    blocks: Vec<QuadraticBlock>,
    pooled: DMatrix<f64>,
}

struct Evaluation {
    theta: DVector<f64>,
    deviations: Vec<DVector<f64>>,
    value: f64,
    gradient: DVector<f64>,
}

impl<'a> GroupLasso<'a> {
    pub fn new(fleet: &'a FleetDataset) -> Self {
        let stats = fleet.stats();
        let blocks = stats
            .systems
            .iter()
            .map(|s| QuadraticBlock::new(&s.gram * 2.0))
            .collect();
        let pooled = &stats.pooled_gram * 2.0;
        Self {
            fleet,
            stats,
            blocks,
            pooled,
        }
    }

    pub fn fleet(&self) -> &FleetDataset {
        self.fleet
    }

    pub fn lambda_max(&self, p: PNorm) -> Result<f64> {
        let pooled = self.stats.pooled_least_squares()?;
        Ok(self
            .stats
            .systems
            .iter()
            .map(|s| p.dual_norm(&s.neg_gradient(&pooled)))
            .fold(0.0, f64::max))
    }

    fn pooled_start(&self, cfg: &SolverConfig) -> Result<DVector<f64>> {
        let m = self.stats.dim();
        match self.stats.pooled_least_squares() {
            Ok(t) => Ok(t),
            Err(FleetError::Singular { .. }) if cfg.ridge_fallback => {
                let eps = 1e-10 * self.stats.pooled_gram.trace().max(f64::MIN_POSITIVE) / m as f64;
                let g = &self.stats.pooled_gram + DMatrix::identity(m, m) * eps;
                crate::model::solve_normal_equations(&g, &self.stats.pooled_moment, "ridge pooled fit")
            }
            Err(e) => Err(e),
        }
    }

    fn evaluate(&self, theta: DVector<f64>, cfg: &SolverConfig, warm: Option<&[DVector<f64>]>) -> Evaluation {
        let lambda = cfg.lambda;
        let p = cfg.p;
        let items: Vec<(&SystemStats, &QuadraticBlock)> =
            self.stats.systems.iter().zip(&self.blocks).collect();
        let solved = par::map(cfg.execution, &items, |i, (st, blk)| {
            let c = st.neg_gradient(&theta);
            let d = blk.solve(p, &c, lambda, warm.map(|w| &w[i]));
            let theta_i = &theta + &d;
            let value = st.sse(&theta_i) + lambda * p.norm(&d);
            let g = st.neg_gradient(&theta_i);
            (d, value, g)
        });
        let mut value = 0.0;
        let mut gradient = DVector::zeros(theta.len());
        let mut deviations = Vec::with_capacity(solved.len());
        for (d, v, g) in solved {
            value += v;
            gradient -= g;
            deviations.push(d);
        }
        Evaluation {
            theta,
            deviations,
            value,
            gradient,
        }
    }

    fn reduced_hessian(&self, ev: &Evaluation, cfg: &SolverConfig) -> DMatrix<f64> {
        let m = ev.theta.len();
        let mut h = DMatrix::zeros(m, m);
        for (blk, d) in self.blocks.iter().zip(&ev.deviations) {
            h += blk.envelope_hessian(cfg.p, d, cfg.lambda);
        }
        h
    }

    /// Backtracking along `dir`; returns the first point with sufficient decrease.
    fn line_search(
        &self,
        ev: &Evaluation,
        dir: &DVector<f64>,
        cfg: &SolverConfig,
    ) -> Option<Evaluation> {
        let slope = ev.gradient.dot(dir);
        if !(slope < 0.0) {
            return None;
        }
        let noise = rounding_noise(ev.value);
        let grad = ev.gradient.amax();
        let mut step = 1.0;
        for _ in 0..40 {
            let cand = self.evaluate(&ev.theta + dir * step, cfg, Some(&ev.deviations));
            if cand.value <= ev.value + 1e-4 * step * slope {
                return Some(cand);
            }
            // Close to the optimum the predicted decrease drops below the
            // rounding error of F; judge the step by its gradient instead.
            if cand.value <= ev.value + noise && cand.gradient.amax() < grad {
                return Some(cand);
            }
            step *= 0.5;
        }
        None
    }

    fn median_candidate(&self, ev: &Evaluation, cfg: &SolverConfig) -> Evaluation {
        let points: Vec<DVector<f64>> = ev.deviations.iter().map(|d| &ev.theta + d).collect();
        let theta = match cfg.p {
            PNorm::L2 => geometric_median(&points, &ev.theta),
            PNorm::L1 => coordinate_median(&points, &ev.theta),
        };
        self.evaluate(theta, cfg, Some(&ev.deviations))
    }

    fn solution_from(&self, ev: &Evaluation, cfg: &SolverConfig, diag: Diagnostics) -> Result<Solution> {
        let per_system: Vec<DVector<f64>> = ev.deviations.iter().map(|d| &ev.theta + d).collect();
        let obj = objective(self.fleet, &ev.theta, &per_system, cfg.lambda, cfg.p)?;
        Ok(Solution::new(
            ev.theta.clone(),
            per_system,
            cfg.lambda,
            cfg.p,
            cfg.support_tolerance_for(&ev.theta),
            obj,
            diag,
        ))
    }

    fn solve_unpenalized(&self, cfg: &SolverConfig) -> Result<Solution> {
        let m = self.stats.dim();
        let mut per_system = Vec::with_capacity(self.stats.systems.len());
        for (i, s) in self.stats.systems.iter().enumerate() {
            per_system.push(crate::model::solve_normal_equations(
                &s.gram,
                &s.moment,
                &format!("own fit of system {}", i + 1),
            )?);
        }
        let mut nominal = DVector::zeros(m);
        for t in &per_system {
            nominal += t;
        }
        nominal /= per_system.len() as f64;
        let obj = objective(self.fleet, &nominal, &per_system, 0.0, cfg.p)?;
        let mut sol = Solution::new(
            nominal.clone(),
            per_system,
            0.0,
            cfg.p,
            cfg.support_tolerance_for(&nominal),
            obj,
            Diagnostics {
                method: "central".into(),
                converged: true,
                objective_history: vec![obj],
                ..Diagnostics::default()
            },
        );
        sol.diagnostics.kkt_residual = Some(kkt_from_stats(&self.stats.systems, &sol, 0.0, cfg.p));
        Ok(sol)
    }

    /// Solves from the pooled fit, or from `warm`'s nominal estimate.
    pub fn solve(&self, cfg: &SolverConfig, warm: Option<&Solution>) -> Result<Solution> {
        cfg.validate()?;
        if cfg.lambda == 0.0 {
            return self.solve_unpenalized(cfg);
        }
        let start = match warm {
            Some(w) if w.nominal.len() == self.stats.dim() => w.nominal.clone(),
            _ => self.pooled_start(cfg)?,
        };
        let warm_dev: Option<Vec<DVector<f64>>> =
            warm.map(|w| w.per_system.iter().map(|t| t - &w.nominal).collect());
        let mut ev = self.evaluate(start, cfg, warm_dev.as_deref());
        let mut diag = Diagnostics {
            method: "central".into(),
            objective_history: vec![ev.value],
            ..Diagnostics::default()
        };
        let pooled_chol = self.pooled.clone().cholesky();
        let mut iterations = 0;
        loop {
            let grad_norm = ev.gradient.amax();
            let prev = diag.objective_history[diag.objective_history.len().saturating_sub(2)];
            let rel_decrease = (prev - ev.value) / ev.value.abs().max(f64::MIN_POSITIVE);
            if grad_norm <= 0.5 * cfg.kkt_tolerance && rel_decrease < cfg.objective_tolerance {
                let mut sol = self.solution_from(&ev, cfg, diag.clone())?;
                let kkt = kkt_from_stats(&self.stats.systems, &sol, cfg.lambda, cfg.p);
                if kkt <= cfg.kkt_tolerance {
                    sol.diagnostics.iterations = iterations;
                    sol.diagnostics.converged = true;
                    sol.diagnostics.kkt_residual = Some(kkt);
                    return Ok(sol);
                }
            }
            if iterations >= cfg.max_iterations {
                let mut sol = self.solution_from(&ev, cfg, diag)?;
                let kkt = kkt_from_stats(&self.stats.systems, &sol, cfg.lambda, cfg.p);
                sol.diagnostics.iterations = iterations;
                sol.diagnostics.kkt_residual = Some(kkt);
                return Err(FleetError::NonConvergence {
                    what: "centralized group-lasso solver".into(),
                    iterations,
                    residual: kkt,
                    last: Some(Box::new(sol)),
                });
            }
            iterations += 1;

            let mut best: Option<Evaluation> = None;
            let hess = self.reduced_hessian(&ev, cfg);
            if let Some(ch) = hess.cholesky() {
                let dir = -ch.solve(&ev.gradient);
                best = self.line_search(&ev, &dir, cfg);
            }
            if best.is_none() {
                if let Some(ch) = &pooled_chol {
                    let dir = -ch.solve(&ev.gradient);
                    best = self.line_search(&ev, &dir, cfg);
                }
            }
            let median = self.median_candidate(&ev, cfg);
            if median.value < best.as_ref().map_or(ev.value, |b| b.value) - rounding_noise(ev.value) {
                best = Some(median);
            }
            match best {
                Some(next) => ev = next,
                // No candidate decreases F: re-solve the blocks in place so
                // the stopping test sees fresh gradients.
                _ => ev = self.evaluate(ev.theta.clone(), cfg, Some(&ev.deviations)),
            }
            diag.objective_history.push(ev.value);
        }
    }
}

fn rounding_noise(value: f64) -> f64 {
    1e-13 * value.abs().max(1.0)
}

/// Centralized solve of the sum-of-norms problem.
pub fn solve_group_lasso(fleet: &FleetDataset, cfg: &SolverConfig) -> Result<Solution> {
    GroupLasso::new(fleet).solve(cfg, None)
}

/// Minimizer of `Σ_j ‖x − a_j‖₂` by Weiszfeld iteration. Anchors that
/// coincide with the iterate are handled with the Vardi–Zhang correction.
pub fn geometric_median(points: &[DVector<f64>], start: &DVector<f64>) -> DVector<f64> {
    let scale = points.iter().map(linalg::sup_norm).fold(1.0, f64::max);
    let mut x = start.clone();
    for _ in 0..200 {
        let mut num = DVector::zeros(x.len());
        let mut den = 0.0;
        let mut pull = DVector::zeros(x.len());
        let mut anchored = 0.0;
        for a in points {
            let diff = a - &x;
            let dist = diff.norm();
            if dist <= 1e-14 * scale {
                anchored += 1.0;
            } else {
                num += a / dist;
                den += 1.0 / dist;
                pull += diff / dist;
            }
        }
        if den == 0.0 {
            return x;
        }
        let target = num / den;
        let r = pull.norm();
        let next = if anchored == 0.0 {
            target
        } else if r <= anchored {
            return x;
        } else {
            let w = anchored / r;
            target * (1.0 - w) + &x * w
        };
        let step = (&next - &x).amax();
        x = next;
        if step <= 1e-15 * scale {
            break;
        }
    }
    x
}

/// Coordinatewise median; within an even-count median interval the value
/// closest to `current` is kept.
pub fn coordinate_median(points: &[DVector<f64>], current: &DVector<f64>) -> DVector<f64> {
    let n = points.len();
    DVector::from_iterator(
        current.len(),
        (0..current.len()).map(|q| {
            let mut vals: Vec<f64> = points.iter().map(|p| p[q]).collect();
            vals.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                vals[n / 2]
            } else {
                current[q].clamp(vals[n / 2 - 1], vals[n / 2])
            }
        }),
    )
}
