//! Peer-to-peer ADMM for the sum-of-norms problem.
//!
//! The variables are split as `x = (θ_1..θ_N, θ)` and
//! `z = (α_1..α_N, β_1..β_N)` under the constraint `Ax = z`, where `A`
//! copies each `θ_i` into `α_i` and the nominal `θ` into every `β_i`.
//! `A` is never formed: its action is the copy above and `Aᵀ` sums the
//! β-blocks. Per iteration every node `i`:
//!
//! 1. sets `θ_i = α_i − u_i/ρ`;
//! 2. broadcasts `(β_i, w_i)`;
//! 3. computes `θ = (1/N) Σ_j (β_j − w_j/ρ)` from the broadcasts it received;
//! 4. solves its `2m`-variable subproblem for `(α_i, β_i)`;
//! 5. updates `u_i += ρ(θ_i − α_i)` and `w_i += ρ(θ − β_i)`.
//!
//! `u_i, w_i` are unscaled multipliers, so a change of `ρ` leaves them
//! untouched; only their scaled view `ν/ρ` moves.
//!
//! Residual norms for stopping and for the `ρ` schedule are reductions over
//! node-local contributions, summed in node order.

pub mod frame;
pub mod transport;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{FleetError, Result};
use crate::model::{Diagnostics, FleetDataset, PNorm, Solution, SystemStats};
use crate::par::{self, Execution};
use crate::prox;
use crate::solver::objective;

pub use transport::{Broadcast, InProcessBus, LoopbackSocket, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    /// Initial penalty ρ.
    pub rho: f64,
    pub adaptive_rho: bool,
    pub mu: f64,
    pub tau_incr: f64,
    pub tau_decr: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iterations: usize,
    /// Relative tolerance on the local subproblem's optimality residual.
    pub inner_tolerance: f64,
    pub inner_max_iterations: usize,
    /// `None` selects `1e-6 * (1 + ‖θ̂‖_p)` as in the centralized solver.
    pub support_tolerance: Option<f64>,
    pub execution: Execution,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            adaptive_rho: true,
            mu: 10.0,
            tau_incr: 2.0,
            tau_decr: 2.0,
            eps_abs: 1e-4,
            eps_rel: 1e-3,
            max_iterations: 10_000,
            inner_tolerance: 1e-10,
            inner_max_iterations: 100,
            support_tolerance: None,
            execution: Execution::default(),
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(FleetError::domain("rho must be positive"));
        }
        if !(self.mu > 1.0 && self.tau_incr > 1.0 && self.tau_decr > 1.0) {
            return Err(FleetError::domain("mu and tau must exceed 1"));
        }
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0 && self.inner_tolerance > 0.0) {
            return Err(FleetError::domain("tolerances must be positive"));
        }
        Ok(())
    }
}

/// `θ_i = α_i − u_i/ρ`
pub fn local_primal_update(alpha: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    alpha - u / rho
}

/// `θ = (1/N) Σ_i (β_i − w_i/ρ)`, summed in sender order. Exactly one
/// message per node `0..n` is required.
pub fn consensus_update(received: &[Broadcast], n: usize, rho: f64) -> Result<DVector<f64>> {
    let mut slots: Vec<Option<&Broadcast>> = vec![None; n];
    for msg in received {
        let s = msg.sender as usize;
        if s >= n {
            return Err(FleetError::Protocol(format!("message from unknown node {}", s + 1)));
        }
        if slots[s].replace(msg).is_some() {
            return Err(FleetError::Protocol(format!("duplicate message from node {}", s + 1)));
        }
    }
    let m = received.first().map_or(0, |b| b.beta.len());
    let mut acc = DVector::zeros(m);
    for (s, slot) in slots.iter().enumerate() {
        let msg = slot.ok_or_else(|| FleetError::Protocol(format!("no message from node {}", s + 1)))?;
        if msg.beta.len() != m || msg.w.len() != m {
            return Err(FleetError::Protocol(format!("node {} sent a malformed message", s + 1)));
        }
        for q in 0..m {
            acc[q] += msg.beta[q] - msg.w[q] / rho;
        }
    }
    Ok(acc / n as f64)
}

/// `u_i += ρ(θ_i − α_i)`, `w_i += ρ(θ − β_i)`
pub fn dual_update(
    u: &DVector<f64>,
    w: &DVector<f64>,
    theta_i: &DVector<f64>,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    rho: f64,
) -> (DVector<f64>, DVector<f64>) {
    (u + (theta_i - alpha) * rho, w + (theta - beta) * rho)
}

/// Residual norms and iterate magnitudes for one stopping test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopInputs {
    pub primal: f64,
    pub dual: f64,
    /// `‖Ax‖`
    pub ax_norm: f64,
    /// `‖z‖`
    pub z_norm: f64,
    /// `‖Aᵀν‖`
    pub dual_var_norm: f64,
    pub systems: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopDecision {
    pub stop: bool,
    pub eps_primal: f64,
    pub eps_dual: f64,
}

/// Stop when `‖r‖ ≤ √(2Nm)ε_abs + ε_rel max(‖Ax‖, ‖z‖)` and
/// `‖s‖ ≤ √((N+1)m)ε_abs + ε_rel ‖Aᵀν‖`.
pub fn stopping_check(inp: &StopInputs, eps_abs: f64, eps_rel: f64) -> StopDecision {
    let n = inp.systems as f64;
    let m = inp.dim as f64;
    let eps_primal = (2.0 * n * m).sqrt() * eps_abs + eps_rel * inp.ax_norm.max(inp.z_norm);
    let eps_dual = ((n + 1.0) * m).sqrt() * eps_abs + eps_rel * inp.dual_var_norm;
    StopDecision {
        stop: inp.primal <= eps_primal && inp.dual <= eps_dual,
        eps_primal,
        eps_dual,
    }
}

/// Residual-balancing penalty schedule.
pub fn rho_update(rho: f64, primal: f64, dual: f64, cfg: &AdmmConfig) -> f64 {
    if primal > cfg.mu * dual {
        rho * cfg.tau_incr
    } else if dual > cfg.mu * primal {
        rho / cfg.tau_decr
    } else {
        rho
    }
}

/// Inner settings for [`local_subproblem`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

/// One node: local data, its consensus-split variables and multipliers.
#[derive(Debug, Clone)]
pub struct AdmmNode {
    pub index: usize,
    stats: SystemStats,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub theta_local: DVector<f64>,
    pub theta: DVector<f64>,
    factor: Option<(f64, Cholesky<f64, Dyn>)>,
}

/// Per-node contributions to the global residual norms (squared).
#[derive(Debug, Clone, Copy, Default)]
struct NodeResiduals {
    primal_sq: f64,
    alpha_change_sq: f64,
    ax_sq: f64,
    z_sq: f64,
    u_sq: f64,
}

impl AdmmNode {
    pub fn new(index: usize, stats: SystemStats) -> Self {
        let m = stats.moment.len();
        let zero = DVector::zeros(m);
        Self {
            index,
            stats,
            alpha: zero.clone(),
            beta: zero.clone(),
            u: zero.clone(),
            w: zero.clone(),
            theta_local: zero.clone(),
            theta: zero,
            factor: None,
        }
    }

    pub fn stats(&self) -> &SystemStats {
        &self.stats
    }

    /// Factor of `2ΦᵀΦ + 2ρI`, cached per ρ.
    fn factor(&mut self, rho: f64) -> &Cholesky<f64, Dyn> {
        let stale = self.factor.as_ref().is_none_or(|(r, _)| *r != rho);
        if stale {
            let m = self.alpha.len();
            let h = &self.stats.gram * 2.0 + DMatrix::identity(m, m) * (2.0 * rho);
            let ch = Cholesky::new(h).expect("2ΦᵀΦ + 2ρI is positive definite for ρ > 0");
            self.factor = Some((rho, ch));
        }
        &self.factor.as_ref().expect("factor set").1
    }

    pub fn primal_update(&mut self, rho: f64) {
        self.theta_local = local_primal_update(&self.alpha, &self.u, rho);
    }

    pub fn broadcast(&self, iteration: u64) -> Broadcast {
        Broadcast {
            iteration,
            sender: self.index as u32,
            beta: self.beta.iter().cloned().collect(),
            w: self.w.iter().cloned().collect(),
        }
    }

    pub fn consensus(&mut self, received: &[Broadcast], n: usize, rho: f64) -> Result<()> {
        self.theta = consensus_update(received, n, rho)?;
        Ok(())
    }

    /// Solves the local subproblem for the current `θ_i, θ` and updates
    /// `(α_i, β_i)` in place.
    pub fn local_solve(&mut self, lambda: f64, p: PNorm, rho: f64, inner: InnerConfig) -> Result<()> {
        let theta_local = self.theta_local.clone();
        let theta = self.theta.clone();
        let warm = &self.beta - &self.alpha;
        let u = self.u.clone();
        let w = self.w.clone();
        let moment = self.stats.moment.clone();
        let index = self.index;
        let factor = self.factor(rho);
        let (alpha, beta) = solve_local(
            factor,
            &moment,
            &theta_local,
            &theta,
            &u,
            &w,
            lambda,
            p,
            rho,
            warm,
            inner,
        )
        .map_err(|e| match e {
            FleetError::NonConvergence { iterations, residual, .. } => FleetError::NonConvergence {
                what: format!("local subproblem of node {}", index + 1),
                iterations,
                residual,
                last: None,
            },
            other => other,
        })?;
        self.alpha = alpha;
        self.beta = beta;
        Ok(())
    }

    pub fn dual_step(&mut self, rho: f64) {
        let (u, w) = dual_update(
            &self.u,
            &self.w,
            &self.theta_local,
            &self.theta,
            &self.alpha,
            &self.beta,
            rho,
        );
        self.u = u;
        self.w = w;
    }

    /// `θ_i` as reported in a solution: `θ + (α_i − β_i)`, so that a fused
    /// block has exactly zero deviation.
    pub fn estimate(&self) -> DVector<f64> {
        &self.theta + (&self.alpha - &self.beta)
    }
}

/// Minimizes over `(α, β)`
///
/// ```text
/// ‖Y − Φα‖² + λ‖β − α‖_p − uᵀα − wᵀβ + (ρ/2)‖θ_i − α‖² + (ρ/2)‖θ − β‖²
/// ```
///
/// by alternating between an exact solve in `α` and a proximal step in
/// `δ = β − α`. The objective is jointly strongly convex and the `α`-map
/// contracts by at most `ρ / (2σ_min(ΦᵀΦ) + 2ρ) ≤ ½`.
#[allow(clippy::too_many_arguments)]
fn solve_local(
    factor: &Cholesky<f64, Dyn>,
    moment: &DVector<f64>,
    theta_local: &DVector<f64>,
    theta: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    lambda: f64,
    p: PNorm,
    rho: f64,
    warm: DVector<f64>,
    inner: InnerConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let anchor_a = theta_local + u / rho;
    let anchor_b = theta + w / rho;
    let base = moment * 2.0 + &anchor_a * rho + &anchor_b * rho;
    let scale = base.amax().max(1.0);
    let mut delta = warm;
    let mut alpha = factor.solve(&(&base - &delta * rho));
    for it in 0..inner.max_iterations {
        let next = prox::prox(p, &(&anchor_b - &alpha), lambda / rho);
        let residual = rho * (&next - &delta).amax();
        delta = next;
        alpha = factor.solve(&(&base - &delta * rho));
        if residual <= inner.tolerance * scale {
            let beta = &alpha + &delta;
            return Ok((alpha, beta));
        }
        if it + 1 == inner.max_iterations {
            return Err(FleetError::NonConvergence {
                what: "local subproblem".into(),
                iterations: inner.max_iterations,
                residual,
                last: None,
            });
        }
    }
    let beta = &alpha + &delta;
    Ok((alpha, beta))
}

/// Solves one node's subproblem with a fresh factorization; see the module
/// docs for the objective.
#[allow(clippy::too_many_arguments)]
pub fn local_subproblem(
    stats: &SystemStats,
    theta_local: &DVector<f64>,
    theta: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    lambda: f64,
    p: PNorm,
    rho: f64,
    inner: InnerConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = theta.len();
    let h = &stats.gram * 2.0 + DMatrix::identity(m, m) * (2.0 * rho);
    let factor = Cholesky::new(h).ok_or_else(|| FleetError::domain("rho must be positive"))?;
    solve_local(
        &factor,
        &stats.moment,
        theta_local,
        theta,
        u,
        w,
        lambda,
        p,
        rho,
        DVector::zeros(m),
        inner,
    )
}

/// Starting point for the node states (`z⁽⁰⁾`, `ν⁽⁰⁾`). Defaults to zeros.
#[derive(Debug, Clone, Default)]
pub struct AdmmStart {
    pub alpha: Vec<DVector<f64>>,
    pub beta: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
}

/// Runs the distributed iteration until the stopping rule fires.
pub fn run_distributed(
    fleet: &FleetDataset,
    lambda: f64,
    p: PNorm,
    cfg: &AdmmConfig,
    transport: &dyn Transport,
) -> Result<Solution> {
    run_distributed_from(fleet, lambda, p, cfg, transport, None)
}

pub fn run_distributed_from(
    fleet: &FleetDataset,
    lambda: f64,
    p: PNorm,
    cfg: &AdmmConfig,
    transport: &dyn Transport,
    start: Option<&AdmmStart>,
) -> Result<Solution> {
    cfg.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(FleetError::domain("lambda must be finite and nonnegative"));
    }
    let n = fleet.len();
    let m = fleet.dim();
    let stats = fleet.stats();
    let mut nodes: Vec<AdmmNode> = stats
        .systems
        .into_iter()
        .enumerate()
        .map(|(i, s)| AdmmNode::new(i, s))
        .collect();
    if let Some(st) = start {
        for (i, node) in nodes.iter_mut().enumerate() {
            for (dst, src) in [
                (&mut node.alpha, &st.alpha),
                (&mut node.beta, &st.beta),
                (&mut node.u, &st.u),
                (&mut node.w, &st.w),
            ] {
                if let Some(v) = src.get(i) {
                    if v.len() != m {
                        return Err(FleetError::domain("start vector has the wrong dimension"));
                    }
                    *dst = v.clone();
                }
            }
        }
    }
    let inner = InnerConfig {
        tolerance: cfg.inner_tolerance,
        max_iterations: cfg.inner_max_iterations,
    };
    let exec = cfg.execution;
    let mut rho = cfg.rho;
    let mut diag = Diagnostics {
        method: "admm".into(),
        ..Diagnostics::default()
    };

    for iteration in 0..cfg.max_iterations {
        let k = iteration as u64;
        // Steps 2-3: local primal update, then broadcast (β_i, w_i).
        let outgoing = par::map_mut(exec, &mut nodes, |_, node| {
            node.primal_update(rho);
            node.broadcast(k)
        });
        for msg in &outgoing {
            transport.broadcast(msg)?;
        }
        let received = transport.collect(k, n)?;
        // Step 4 on every node from the same broadcasts.
        par::try_map_mut(exec, &mut nodes, |_, node| node.consensus(&received, n, rho))?;
        if let Some(bad) = nodes.iter().position(|nd| nd.theta != nodes[0].theta) {
            return Err(FleetError::Protocol(format!(
                "node {} disagrees on the consensus estimate",
                bad + 1
            )));
        }
        // Steps 5-7.
        let contributions = par::try_map_mut(exec, &mut nodes, |_, node| -> Result<(NodeResiduals, DVector<f64>)> {
            let alpha_prev = node.alpha.clone();
            let beta_prev = node.beta.clone();
            node.local_solve(lambda, p, rho, inner)?;
            node.dual_step(rho);
            let r = NodeResiduals {
                primal_sq: (&node.theta_local - &node.alpha).norm_squared()
                    + (&node.theta - &node.beta).norm_squared(),
                alpha_change_sq: (&node.alpha - &alpha_prev).norm_squared(),
                ax_sq: node.theta_local.norm_squared() + node.theta.norm_squared(),
                z_sq: node.alpha.norm_squared() + node.beta.norm_squared(),
                u_sq: node.u.norm_squared(),
            };
            Ok((r, &node.beta - &beta_prev))
        })?;
        let mut total = NodeResiduals::default();
        let mut beta_change = DVector::zeros(m);
        let mut w_sum = DVector::zeros(m);
        for ((r, db), node) in contributions.iter().zip(&nodes) {
            total.primal_sq += r.primal_sq;
            total.alpha_change_sq += r.alpha_change_sq;
            total.ax_sq += r.ax_sq;
            total.z_sq += r.z_sq;
            total.u_sq += r.u_sq;
            beta_change += db;
            w_sum += &node.w;
        }
        let primal = total.primal_sq.sqrt();
        let dual = rho * (total.alpha_change_sq + beta_change.norm_squared()).sqrt();
        let decision = stopping_check(
            &StopInputs {
                primal,
                dual,
                ax_norm: total.ax_sq.sqrt(),
                z_norm: total.z_sq.sqrt(),
                dual_var_norm: (total.u_sq + w_sum.norm_squared()).sqrt(),
                systems: n,
                dim: m,
            },
            cfg.eps_abs,
            cfg.eps_rel,
        );

        let estimates: Vec<DVector<f64>> = nodes.iter().map(AdmmNode::estimate).collect();
        let theta = nodes[0].theta.clone();
        let obj: f64 = nodes
            .iter()
            .zip(&estimates)
            .map(|(nd, t)| nd.stats.sse(t) + lambda * p.norm(&(t - &theta)))
            .sum();
        let support_tol = cfg
            .support_tolerance
            .unwrap_or_else(|| 1e-6 * (1.0 + p.norm(&theta)));
        let support_size = estimates
            .iter()
            .filter(|t| p.norm(&(*t - &theta)) > support_tol)
            .count();
        diag.primal_residuals.push(primal);
        diag.dual_residuals.push(dual);
        diag.rho_history.push(rho);
        diag.objective_history.push(obj);
        diag.support_history.push(support_size);
        diag.iterations = iteration + 1;

        if decision.stop || iteration + 1 == cfg.max_iterations {
            diag.converged = decision.stop;
            let exact = objective(fleet, &theta, &estimates, lambda, p)?;
            let sol = Solution::new(theta, estimates, lambda, p, support_tol, exact, diag);
            if sol.diagnostics.converged {
                return Ok(sol);
            }
            return Err(FleetError::NonConvergence {
                what: "distributed ADMM".into(),
                iterations: cfg.max_iterations,
                residual: primal,
                last: Some(Box::new(sol)),
            });
        }
        if cfg.adaptive_rho {
            rho = rho_update(rho, primal, dual, cfg);
        }
    }
    Err(FleetError::domain("max_iterations must be positive"))
}
