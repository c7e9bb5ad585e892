//! Domain types and least-squares primitives shared by every solver.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FleetError, Result};
use crate::linalg;

/// One system's data: the regressor matrix (row `t` is the regressor at
/// observation `t`) and the matching measurement vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDataset {
    regressors: DMatrix<f64>,
    measurements: DVector<f64>,
}

impl SystemDataset {
    pub fn new(regressors: DMatrix<f64>, measurements: DVector<f64>) -> Result<Self> {
        if regressors.nrows() != measurements.len() {
            return Err(FleetError::domain(format!(
                "regressor rows ({}) != measurement count ({})",
                regressors.nrows(),
                measurements.len()
            )));
        }
        if measurements.is_empty() {
            return Err(FleetError::domain("a system needs at least one observation"));
        }
        if regressors.ncols() == 0 {
            return Err(FleetError::domain("parameter dimension must be at least 1"));
        }
        if regressors.iter().chain(measurements.iter()).any(|v| !v.is_finite()) {
            return Err(FleetError::domain("non-finite entry in system data"));
        }
        Ok(Self {
            regressors,
            measurements,
        })
    }

    /// Convenience constructor from row-major regressors.
    pub fn from_rows(dim: usize, regressors: &[f64], measurements: &[f64]) -> Result<Self> {
        if dim == 0 || regressors.len() != dim * measurements.len() {
            return Err(FleetError::domain("regressor buffer does not match dimensions"));
        }
        Self::new(
            DMatrix::from_row_slice(measurements.len(), dim, regressors),
            DVector::from_column_slice(measurements),
        )
    }

    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    pub fn measurements(&self) -> &DVector<f64> {
        &self.measurements
    }

    pub fn observations(&self) -> usize {
        self.measurements.len()
    }

    pub fn dim(&self) -> usize {
        self.regressors.ncols()
    }

    pub fn stats(&self) -> SystemStats {
        SystemStats {
            gram: self.regressors.tr_mul(&self.regressors),
            moment: self.regressors.tr_mul(&self.measurements),
            yy: self.measurements.dot(&self.measurements),
            observations: self.observations(),
        }
    }
}

/// Parameters that generated a synthetic fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True parameter of every system, in system order.
    pub parameters: Vec<Vec<f64>>,
    /// Zero-based indices of the systems drawn from the anomalous distribution.
    pub anomalies: Vec<usize>,
    pub noise_variance: f64,
}

impl GroundTruth {
    /// One-based tags of the anomalous systems.
    pub fn tags(&self) -> Vec<usize> {
        self.anomalies.iter().map(|i| i + 1).collect()
    }
}

/// An ordered population of systems sharing one parameter dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetDataset {
    systems: Vec<SystemDataset>,
    truth: Option<GroundTruth>,
}

impl FleetDataset {
    pub fn new(systems: Vec<SystemDataset>, truth: Option<GroundTruth>) -> Result<Self> {
        let first = systems
            .first()
            .ok_or_else(|| FleetError::domain("a fleet needs at least one system"))?;
        let m = first.dim();
        if let Some(bad) = systems.iter().position(|s| s.dim() != m) {
            return Err(FleetError::domain(format!(
                "system {bad} has dimension {} but the fleet uses {m}",
                systems[bad].dim()
            )));
        }
        if let Some(t) = &truth {
            let mut sorted = t.anomalies.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != t.anomalies.len() || sorted.iter().any(|&i| i >= systems.len()) {
                return Err(FleetError::domain("ground-truth anomaly indices out of range"));
            }
            if t.parameters.len() != systems.len() || t.parameters.iter().any(|p| p.len() != m) {
                return Err(FleetError::domain("ground-truth parameters do not match the fleet"));
            }
        }
        Ok(Self { systems, truth })
    }

    pub fn systems(&self) -> &[SystemDataset] {
        &self.systems
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.systems[0].dim()
    }

    pub fn total_observations(&self) -> usize {
        self.systems.iter().map(|s| s.observations()).sum()
    }

    /// Relabel systems: new system `j` is old system `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(FleetError::domain("not a permutation of the fleet"));
        }
        let systems = perm.iter().map(|&p| self.systems[p].clone()).collect();
        let truth = self.truth.as_ref().map(|t| {
            let mut inverse = vec![0; n];
            for (new, &old) in perm.iter().enumerate() {
                inverse[old] = new;
            }
            let mut anomalies: Vec<usize> = t.anomalies.iter().map(|&a| inverse[a]).collect();
            anomalies.sort_unstable();
            GroundTruth {
                parameters: perm.iter().map(|&p| t.parameters[p].clone()).collect(),
                anomalies,
                noise_variance: t.noise_variance,
            }
        });
        Self::new(systems, truth)
    }

    pub fn stats(&self) -> FleetStats {
        FleetStats::new(self.systems.iter().map(SystemDataset::stats).collect())
    }
}

/// Sufficient statistics of one system for quadratic losses.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemStats {
    /// `ΦᵀΦ`
    pub gram: DMatrix<f64>,
    /// `ΦᵀY`
    pub moment: DVector<f64>,
    /// `YᵀY`
    pub yy: f64,
    pub observations: usize,
}

impl SystemStats {
    /// Sum of squared residuals at `theta`, evaluated from the cached moments.
    pub fn sse(&self, theta: &DVector<f64>) -> f64 {
        let quad = theta.dot(&(&self.gram * theta));
        (self.yy - 2.0 * theta.dot(&self.moment) + quad).max(0.0)
    }

    /// `2 Φᵀ(Y − Φθ)`, the negative gradient of the squared loss.
    pub fn neg_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        (&self.moment - &self.gram * theta) * 2.0
    }
}

/// Per-system statistics plus their pooled sums.
#[derive(Debug, Clone)]
pub struct FleetStats {
    pub systems: Vec<SystemStats>,
    pub pooled_gram: DMatrix<f64>,
    pub pooled_moment: DVector<f64>,
}

impl FleetStats {
    pub fn new(systems: Vec<SystemStats>) -> Self {
        let m = systems[0].moment.len();
        let mut pooled_gram = DMatrix::zeros(m, m);
        let mut pooled_moment = DVector::zeros(m);
        for s in &systems {
            pooled_gram += &s.gram;
            pooled_moment += &s.moment;
        }
        Self {
            systems,
            pooled_gram,
            pooled_moment,
        }
    }

    pub fn dim(&self) -> usize {
        self.pooled_moment.len()
    }

    /// Least squares over all systems pooled.
    pub fn pooled_least_squares(&self) -> Result<DVector<f64>> {
        solve_normal_equations(&self.pooled_gram, &self.pooled_moment, "pooled fit")
    }
}

/// Norm used in the deviation penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PNorm {
    L1,
    L2,
}

impl PNorm {
    pub fn from_p(p: u8) -> Result<Self> {
        match p {
            1 => Ok(PNorm::L1),
            2 => Ok(PNorm::L2),
            _ => Err(FleetError::domain(format!("p must be 1 or 2, got {p}"))),
        }
    }

    pub fn p(self) -> u8 {
        match self {
            PNorm::L1 => 1,
            PNorm::L2 => 2,
        }
    }

    pub fn norm(self, v: &DVector<f64>) -> f64 {
        match self {
            PNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            PNorm::L2 => v.norm(),
        }
    }

    /// Dual norm: ∞-norm for p = 1, 2-norm for p = 2.
    pub fn dual_norm(self, v: &DVector<f64>) -> f64 {
        match self {
            PNorm::L1 => linalg::sup_norm(v),
            PNorm::L2 => v.norm(),
        }
    }
}

impl TryFrom<u8> for PNorm {
    type Error = FleetError;
    fn try_from(p: u8) -> Result<Self> {
        PNorm::from_p(p)
    }
}

impl From<PNorm> for u8 {
    fn from(p: PNorm) -> u8 {
        p.p()
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.p())
    }
}

/// A candidate anomaly set: sorted, duplicate-free, zero-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Hypothesis {
    anomaly_set: Vec<usize>,
}

impl Hypothesis {
    pub fn new(mut anomaly_set: Vec<usize>, fleet_size: usize) -> Result<Self> {
        anomaly_set.sort_unstable();
        let len = anomaly_set.len();
        anomaly_set.dedup();
        if anomaly_set.len() != len {
            return Err(FleetError::domain("duplicate index in hypothesis"));
        }
        if anomaly_set.last().is_some_and(|&i| i >= fleet_size) {
            return Err(FleetError::domain("hypothesis index out of range"));
        }
        Ok(Self { anomaly_set })
    }

    pub fn empty() -> Self {
        Self {
            anomaly_set: Vec::new(),
        }
    }

    pub fn anomaly_set(&self) -> &[usize] {
        &self.anomaly_set
    }

    pub fn tags(&self) -> Vec<usize> {
        self.anomaly_set.iter().map(|i| i + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.anomaly_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anomaly_set.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.anomaly_set.binary_search(&i).is_ok()
    }
}

/// Solver bookkeeping that travels with a [`Solution`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: String,
    pub iterations: usize,
    pub converged: bool,
    pub objective_history: Vec<f64>,
    pub primal_residuals: Vec<f64>,
    pub dual_residuals: Vec<f64>,
    pub rho_history: Vec<f64>,
    /// Support size after each iteration (distributed solver only).
    pub support_history: Vec<usize>,
    pub kkt_residual: Option<f64>,
}

/// Nominal and per-system estimates with their derived deviation norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub nominal: DVector<f64>,
    pub per_system: Vec<DVector<f64>>,
    pub deviations: Vec<f64>,
    /// Zero-based indices with deviation above `support_tolerance`.
    pub flagged: Vec<usize>,
    pub objective: f64,
    pub lambda: f64,
    pub p: PNorm,
    pub support_tolerance: f64,
    pub diagnostics: Diagnostics,
}

impl Solution {
    /// Builds a solution, deriving deviations and the flagged set.
    pub fn new(
        nominal: DVector<f64>,
        per_system: Vec<DVector<f64>>,
        lambda: f64,
        p: PNorm,
        support_tolerance: f64,
        objective: f64,
        diagnostics: Diagnostics,
    ) -> Self {
        let deviations = deviation_norms(&nominal, &per_system, p);
        let flagged = support(&deviations, support_tolerance);
        Self {
            nominal,
            per_system,
            deviations,
            flagged,
            objective,
            lambda,
            p,
            support_tolerance,
            diagnostics,
        }
    }

    pub fn flagged_tags(&self) -> Vec<usize> {
        self.flagged.iter().map(|i| i + 1).collect()
    }

    /// True when the stored deviations and flagged set are exactly what the
    /// estimates imply.
    pub fn is_consistent(&self) -> bool {
        let dev = deviation_norms(&self.nominal, &self.per_system, self.p);
        dev.iter()
            .zip(&self.deviations)
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && dev.len() == self.deviations.len()
            && support(&dev, self.support_tolerance) == self.flagged
            && self.objective.is_finite()
    }
}

pub fn deviation_norms(nominal: &DVector<f64>, per_system: &[DVector<f64>], p: PNorm) -> Vec<f64> {
    per_system.iter().map(|t| p.norm(&(t - nominal))).collect()
}

/// Indices whose deviation exceeds the tolerance.
pub fn support(deviations: &[f64], tolerance: f64) -> Vec<usize> {
    deviations
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > tolerance)
        .map(|(i, _)| i)
        .collect()
}

/// Exact binomial coefficient `C(n, k)`.
pub fn binomial_count(n: i64, k: i64) -> Result<u128> {
    if n < 0 || k < 0 {
        return Err(FleetError::domain("binomial arguments must be nonnegative"));
    }
    if k > n {
        return Err(FleetError::domain(format!("cannot choose {k} of {n}")));
    }
    let k = k.min(n - k) as u128;
    let n = n as u128;
    let mut c: u128 = 1;
    for i in 0..k {
        // c·(n−i)/(i+1) = C(n, i+1) is an integer; cancelling g = gcd(c, i+1)
        // first leaves (i+1)/g dividing (n−i), so only the result can overflow.
        let g = gcd(c, i + 1);
        let d = (i + 1) / g;
        c = (c / g)
            .checked_mul((n - i) / d)
            .ok_or_else(|| FleetError::domain("binomial coefficient overflows 128 bits"))?;
    }
    Ok(c)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// How [`least_squares_with`] treats a rank-deficient Gram matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LsOptions {
    /// Add `1e-10 * trace(Gram) / m` to the diagonal instead of failing.
    pub ridge_fallback: bool,
}

/// Least squares over one or more systems stacked together.
pub fn least_squares(systems: &[SystemDataset]) -> Result<DVector<f64>> {
    least_squares_with(systems, LsOptions::default())
}

pub fn least_squares_with(systems: &[SystemDataset], opts: LsOptions) -> Result<DVector<f64>> {
    let first = systems
        .first()
        .ok_or_else(|| FleetError::domain("least squares needs at least one system"))?;
    let m = first.dim();
    let mut gram = DMatrix::zeros(m, m);
    let mut moment = DVector::zeros(m);
    for s in systems {
        if s.dim() != m {
            return Err(FleetError::domain("systems disagree on parameter dimension"));
        }
        gram += s.regressors.tr_mul(&s.regressors);
        moment += s.regressors.tr_mul(&s.measurements);
    }
    match solve_normal_equations(&gram, &moment, "least squares") {
        Err(FleetError::Singular { .. }) if opts.ridge_fallback => {
            let eps = 1e-10 * gram.trace().max(f64::MIN_POSITIVE) / m as f64;
            let ridged = &gram + DMatrix::identity(m, m) * eps;
            solve_normal_equations(&ridged, &moment, "ridge least squares")
        }
        other => other,
    }
}

/// Solves `G θ = b` for a symmetric positive definite Gram matrix, with one
/// step of iterative refinement.
pub fn solve_normal_equations(
    gram: &DMatrix<f64>,
    moment: &DVector<f64>,
    context: &str,
) -> Result<DVector<f64>> {
    let chol = linalg::spd_factor(gram, context)?;
    let mut theta = chol.solve(moment);
    let residual = moment - gram * &theta;
    theta += chol.solve(&residual);
    Ok(theta)
}

/// `Σ_t (y(t) − φ(t)ᵀθ)²` evaluated on the raw data.
pub fn residual_sse(data: &SystemDataset, theta: &DVector<f64>) -> Result<f64> {
    if theta.len() != data.dim() {
        return Err(FleetError::domain(format!(
            "parameter has dimension {} but the system uses {}",
            theta.len(),
            data.dim()
        )));
    }
    let r = data.measurements() - data.regressors() * theta;
    Ok(r.norm_squared())
}

/// Which parameter elements of which systems can show a detectable deviation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InformativityReport {
    /// `detectable[i][q]` is false when a deviation in element `q` of system
    /// `i` cannot be seen against the rest of the fleet.
    pub detectable: Vec<Vec<bool>>,
    pub pooled_rank: usize,
    pub dim: usize,
}

impl InformativityReport {
    /// `(system, element)` pairs that are not detectable, zero-based.
    pub fn undetectable(&self) -> Vec<(usize, usize)> {
        self.detectable
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &ok)| !ok)
                    .map(move |(q, _)| (i, q))
            })
            .collect()
    }

    pub fn all_detectable(&self) -> bool {
        self.detectable.iter().flatten().all(|&d| d)
    }

    pub fn pooled_full_rank(&self) -> bool {
        self.pooled_rank == self.dim
    }
}

/// Element `q` of system `i` is undetectable when
/// `φ_i(t₁)ᵀ Q φ_j(t₂) = 0` for every other system `j` and all `t₁, t₂`,
/// with `Q` selecting entry `(q, q)`. That product is
/// `φ_{i,q}(t₁) φ_{j,q}(t₂)`, so the test reduces to column maxima.
pub fn informativity_check(fleet: &FleetDataset) -> InformativityReport {
    let m = fleet.dim();
    let n = fleet.len();
    let colmax: Vec<Vec<f64>> = fleet
        .systems()
        .iter()
        .map(|s| {
            (0..m)
                .map(|q| s.regressors().column(q).iter().fold(0.0_f64, |a, v| a.max(v.abs())))
                .collect()
        })
        .collect();
    let detectable = (0..n)
        .map(|i| {
            (0..m)
                .map(|q| {
                    let others = (0..n)
                        .filter(|&j| j != i)
                        .fold(0.0_f64, |a, j| a.max(colmax[j][q]));
                    colmax[i][q] * others != 0.0
                })
                .collect()
        })
        .collect();
    let pooled_rank = linalg::numerical_rank(&fleet.stats().pooled_gram);
    InformativityReport {
        detectable,
        pooled_rank,
        dim: m,
    }
}
