//! Report files: solution JSON, deviation/tuning/trace CSVs, oracle rankings,
//! and bar-chart SVGs. Outputs carry no timing data, so the same inputs
//! always give the same bytes. Systems are numbered from 1 in every file.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::baseline::ThresholdReport;
use crate::error::Result;
use crate::io::DatasetHeader;
use crate::model::{Diagnostics, Solution};
use crate::oracle::BruteForceResult;
use crate::tuning::BicRow;

pub const REPORT_FORMAT: &str = "fleet-report";
pub const REPORT_VERSION: u32 = 1;

/// Where the data came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetInfo {
    pub systems: usize,
    pub dim: usize,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl From<&DatasetHeader> for DatasetInfo {
    fn from(h: &DatasetHeader) -> Self {
        Self {
            systems: h.systems,
            dim: h.dim,
            seed: h.seed,
            config_hash: h.config_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Margin {
    pub threshold: f64,
    pub smallest_flagged: Option<f64>,
    pub largest_unflagged: Option<f64>,
    /// `null` when unbounded or undefined; see `margin_unbounded`.
    pub ratio: Option<f64>,
    pub unbounded: bool,
}

impl From<&ThresholdReport> for Margin {
    fn from(t: &ThresholdReport) -> Self {
        Self {
            threshold: t.threshold,
            smallest_flagged: t.smallest_flagged,
            largest_unflagged: t.largest_unflagged,
            ratio: t.margin_ratio.filter(|r| r.is_finite()),
            unbounded: t.margin_ratio.is_some_and(|r| r.is_infinite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionReport {
    pub format: &'static str,
    pub version: u32,
    pub method: String,
    pub lambda: f64,
    pub p: u8,
    pub dataset: Option<DatasetInfo>,
    /// One-based.
    pub flagged: Vec<usize>,
    pub support_tolerance: f64,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: Option<f64>,
    pub nominal: Vec<f64>,
    pub per_system: Vec<Vec<f64>>,
    pub deviations: Vec<f64>,
    pub margin: Option<Margin>,
    pub diagnostics: Diagnostics,
}

impl SolutionReport {
    pub fn new(sol: &Solution) -> Self {
        Self {
            format: REPORT_FORMAT,
            version: REPORT_VERSION,
            method: sol.diagnostics.method.clone(),
            lambda: sol.lambda,
            p: sol.p.p(),
            dataset: None,
            flagged: sol.flagged_tags(),
            support_tolerance: sol.support_tolerance,
            objective: sol.objective,
            converged: sol.diagnostics.converged,
            iterations: sol.diagnostics.iterations,
            kkt_residual: sol.diagnostics.kkt_residual,
            nominal: sol.nominal.iter().copied().collect(),
            per_system: sol.per_system.iter().map(|t| t.iter().copied().collect()).collect(),
            deviations: sol.deviations.clone(),
            margin: None,
            diagnostics: sol.diagnostics.clone(),
        }
    }

    pub fn with_dataset(mut self, info: DatasetInfo) -> Self {
        self.dataset = Some(info);
        self
    }

    pub fn with_margin(mut self, margin: Margin) -> Self {
        self.margin = Some(margin);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Shortest round-trip text for a float; scientific outside `[1e-4, 1e15)`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// `system,deviation,flagged`
pub fn deviation_csv(sol: &Solution) -> String {
    let mut out = String::from("system,deviation,flagged\n");
    for (i, d) in sol.deviations.iter().enumerate() {
        let f = sol.flagged.binary_search(&i).is_ok() as u8;
        let _ = writeln!(out, "{},{},{f}", i + 1, fmt_f64(*d));
    }
    out
}

/// `lambda,k,sse,bic,error`
pub fn tuning_csv(rows: &[BicRow]) -> String {
    let mut out = String::from("lambda,k,sse,bic,error\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(r.lambda),
            r.flagged,
            fmt_f64(r.sse),
            fmt_f64(r.bic),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
        );
    }
    out
}

/// `iteration,primal,dual,rho,objective,support` from a distributed solve.
pub fn trace_csv(diag: &Diagnostics) -> String {
    let mut out = String::from("iteration,primal,dual,rho,objective,support\n");
    let rows = diag.primal_residuals.len();
    for k in 0..rows {
        let get = |v: &[f64]| v.get(k).map_or(String::new(), |x| fmt_f64(*x));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            k + 1,
            get(&diag.primal_residuals),
            get(&diag.dual_residuals),
            get(&diag.rho_history),
            get(&diag.objective_history),
            diag.support_history.get(k).map_or(String::new(), |s| s.to_string())
        );
    }
    out
}

#[derive(Serialize)]
struct RankingEntry {
    anomalies: Vec<usize>,
    cost: f64,
}

#[derive(Serialize)]
struct RankingReport {
    format: &'static str,
    version: u32,
    k: usize,
    hypotheses: usize,
    best: Vec<usize>,
    best_cost: f64,
    ranking: Vec<RankingEntry>,
}

/// Best hypothesis plus the `top` lowest-cost ones, one-based.
pub fn ranking_json(result: &BruteForceResult, top: usize) -> Result<String> {
    let rep = RankingReport {
        format: "fleet-oracle-ranking",
        version: REPORT_VERSION,
        k: result.best.hypothesis.len(),
        hypotheses: result.ranking.len(),
        best: result.best.hypothesis.tags(),
        best_cost: result.best.cost,
        ranking: result
            .ranking
            .iter()
            .take(top)
            .map(|(h, c)| RankingEntry {
                anomalies: h.tags(),
                cost: *c,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&rep)?;
    s.push('\n');
    Ok(s)
}

/// Bar chart of one value per system; `highlight` (zero-based) bars are
/// drawn in red, and an optional horizontal line marks a threshold.
pub fn bar_chart_svg(title: &str, values: &[f64], highlight: &[usize], threshold: Option<f64>) -> String {
    const W: f64 = 800.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let max = values
        .iter()
        .copied()
        .chain(threshold)
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max);
    let scale = if max > 0.0 { (H - 2.0 * PAD) / max } else { 0.0 };
    let n = values.len().max(1) as f64;
    let bw = (W - 2.0 * PAD) / n;
    let base = H - PAD;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        W - PAD
    );
    for (i, v) in values.iter().enumerate() {
        let h = if v.is_finite() { v.max(0.0) * scale } else { 0.0 };
        let color = if highlight.contains(&i) { "#c0392b" } else { "#2c3e50" };
        let _ = writeln!(
            out,
            r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{color}"><title>{}: {}</title></rect>"#,
            PAD + i as f64 * bw,
            base - h,
            (bw * 0.8).max(0.5),
            h,
            i + 1,
            fmt_f64(*v)
        );
    }
    if let Some(t) = threshold.filter(|t| t.is_finite()) {
        let y = base - t * scale;
        let _ = writeln!(
            out,
            r#"<line x1="{PAD}" y1="{y:.3}" x2="{}" y2="{y:.3}" stroke="red" stroke-dasharray="4 2"/>"#,
            W - PAD
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="10">max {}</text>"#,
        PAD - 6.0,
        fmt_f64(max)
    );
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
