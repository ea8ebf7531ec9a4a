//! Convergence diagnostics: order estimates, the `c₁` fit, `k₀`, reports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::leastsquares::{predicted_k0, IterationRecord, LsOutcome, Status};

/// Order estimates `q_k = ln(√E_{k+1}/√E_k) / ln(√E_k/√E_{k−1})`, `NaN`
/// at the ends, where a value is zero, or where the denominator is below `1e-12`.
pub fn order_sequence(e: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NAN; e.len()];
    for k in 1..e.len().saturating_sub(1) {
        let (a, b, c) = (e[k - 1].sqrt(), e[k].sqrt(), e[k + 1].sqrt());
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            continue;
        }
        let den = (b / a).ln();
        if den.abs() < 1e-12 {
            continue;
        }
        out[k] = (c / b).ln() / den;
    }
    out
}

/// One-step estimate of `c₁` from `√E_{k+1} ≤ (|1−λ| + c₁λ^{1+p}√E_k^p)√E_k`.
pub fn c1_step(se_k: f64, se_next: f64, lambda: f64, p: f64) -> f64 {
    if !(lambda > 0.0) || !(se_k > 0.0) {
        return f64::NAN;
    }
    (se_next - (1.0 - lambda).abs() * se_k) / (lambda.powf(1.0 + p) * se_k.powf(1.0 + p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C1Fit {
    /// Mean of the positive per-step values.
    pub c1: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
    /// `c₁^{1/p}`
    pub c2: f64,
}

/// Fits `c₁` on the records that took a step and are above `floor` in `√E`.
pub fn fit_c1(records: &[&IterationRecord], p: f64, floor: f64) -> Option<C1Fit> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.sqrt_e > floor && r.c1.is_finite() && r.c1 > 0.0)
        .map(|r| r.c1)
        .collect();
    if vals.is_empty() {
        return None;
    }
    let c1 = vals.iter().sum::<f64>() / vals.len() as f64;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c2 = if p > 0.0 { c1.powf(1.0 / p) } else { f64::NAN };
    Some(C1Fit { c1, min, max, samples: vals.len(), c2 })
}

/// First `k` with a valid `q_k ≥ threshold`.
pub fn observed_onset(records: &[&IterationRecord], threshold: f64) -> Option<usize> {
    records.iter().find(|r| r.order_valid && r.order >= threshold).map(|r| r.k)
}

/// Last order estimate that is not polluted by the floor.
pub fn final_valid_order(records: &[&IterationRecord]) -> Option<f64> {
    records.iter().rev().find(|r| r.order_valid && r.order.is_finite()).map(|r| r.order)
}

/// Summary of one least-squares run (`summary.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub status: Status,
    pub iterations: usize,
    pub e0: f64,
    pub e_final: f64,
    pub tol_e: f64,
    pub e_floor: f64,
    pub s_final: f64,
    pub restarts: usize,
    pub restart_reasons: Vec<String>,
    pub p: f64,
    pub c1: Option<C1Fit>,
    pub k0_predicted: Option<usize>,
    pub onset_observed: Option<usize>,
    pub max_order: f64,
    pub final_order: Option<f64>,
    pub last_lambdas: Vec<f64>,
    pub max_drift: f64,
    pub series_mismatch: f64,
    /// Forward-simulated `‖y(·,T)‖₂`.
    pub terminal_norm: f64,
    pub terminal_ratio: f64,
    /// `‖Πy(·,T)‖₂` of the iterate itself.
    pub projected_terminal: f64,
    pub projection_error: f64,
}

impl ConvergenceReport {
    pub fn from_outcome(out: &LsOutcome, p: f64) -> Self {
        let recs = out.final_phase();
        let tail_floor = (out.e_floor.max(out.tol_e * out.tol_e)).sqrt() * 10.0;
        let c1 = fit_c1(&recs, p, tail_floor);
        let k0_predicted = c1.and_then(|f| predicted_k0(out.e0, f.c2, p));
        let last = recs.last().map(|r| (r.k, r.e)).unwrap_or((0, out.e0));
        let lambdas: Vec<f64> = recs.iter().filter(|r| r.lambda.is_finite()).map(|r| r.lambda).collect();
        let last_lambdas = lambdas[lambdas.len().saturating_sub(3)..].to_vec();
        ConvergenceReport {
            status: out.status,
            iterations: last.0,
            e0: out.e0,
            e_final: last.1,
            tol_e: out.tol_e,
            e_floor: out.e_floor,
            s_final: out.phase.s(),
            restarts: out.restarts.len(),
            restart_reasons: out.restarts.iter().map(|r| format!("s = {}: {}", r.s, r.reason)).collect(),
            p,
            c1,
            k0_predicted,
            onset_observed: observed_onset(&recs, 1.5),
            max_order: recs
                .iter()
                .filter(|r| r.order_valid)
                .map(|r| r.order)
                .filter(|q| q.is_finite())
                .fold(f64::NAN, f64::max),
            final_order: final_valid_order(&recs),
            last_lambdas,
            max_drift: recs.iter().map(|r| r.drift).fold(0.0, f64::max),
            series_mismatch: out.series_mismatch,
            terminal_norm: out.terminal_norm,
            terminal_ratio: if out.u0_norm > 0.0 { out.terminal_norm / out.u0_norm } else { out.terminal_norm },
            projected_terminal: out.projected_terminal,
            projection_error: out.projection_error,
        }
    }

    pub fn converged(&self) -> bool {
        matches!(self.status, Status::Converged | Status::Floor)
    }
}

/// One grid of a refinement study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub nx: usize,
    pub nt: usize,
    pub h: f64,
    pub iterations: usize,
    pub e_final: f64,
    pub e_floor: f64,
    pub terminal_norm: f64,
    /// Terminal norm of the previous (coarser) level over this one.
    pub terminal_reduction: f64,
    pub s_final: f64,
    /// Energy ratio of the linear estimate at `s_final`, monitored only.
    pub monitor: f64,
    /// `max |y_h − y_finest|` on the coarse grid's nodes, relative.
    pub diff_to_finest: f64,
    pub seconds: f64,
}

/// `log(e_i/e_{i+1}) / log(h_i/h_{i+1})` between consecutive rows.
pub fn observed_rates(rows: &[RefinementRow]) -> Vec<f64> {
    rows.windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            if a.diff_to_finest > 0.0 && b.diff_to_finest > 0.0 {
                (a.diff_to_finest / b.diff_to_finest).ln() / (a.h / b.h).ln()
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Writes `series,x,y` rows.
pub fn write_long_csv(path: &Path, series: &[(&str, Vec<(f64, f64)>)]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "series,x,y")?;
    for (name, pts) in series {
        for (x, y) in pts {
            writeln!(f, "{name},{x:e},{y:e}")?;
        }
    }
    f.flush()
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

/// Markdown report of a run.
pub fn markdown_report(title: &str, rep: &ConvergenceReport, trace: &[IterationRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}\n");
    let _ = writeln!(s, "| quantity | value |\n|---|---|");
    let _ = writeln!(s, "| status | {:?} |", rep.status);
    let _ = writeln!(s, "| iterations | {} |", rep.iterations);
    let _ = writeln!(s, "| E0 | {:.4e} |", rep.e0);
    let _ = writeln!(s, "| E final | {:.4e} |", rep.e_final);
    let _ = writeln!(s, "| tolerance on sqrt(E) | {:.3e} |", rep.tol_e);
    let _ = writeln!(s, "| s (final) | {} |", rep.s_final);
    let _ = writeln!(s, "| restarts | {} |", rep.restarts);
    if let Some(c) = rep.c1 {
        let _ = writeln!(s, "| c1 (mean, min..max, n) | {:.4e} ({:.3e}..{:.3e}, {}) |", c.c1, c.min, c.max, c.samples);
    }
    let _ = writeln!(s, "| k0 predicted / observed | {} / {} |", fmt_opt(rep.k0_predicted), fmt_opt(rep.onset_observed));
    let _ = writeln!(s, "| max / final valid order | {:.3} / {} |", rep.max_order, fmt_opt(rep.final_order.map(|q| format!("{q:.3}"))));
    let _ = writeln!(s, "| |y(T)| / |u0| | {:.3e} |", rep.terminal_ratio);
    let _ = writeln!(s, "| max residual drift | {:.3e} |", rep.max_drift);
    for r in &rep.restart_reasons {
        let _ = writeln!(s, "\nrestart: {r}");
    }
    let _ = writeln!(s, "\n| phase | k | E | lambda | order | s |\n|---|---|---|---|---|---|");
    for r in trace {
        let _ = writeln!(s, "| {} | {} | {:.4e} | {:.4} | {:.3} | {} |", r.phase, r.k, r.e, r.lambda, r.order, r.s);
    }
    s
}
