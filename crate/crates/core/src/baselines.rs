//! Competing linearizations, run at fixed `s` and scored with the same `E`.
//!
//! * Picard: potential `g̃(y_k)`, no source.
//! * Weighted Picard: Picard with `y_k` clamped to `[−M_cap, M_cap]` inside `g̃`.
//! * Undamped Newton: the least-squares step with `λ = 1`.
//! * Controlled variant: potential `g′(y_k)`, source `g′(y_k)y_k − g(y_k)`.
//! * Fixed point `K`: no potential, source `−g(y_k)`.
//!
//! Each step except Newton is a null-controlled pair of a linear problem
//! with datum `u₀`.

use crate::clock::Clock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{PointField, SpaceTimeGrid};
use crate::leastsquares::{self, ControlPair, IterationRecord, LsError, Phase};
use crate::linear_control::{self, AdjointOperator, LinearControlError, LinearControlProblem, PSystem};
use crate::nonlinearity::NonlinearitySpec;
use crate::weights::{WeightParams, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    PicardGtilde,
    NewtonUndamped,
    ControlledVariant,
    FixedPointK,
    WeightedPicard,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::PicardGtilde,
        BaselineKind::NewtonUndamped,
        BaselineKind::ControlledVariant,
        BaselineKind::FixedPointK,
        BaselineKind::WeightedPicard,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::PicardGtilde => "picard_gtilde",
            BaselineKind::NewtonUndamped => "newton_undamped",
            BaselineKind::ControlledVariant => "controlled_variant",
            BaselineKind::FixedPointK => "fixed_point_k",
            BaselineKind::WeightedPicard => "weighted_picard",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Ls(#[from] LsError),
    #[error(transparent)]
    Linear(#[from] LinearControlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub s: f64,
    pub max_iter: usize,
    /// Divergence is declared at `‖y‖_∞ > 10·m_cap·max(1, ‖u₀‖_∞)`.
    pub m_cap: f64,
    /// Stop when `√E ≤ tol_e`; `None` means `1e-8·(1 + √E₀)`.
    pub tol_e: Option<f64>,
    /// Also stop when `‖ρ(y_{k+1} − y_k)‖ ≤ tol_step·‖ρy_{k+1}‖`.
    pub tol_step: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { s: 1.0, max_iter: 50, m_cap: 1e3, tol_e: None, tol_step: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineStatus {
    Converged,
    /// `‖y‖_∞` above `10·M_cap` or non-finite.
    Diverged,
    /// Step cap reached without convergence; classified as divergence.
    Stalled,
}

impl BaselineStatus {
    pub fn is_divergent(&self) -> bool {
        !matches!(self, BaselineStatus::Converged)
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub kind: BaselineKind,
    pub status: BaselineStatus,
    pub reason: String,
    pub trace: Vec<IterationRecord>,
    pub pair: ControlPair,
    pub phase: Phase,
    /// Steps whose potential exceeded what `s` covers (`s < ‖A‖_∞^{2/3}`).
    pub s_deficits: usize,
    pub terminal_norm: f64,
    pub u0_norm: f64,
}

/// Potential and source of one linear step, as point data.
fn linearization(kind: BaselineKind, phase: &Phase, y_hat: &[f64], m_cap: f64) -> (Option<PointField>, Option<PointField>) {
    let g = &phase.g;
    let y = phase.physical(y_hat);
    match kind {
        BaselineKind::PicardGtilde => (Some(y.map(|v| g.gtilde(v))), None),
        BaselineKind::WeightedPicard => (Some(y.map(|v| g.gtilde(v.clamp(-m_cap, m_cap)))), None),
        BaselineKind::ControlledVariant => {
            let a = y.map(|v| g.gprime(v));
            // ρ(g′(y)y − g(y)) = g′(y)ŷ − g̃(y)ŷ
            let rb: Vec<f64> = (0..y.len()).map(|i| (g.gprime(y[i]) - g.gtilde(y[i])) * y_hat[i]).collect();
            (Some(a), Some(phase.ws.rho_to_rho0(&rb)))
        }
        BaselineKind::FixedPointK => {
            let rb: Vec<f64> = (0..y.len()).map(|i| -g.gtilde(y[i]) * y_hat[i]).collect();
            (None, Some(phase.ws.rho_to_rho0(&rb)))
        }
        BaselineKind::NewtonUndamped => unreachable!("Newton steps through the least-squares machinery"),
    }
}

/// One linear step: the null-controlled pair with potential `a`, source
/// `ρ₀B` and datum `u₀`. Returns the pair and whether `s` covers `a`.
pub fn linear_step(phase: &Phase, a: Option<PointField>, rho0_b: Option<PointField>) -> Result<(ControlPair, bool), BaselineError> {
    let pb = LinearControlProblem { a, z0: Some(phase.u0.clone()), rho0_b, functional: None };
    let covered = pb.check_s(&phase.ws).is_ok();
    let sys = PSystem { matrix: phase.ws.assemble_matrix(pb.a.as_deref()), rhs: linear_control::assemble_rhs(&phase.ws, &pb)? };
    let op = AdjointOperator::new(sys.matrix)?;
    let (p_hat, _) = op.solve(&sys.rhs, linear_control::ADJOINT_TOL)?;
    let (y_hat, f_hat) = phase.ws.reconstruct_fields(pb.a.as_deref(), &p_hat);
    Ok((phase.pair(y_hat, f_hat, false)?, covered))
}

/// One step of a non-Newton baseline from `y_k`.
pub fn baseline_step(kind: BaselineKind, phase: &Phase, pair: &ControlPair, m_cap: f64) -> Result<(ControlPair, bool), BaselineError> {
    let (a, b) = linearization(kind, phase, &pair.y_hat, m_cap);
    linear_step(phase, a, b)
}

/// Runs a baseline from the linear initial pair at fixed `s`.
pub fn run(
    kind: BaselineKind,
    grid: &SpaceTimeGrid,
    params: WeightParams,
    g: &NonlinearitySpec,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    cfg: &BaselineConfig,
) -> Result<BaselineOutcome, BaselineError> {
    let clock = Clock::start();
    let s = cfg.s.max(params.s0);
    let weights = WeightSet::new(params.with_s(s), grid).map_err(LsError::from)?;
    let u0s = linear_control::sample_initial(grid, u0);
    let u0_norm = grid.spatial_points().iter().zip(&u0s).map(|((_, w), v)| w * v * v).sum::<f64>().sqrt();
    let cap = cfg.m_cap * u0s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let phase = Phase::new(grid, &weights, g, u0s)?;
    let mut pair = phase.initialize_linear()?;
    let tol_e = cfg.tol_e.unwrap_or(1e-8 * (1.0 + pair.e_value.sqrt()));
    let mut trace = Vec::new();
    let mut s_deficits = 0;
    let mut status = BaselineStatus::Stalled;
    let mut reason = format!("no convergence within {} steps", cfg.max_iter);
    let mut increment = f64::NAN;
    for k in 0..=cfg.max_iter {
        let y_sup = phase.physical(&pair.y_hat).sup_norm();
        let mut rec = IterationRecord {
            k,
            e: pair.e_value,
            sqrt_e: pair.e_value.sqrt(),
            lambda: f64::NAN,
            y_sup,
            s,
            order: f64::NAN,
            c1: f64::NAN,
            seconds: clock.seconds(),
            phase: 0,
            drift: 0.0,
            norm_ratio: f64::NAN,
            e_floor: pair.e_floor,
            e_direct: pair.e_value,
            e_lin: f64::NAN,
            order_valid: false,
        };
        if !y_sup.is_finite() || y_sup > 10.0 * cap {
            trace.push(rec);
            status = BaselineStatus::Diverged;
            reason = format!("|y|_inf = {y_sup:.3e} above 10 M_cap max(1, |u0|_inf) at step {k}");
            break;
        }
        if pair.e_value.sqrt() <= tol_e || increment <= cfg.tol_step {
            trace.push(rec);
            status = BaselineStatus::Converged;
            reason = if pair.e_value.sqrt() <= tol_e { "sqrt(E) below tolerance".into() } else { "increment below tolerance".into() };
            break;
        }
        if k == cfg.max_iter {
            trace.push(rec);
            break;
        }
        rec.lambda = 1.0;
        let next = match kind {
            BaselineKind::NewtonUndamped => match phase.minimal_pair(&pair) {
                Ok(dir) => {
                    rec.e_lin = dir.e_lin;
                    leastsquares::advance(&phase, &pair, &dir, 1.0).map(|(p, c)| {
                        rec.drift = c.drift;
                        p
                    })
                }
                Err(LsError::NeedLargerS { .. }) => {
                    // Newton has no s control of its own: continue at fixed s
                    s_deficits += 1;
                    newton_unchecked(&phase, &pair).map(|(p, e_lin)| {
                        rec.e_lin = e_lin;
                        p
                    })
                }
                Err(e) => Err(e),
            },
            _ => match baseline_step(kind, &phase, &pair, cap) {
                Ok((p, covered)) => {
                    s_deficits += usize::from(!covered);
                    Ok(p)
                }
                Err(BaselineError::Ls(e)) => Err(e),
                Err(BaselineError::Linear(e)) => Err(LsError::Linear(e)),
            },
        };
        trace.push(rec);
        let next = match next {
            Ok(p) => p,
            Err(LsError::NonFinite { .. }) => {
                status = BaselineStatus::Diverged;
                reason = format!("non-finite nonlinearity at step {}", k + 1);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let diff = next.y_hat.axpy(1.0, &pair.y_hat);
        let nn = phase.ws.norm(&next.y_hat, false);
        increment = if nn > 0.0 { phase.ws.norm(&diff, false) / nn } else { 0.0 };
        pair = next;
    }
    annotate_orders(&mut trace, g.p);
    let terminal_norm = if status == BaselineStatus::Diverged {
        f64::NAN
    } else {
        phase.simulate(&pair).map(|f| f.terminal_l2).unwrap_or(f64::NAN)
    };
    Ok(BaselineOutcome { kind, status, reason, trace, pair, phase, s_deficits, terminal_norm, u0_norm })
}

/// Newton step when `s` does not cover `g′(y)`: the same minimal pair with
/// the check lifted.
fn newton_unchecked(phase: &Phase, pair: &ControlPair) -> Result<(ControlPair, f64), LsError> {
    let y = phase.physical(&pair.y_hat);
    let a = y.map(|v| phase.g.gprime(v));
    let pb = LinearControlProblem { a: Some(a.clone()), functional: Some(pair.r_hat.clone()), ..Default::default() };
    let sys = PSystem { matrix: phase.ws.assemble_matrix(Some(&a)), rhs: linear_control::assemble_rhs(&phase.ws, &pb)? };
    let op = AdjointOperator::new(sys.matrix)?;
    let (p_hat, _) = op.solve(&sys.rhs, linear_control::ADJOINT_TOL)?;
    let (y1, f1) = phase.ws.reconstruct_fields(Some(&a), &p_hat);
    let next = phase.pair(pair.y_hat.axpy(1.0, &y1), pair.f_hat.axpy(1.0, &f1), pair.homogeneous)?;
    Ok((next, f64::NAN))
}

fn annotate_orders(trace: &mut [IterationRecord], p: f64) {
    let e: Vec<f64> = trace.iter().map(|r| r.e).collect();
    let q = crate::diagnostics::order_sequence(&e);
    for (j, r) in trace.iter_mut().enumerate() {
        r.order = q[j];
        if j + 1 < e.len() {
            r.c1 = crate::diagnostics::c1_step(e[j].sqrt(), e[j + 1].sqrt(), 1.0, p);
        }
    }
}
