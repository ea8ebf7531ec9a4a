//! Damped Newton least-squares iteration for the semilinear null-control
//! problem.
//!
//! A pair `(y, f)` is measured by the weak residual
//! `R(q) = ∫y L*₀q + ∫g(y)q − ∫_{q_T} f q − ∫u₀q(0)` over the test space,
//! and `E = ½ RᵀG⁻¹R` with `G` the `ρ₀⁻²`-weighted Gram matrix of the test
//! space (the residual's `ρ₀`-weighted norm seen through the test space).
//! The descent direction `(Y¹, F¹)` is the minimal null control of the
//! equation linearized at `y` driven by the residual, so that
//! `R(y − λY¹) = (1−λ)R(y) + ∫ℓ(y, −λY¹)q` holds exactly.

use crate::clock::Clock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{PointField, SpaceTimeGrid};
use crate::linalg;
use crate::linear_control::{
    self, AdjointOperator, LinearControlError, LinearControlProblem, Scale, WeightedSpace,
};
use crate::forward::{self, Forward, ForwardError};
use crate::nonlinearity::NonlinearitySpec;
use crate::weights::{WeightError, WeightParams, WeightSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LsError {
    #[error("s = {s} too small for |g'(y)|_inf = {gprime_sup}")]
    NeedLargerS { s: f64, gprime_sup: f64 },
    #[error("non-finite residual at quadrature point {index} (x = {x}, t = {t})")]
    NonFinite { index: usize, x: f64, t: f64 },
    #[error(transparent)]
    Linear(#[from] LinearControlError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("line-search cap m must be >= 1, got {0}")]
    BadM(f64),
    #[error("no convergence after {restarts} restart(s): {reason}")]
    NoConvergence { restarts: usize, reason: String, trace: Vec<IterationRecord> },
}

/// How `(y₀, f₀)` is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    /// Controlled pair of the problem with `g ≡ 0`.
    #[default]
    Linear,
    /// `(χ(t)·e^{t∂ₓₓ}u₀, 0)` with a smooth cut-off `χ` vanishing on `[T/2, T]`.
    Cutoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LSConfig {
    /// Line-search interval `[0, m]`.
    pub m: f64,
    /// Stop when `√E ≤ tol_e`; `None` means `1e-8·(1 + √E₀)` per phase.
    pub tol_e: Option<f64>,
    pub max_iter: usize,
    pub s_init: f64,
    pub s_growth: f64,
    /// Restart with larger `s` when `‖y_k‖_∞` exceeds `m_cap·max(1, ‖u₀‖_∞)`.
    pub m_cap: f64,
    pub max_restarts: usize,
    pub initializer: Initializer,
    /// Force `λ_k = 1` (classical Newton).
    pub undamped: bool,
}

impl Default for LSConfig {
    fn default() -> Self {
        Self {
            m: 2.0,
            tol_e: None,
            max_iter: 50,
            s_init: 1.0,
            s_growth: 1.5,
            m_cap: 1e3,
            max_restarts: 5,
            initializer: Initializer::Linear,
            undamped: false,
        }
    }
}

/// A state-control pair with its cached residual.
#[derive(Debug, Clone)]
pub struct ControlPair {
    /// `ρy` at quadrature points.
    pub y_hat: PointField,
    /// `ρ₀f` at quadrature points (zero outside `q_T`).
    pub f_hat: PointField,
    /// Scaled weak residual `e^{d_i}R(q_i)`.
    pub r_hat: Vec<f64>,
    pub e_value: f64,
    /// Round-off level of `e_value`.
    pub e_floor: f64,
    /// `true` for `𝒜₀` (zero initial datum), `false` for `𝒜` (datum `u₀`).
    pub homogeneous: bool,
}

/// Newton direction and diagnostics.
#[derive(Debug, Clone)]
pub struct Direction {
    pub y1_hat: PointField,
    pub f1_hat: PointField,
    /// `g′(y)` at quadrature points.
    pub potential: PointField,
    /// `‖(Y¹, F¹)‖_{𝒜₀(s)}`
    pub norm_a0: f64,
    pub solver_residual: f64,
    /// `R − L_y(Y¹, F¹)`: what the inexact linear solve leaves of the
    /// residual, with `L_y` the equation linearized at `y`.
    pub lin_residual: Vec<f64>,
    /// `E` of `lin_residual`: the contraction the linear solve can resolve.
    pub e_lin: f64,
}

/// One value of `s`: weighted space, Gram factor, data.
#[derive(Debug, Clone)]
pub struct Phase {
    pub ws: WeightedSpace,
    gram: AdjointOperator,
    pub g: NonlinearitySpec,
    /// `u₀` at the spatial Gauss points.
    pub u0: Vec<f64>,
    u0_functional: Vec<f64>,
}

/// Outcome of a line search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineSearch {
    pub lambda: f64,
    pub e_value: f64,
    pub e_at_one: f64,
    pub evaluations: usize,
}

impl Phase {
    pub fn new(grid: &SpaceTimeGrid, weights: &WeightSet, g: &NonlinearitySpec, u0: Vec<f64>) -> Result<Self, LsError> {
        let ws = WeightedSpace::new(grid, weights);
        let gram = AdjointOperator::new(ws.assemble_gram())?;
        let u0_functional = ws.initial_functional(&u0)?;
        Ok(Self { ws, gram, g: g.clone(), u0, u0_functional })
    }

    pub fn s(&self) -> f64 {
        self.ws.s()
    }

    /// Physical `y` from `ρy`.
    pub fn physical(&self, y_hat: &[f64]) -> PointField {
        self.ws.unscale(y_hat, Scale::Rho)
    }

    /// `ρ g(y)` from `ρy`.
    fn g_hat(&self, y_hat: &[f64]) -> Vec<f64> {
        let lr = &self.ws.table.log_rho;
        y_hat
            .iter()
            .zip(lr.iter())
            .map(|(yh, l)| if *yh == 0.0 { 0.0 } else { self.g.gtilde(yh * (-l).exp()) * yh })
            .collect()
    }

    /// Scaled weak residual and the root-sum-square of its terms.
    pub fn residual(&self, y_hat: &[f64], f_hat: &[f64], homogeneous: bool) -> Result<(Vec<f64>, Vec<f64>), LsError> {
        let gh = self.g_hat(y_hat);
        if let Some(i) = gh.iter().position(|v| !v.is_finite()) {
            let (x, t) = self.ws.grid.point(i);
            return Err(LsError::NonFinite { index: i, x, t });
        }
        let neg_f: Vec<f64> = f_hat.iter().map(|v| -v).collect();
        let mut r = self.ws.functional(None, Some(y_hat), &[(&gh, Scale::Rho, false), (&neg_f, Scale::Rho0, true)]);
        let mut abs = self.ws.functional_rss(None, Some(y_hat), &[(&gh, Scale::Rho, false), (f_hat, Scale::Rho0, true)]);
        if !homogeneous {
            for i in 0..r.len() {
                r[i] -= self.u0_functional[i];
                abs[i] = abs[i].hypot(self.u0_functional[i]);
            }
        }
        Ok((r, abs))
    }

    /// `½ rᵀ Ĝ⁻¹ r`
    pub fn energy_of(&self, r_hat: &[f64]) -> Result<f64, LsError> {
        if r_hat.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        let (x, _) = self.gram.solve_tight(r_hat, TIGHT_ACCEPT)?;
        Ok(0.5 * linalg::dot(r_hat, &x).max(0.0))
    }

    /// Round-off level of `E` for a residual whose terms have root-sum-square `abs`.
    pub fn energy_floor(&self, abs: &[f64]) -> Result<f64, LsError> {
        let eps = FLOOR_ULPS * f64::EPSILON;
        let scaled: Vec<f64> = abs.iter().map(|v| eps * v).collect();
        self.energy_of(&scaled)
    }

    pub fn pair(&self, y_hat: PointField, f_hat: PointField, homogeneous: bool) -> Result<ControlPair, LsError> {
        let (r_hat, abs) = self.residual(&y_hat, &f_hat, homogeneous)?;
        let e_value = self.energy_of(&r_hat)?;
        let e_floor = self.energy_floor(&abs)?;
        Ok(ControlPair { y_hat, f_hat, r_hat, e_value, e_floor, homogeneous })
    }

    /// `E(s, y, f)` recomputed from scratch.
    pub fn energy(&self, pair: &ControlPair) -> Result<f64, LsError> {
        let (r, _) = self.residual(&pair.y_hat, &pair.f_hat, pair.homogeneous)?;
        self.energy_of(&r)
    }

    /// `‖(Y, F)‖_{𝒜₀(s)}` for a homogeneous pair.
    pub fn norm_a0(&self, y_hat: &[f64], f_hat: &[f64]) -> Result<f64, LsError> {
        let neg_f: Vec<f64> = f_hat.iter().map(|v| -v).collect();
        let s = self.ws.functional(None, Some(y_hat), &[(&neg_f, Scale::Rho0, true)]);
        let third = 2.0 * self.energy_of(&s)?;
        Ok((self.ws.inner(y_hat, y_hat, false) + self.ws.inner(f_hat, f_hat, true) + third).sqrt())
    }

    /// Minimal controlled pair `(Y¹, F¹)` of the equation linearized at `y`
    /// with source the current residual and zero initial datum.
    pub fn minimal_pair(&self, pair: &ControlPair) -> Result<Direction, LsError> {
        let y = self.physical(&pair.y_hat);
        let potential = PointField::from(y.iter().map(|v| self.g.gprime(*v)).collect::<Vec<_>>());
        let sup = potential.sup_norm();
        let required = sup.powf(2.0 / 3.0).max(self.ws.weights.params.s0);
        if self.s() + 1e-12 < required {
            return Err(LsError::NeedLargerS { s: self.s(), gprime_sup: sup });
        }
        if pair.r_hat.iter().all(|v| *v == 0.0) {
            let z = PointField::zeros(&self.ws.grid);
            let lin_residual = vec![0.0; pair.r_hat.len()];
            return Ok(Direction { y1_hat: z.clone(), f1_hat: z, potential, norm_a0: 0.0, solver_residual: 0.0, lin_residual, e_lin: 0.0 });
        }
        let pb = LinearControlProblem {
            a: Some(potential.clone()),
            functional: Some(pair.r_hat.clone()),
            ..Default::default()
        };
        let sys = linear_control::assemble_p_system(&self.ws, &pb)?;
        let op = AdjointOperator::new(sys.matrix)?;
        let (y1_hat, f1_hat, lin_residual, e_lin, info) = self.corrected_solve(&op, &sys.rhs, Some(&potential))?;
        let norm_a0 = self.norm_a0(&y1_hat, &f1_hat)?;
        Ok(Direction { y1_hat, f1_hat, potential, norm_a0, solver_residual: info.residual, lin_residual, e_lin })
    }

    /// Solves the adjoint system and reconstructs `(ρz, ρ₀v)`, then applies
    /// up to three defect corrections with the residual `rhs − L(z, v)`
    /// evaluated by quadrature, which is more accurate than the banded
    /// matrix-vector product. Returns the fields, the defect and its energy.
    #[allow(clippy::type_complexity)]
    fn corrected_solve(
        &self,
        op: &AdjointOperator,
        rhs: &[f64],
        potential: Option<&[f64]>,
    ) -> Result<(PointField, PointField, Vec<f64>, f64, linalg::SolveInfo), LsError> {
        let (mut p_hat, info) = op.solve_tight(rhs, TIGHT_ACCEPT)?;
        let defect = |p_hat: &[f64]| -> Result<(PointField, PointField, Vec<f64>, f64), LsError> {
            let (y1, f1) = self.ws.reconstruct_fields(potential, p_hat);
            let neg_f: Vec<f64> = f1.iter().map(|v| -v).collect();
            let applied = self.ws.functional(potential, Some(&y1), &[(&neg_f, Scale::Rho0, true)]);
            let res: Vec<f64> = rhs.iter().zip(&applied).map(|(r, a)| r - a).collect();
            let e = self.energy_of(&res)?;
            Ok((y1, f1, res, e))
        };
        let (mut y1_hat, mut f1_hat, mut res, mut e) = defect(&p_hat)?;
        for _ in 0..3 {
            let (dp, _) = op.solve_tight(&res, TIGHT_ACCEPT)?;
            let cand: Vec<f64> = p_hat.iter().zip(&dp).map(|(a, b)| a + b).collect();
            let (y1, f1, r2, e2) = defect(&cand)?;
            if !(e2 < 0.25 * e) {
                break;
            }
            (p_hat, y1_hat, f1_hat, res, e) = (cand, y1, f1, r2, e2);
        }
        Ok((y1_hat, f1_hat, res, e, info))
    }

    /// `ρℓ(y, −λY¹) = ρ[g(y − λY¹) − g(y) + λg′(y)Y¹]` at quadrature points.
    fn remainder_hat(&self, pair: &ControlPair, dir: &Direction, lambda: f64) -> Vec<f64> {
        if self.g.is_linear() {
            return vec![0.0; pair.y_hat.len()];
        }
        let lr = &self.ws.table.log_rho;
        (0..pair.y_hat.len())
            .map(|i| {
                let yh = pair.y_hat[i];
                let dh = lambda * dir.y1_hat[i];
                if dh == 0.0 {
                    return 0.0;
                }
                let inv = (-lr[i]).exp();
                let (y, w) = (yh * inv, -dh * inv);
                // ρℓ = ρ·ℓ(y, w); use the direct form when ρ is representable
                if inv > 0.0 {
                    self.g.remainder(y, w) / inv
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Residual of `(y, f) − λ(Y¹, F¹)` by the expansion
    /// `(1−λ)R + λ(R − L_y(Y¹, F¹)) + ∫ρℓ(y, −λY¹)·q`. Every term scales
    /// with `R` or `Y¹`, so no cancellation of `O(‖y‖)` terms occurs.
    pub fn residual_along(&self, pair: &ControlPair, dir: &Direction, lambda: f64) -> Vec<f64> {
        let l = self.remainder_hat(pair, dir, lambda);
        let lf = self.ws.functional(None, None, &[(&l, Scale::Rho, false)]);
        (0..lf.len()).map(|i| (1.0 - lambda) * pair.r_hat[i] + lambda * dir.lin_residual[i] + lf[i]).collect()
    }

    /// `E((y, f) − λ(Y¹, F¹))` via the expansion; `+∞` if not finite.
    pub fn energy_along(&self, pair: &ControlPair, dir: &Direction, lambda: f64) -> f64 {
        let r = self.residual_along(pair, dir, lambda);
        if r.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        self.energy_of(&r).unwrap_or(f64::INFINITY)
    }

    /// `argmin_{λ∈[0,m]} E((y,f) − λ(Y¹,F¹))`: golden section with parabolic
    /// steps, seeded at `λ = 1`. Returns the best evaluated point, so the
    /// result never exceeds `E(λ=0)` nor `E(λ=1)`.
    pub fn line_search(&self, pair: &ControlPair, dir: &Direction, m: f64) -> LineSearch {
        let e0 = pair.e_value;
        let mut evals = 0usize;
        let mut f = |x: f64| {
            evals += 1;
            self.energy_along(pair, dir, x)
        };
        let e1 = f(1.0);
        let (mut best_x, mut best_f) = if e1 <= e0 { (1.0, e1) } else { (0.0, e0) };
        if self.g.is_linear() {
            return LineSearch { lambda: best_x, e_value: best_f, e_at_one: e1, evaluations: evals };
        }
        let (x, fx) = brent_min(&mut f, 0.0, m, 1.0, e1, 1e-4, 39);
        if fx < best_f {
            best_x = x;
            best_f = fx;
        }
        LineSearch { lambda: best_x, e_value: best_f, e_at_one: e1, evaluations: evals }
    }

    /// Central difference of `E` along `+(Y¹, F¹)` using direct residuals.
    pub fn directional_derivative(&self, pair: &ControlPair, dir: &Direction, eta: f64) -> Result<f64, LsError> {
        let plus = self.pair(pair.y_hat.axpy(-eta, &dir.y1_hat), pair.f_hat.axpy(-eta, &dir.f1_hat), pair.homogeneous)?;
        let minus = self.pair(pair.y_hat.axpy(eta, &dir.y1_hat), pair.f_hat.axpy(eta, &dir.f1_hat), pair.homogeneous)?;
        Ok((plus.e_value - minus.e_value) / (2.0 * eta))
    }

    /// Null-controlled pair of the problem with `g ≡ 0`.
    pub fn initialize_linear(&self) -> Result<ControlPair, LsError> {
        let pb = LinearControlProblem::initial(self.u0.clone());
        let sys = linear_control::assemble_p_system(&self.ws, &pb)?;
        let op = AdjointOperator::new(sys.matrix)?;
        let (z, v, _, _, _) = self.corrected_solve(&op, &sys.rhs, None)?;
        self.pair(z, v, false)
    }

    /// `(χ(t)·e^{t∂ₓₓ}u₀, 0)` with the free evolution computed from a
    /// 64-mode sine expansion of `u₀`.
    pub fn initialize_cutoff(&self, u0: impl Fn(f64) -> f64) -> Result<ControlPair, LsError> {
        let g = &self.ws.grid;
        let modes = sine_coefficients(&u0, 64);
        let tf = g.t_final;
        let y = g.sample(|x, t| cutoff(t, tf) * free_heat(&modes, x, t));
        let lr = &self.ws.table.log_rho;
        let y_hat: Vec<f64> = y.iter().zip(lr.iter()).map(|(v, l)| if *v == 0.0 { 0.0 } else { v * l.exp() }).collect();
        self.pair(PointField::from(y_hat), PointField::zeros(g), false)
    }

    /// `‖Πy(·,T)‖₂` and the projection error for a pair. Small by
    /// construction, since `y = ρ⁻¹ŷ` and `ρ` blows up at `T`.
    pub fn projected_terminal(&self, pair: &ControlPair) -> Result<(f64, f64), LsError> {
        Ok(linear_control::terminal_norm(&self.ws, &self.physical(&pair.y_hat))?)
    }

    /// Integrates the equation from `u₀` with the pair's control and an
    /// independent time stepper; `terminal_l2` is what the control achieves.
    pub fn simulate(&self, pair: &ControlPair) -> Result<Forward, ForwardError> {
        let f = self.ws.unscale(&pair.f_hat, Scale::Rho0);
        forward::simulate(&self.ws.grid, &self.g, &self.u0, &f)
    }

    /// `½‖ρ₀ g(y)‖²` in plain `L²`, an upper bound of `E` for the linear initial pair.
    pub fn plain_nonlinear_energy(&self, y_hat: &[f64]) -> f64 {
        let gh = self.g_hat(y_hat);
        let g0 = self.ws.rho_to_rho0(&gh);
        0.5 * self.ws.inner(&g0, &g0, false)
    }
}

/// Multiple of machine epsilon applied to the root-sum-square of the terms
/// of an assembled residual to estimate its round-off.
pub const FLOOR_ULPS: f64 = 4.0;

/// A stalled iterate with `E ≤ FLOOR_MARGIN·floor` counts as converged to round-off.
pub const FLOOR_MARGIN: f64 = 1e4;

/// Smooth cut-off: 1 at `t = 0`, 0 on `[T/2, T]`.
pub fn cutoff(t: f64, tf: f64) -> f64 {
    let u = 1.0 - 2.0 * t / tf;
    if u >= 1.0 {
        1.0
    } else if u <= 0.0 {
        0.0
    } else {
        let a = (-1.0 / u).exp();
        let b = (-1.0 / (1.0 - u)).exp();
        a / (a + b)
    }
}

fn sine_coefficients(u0: &impl Fn(f64) -> f64, k_max: usize) -> Vec<f64> {
    let n = 4096;
    (1..=k_max)
        .map(|k| {
            // midpoint rule, exact enough for smooth data
            let h = 1.0 / n as f64;
            2.0 * (0..n)
                .map(|i| {
                    let x = (i as f64 + 0.5) * h;
                    u0(x) * (k as f64 * std::f64::consts::PI * x).sin()
                })
                .sum::<f64>()
                * h
        })
        .collect()
}

fn free_heat(modes: &[f64], x: f64, t: f64) -> f64 {
    let pi = std::f64::consts::PI;
    modes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let k = (i + 1) as f64;
            c * (-k * k * pi * pi * t).exp() * (k * pi * x).sin()
        })
        .sum()
}

/// Brent's minimizer on `[a, b]` started from `x0` with known `f(x0)`.
fn brent_min(f: &mut impl FnMut(f64) -> f64, a0: f64, b0: f64, x0: f64, fx0: f64, tol: f64, max_eval: usize) -> (f64, f64) {
    let golden = 0.381_966_011_250_105;
    let (mut a, mut b) = (a0, b0);
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let (mut fx, mut fw, mut fv) = (fx0, fx0, fx0);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_eval {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-10;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden_step = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) && q != 0.0 {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden_step = false;
            }
        }
        if golden_step {
            e = if x >= m { a - x } else { b - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Per-iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "sqrtE")]
    pub sqrt_e: f64,
    /// Step taken from this iterate (`NaN` on the last record).
    pub lambda: f64,
    pub y_sup: f64,
    pub s: f64,
    /// Order estimate `q_k` (`NaN` where undefined).
    pub order: f64,
    /// Per-step `c₁` estimate (`NaN` where undefined).
    pub c1: f64,
    pub seconds: f64,
    /// Phase index (number of restarts before this record).
    pub phase: usize,
    /// `(‖R_rec − R_dir‖ − floor)₊ / ‖R_{k−1}‖` in the `G⁻¹` norm, for the
    /// step into this iterate.
    pub drift: f64,
    /// `‖(Y¹,F¹)‖_{𝒜₀} / √E`
    pub norm_ratio: f64,
    /// Round-off level of a direct evaluation of `E` at this iterate.
    pub e_floor: f64,
    /// `E` from a direct evaluation of the residual.
    pub e_direct: f64,
    /// `E` of the linear-solve defect of the step taken from this iterate.
    pub e_lin: f64,
    /// `order` resolves the nonlinearity: both steps it uses contract well
    /// above the linear-solve defect.
    pub order_valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    /// Stalled at the round-off floor of `E`.
    Floor,
    MaxIter,
}

/// Why a phase was abandoned.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Restart {
    pub s: f64,
    pub at_iteration: usize,
    pub reason: String,
}

/// Result of [`solve`].
#[derive(Debug, Clone)]
pub struct LsOutcome {
    pub pair: ControlPair,
    pub phase: Phase,
    pub trace: Vec<IterationRecord>,
    pub status: Status,
    pub restarts: Vec<Restart>,
    pub tol_e: f64,
    pub e_floor: f64,
    pub e0: f64,
    /// `max relative mismatch of y₀ − Σλ_jY_j vs the stored iterate`.
    pub series_mismatch: f64,
    /// Steps where the tracked residual was replaced by the direct one.
    pub replacements: usize,
    /// `E` of the final iterate from a direct evaluation.
    pub e_direct: f64,
    /// `‖y(·,T)‖₂` of the forward simulation with the final control (`NaN`
    /// if it failed, see `forward_note`).
    pub terminal_norm: f64,
    pub forward_note: Option<String>,
    pub projected_terminal: f64,
    pub projection_error: f64,
    pub u0_norm: f64,
}

impl LsOutcome {
    /// Records of the last phase only.
    pub fn final_phase(&self) -> Vec<&IterationRecord> {
        let last = self.restarts.len();
        self.trace.iter().filter(|r| r.phase == last).collect()
    }
}

/// Largest relative residual of a refined direct solve accepted without the
/// iterative fallback.
pub const TIGHT_ACCEPT: f64 = 1e-8;

/// Drift above which the tracked residual is replaced by the direct one.
pub const REPLACE_DRIFT: f64 = 1e-6;

/// Result of comparing the tracked residual with a direct evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCheck {
    /// `(‖R_rec − R_dir‖ − floor)₊ / ‖R_k‖` in the `G⁻¹` norm.
    pub drift: f64,
    /// `E` of the direct residual.
    pub e_direct: f64,
    pub replaced: bool,
}

/// Moves to `(y, f) − λ(Y¹, F¹)`. The residual is carried by the expansion
/// and checked against a direct evaluation.
pub fn advance(phase: &Phase, pair: &ControlPair, dir: &Direction, lambda: f64) -> Result<(ControlPair, StepCheck), LsError> {
    let rec = phase.residual_along(pair, dir, lambda);
    let y_hat = pair.y_hat.axpy(lambda, &dir.y1_hat);
    let f_hat = pair.f_hat.axpy(lambda, &dir.f1_hat);
    let (direct, rss) = phase.residual(&y_hat, &f_hat, pair.homogeneous)?;
    let e_floor = phase.energy_floor(&rss)?;
    let e_direct = phase.energy_of(&direct)?;
    let diff: Vec<f64> = rec.iter().zip(&direct).map(|(a, b)| a - b).collect();
    let dn = (2.0 * phase.energy_of(&diff)?).sqrt();
    // excess over round-off, relative to the residual the expansion starts from
    let excess = (dn - (2.0 * e_floor).sqrt()).max(0.0);
    let drift = if pair.e_value > 0.0 { excess / (2.0 * pair.e_value).sqrt() } else { 0.0 };
    let replaced = drift > REPLACE_DRIFT;
    let (r_hat, e_value) = if replaced { (direct, e_direct) } else { (rec.clone(), phase.energy_of(&rec)?) };
    let next = ControlPair { y_hat, f_hat, r_hat, e_value, e_floor, homogeneous: pair.homogeneous };
    Ok((next, StepCheck { drift, e_direct, replaced }))
}

/// Damped Newton iteration with the adaptive-`s` policy.
pub fn solve(
    grid: &SpaceTimeGrid,
    params: WeightParams,
    g: &NonlinearitySpec,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    cfg: &LSConfig,
) -> Result<LsOutcome, LsError> {
    if cfg.m < 1.0 {
        return Err(LsError::BadM(cfg.m));
    }
    let clock = Clock::start();
    let u0s = linear_control::sample_initial(grid, u0);
    let u0_norm = grid.spatial_points().iter().zip(&u0s).map(|((_, w), v)| w * v * v).sum::<f64>().sqrt();
    let cap = cfg.m_cap * u0s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut s = cfg.s_init.max(params.s0);
    let mut restarts: Vec<Restart> = Vec::new();
    let mut replacements = 0usize;
    let mut trace: Vec<IterationRecord> = Vec::new();
    loop {
        let weights = WeightSet::new(params.with_s(s), grid)?;
        let phase = Phase::new(grid, &weights, g, u0s.clone())?;
        let mut pair = match cfg.initializer {
            Initializer::Linear => phase.initialize_linear()?,
            Initializer::Cutoff => phase.initialize_cutoff(u0)?,
        };
        let y0_hat = pair.y_hat.clone();
        let mut series = PointField::zeros(grid);
        let e0 = pair.e_value;
        let tol_e = cfg.tol_e.unwrap_or(1e-8 * (1.0 + e0.sqrt()));
        let phase_idx = restarts.len();
        let mut stalls = 0;
        let mut abandon: Option<String> = None;
        let mut status = Status::MaxIter;
        let mut last_drift = 0.0;
        let mut last_direct = pair.e_value;
        let mut e_floor = pair.e_floor;
        let mut required = 0.0f64;
        for k in 0..=cfg.max_iter {
            let y_sup = phase.physical(&pair.y_hat).sup_norm();
            e_floor = e_floor.max(pair.e_floor);
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
                phase: phase_idx,
                drift: last_drift,
                norm_ratio: f64::NAN,
                e_floor: pair.e_floor,
                e_direct: last_direct,
                e_lin: f64::NAN,
                order_valid: false,
            };
            if pair.e_value.sqrt() <= tol_e {
                trace.push(rec);
                status = Status::Converged;
                break;
            }
            // a directly evaluated E₀ this close to round-off leaves no step to resolve
            if k == 0 && pair.e_value <= FLOOR_MARGIN * pair.e_floor {
                trace.push(rec);
                status = Status::Floor;
                break;
            }
            if y_sup > cap || !y_sup.is_finite() {
                trace.push(rec);
                abandon = Some(format!("|y|_inf = {y_sup:.3e} exceeds M_cap"));
                break;
            }
            if k == cfg.max_iter {
                trace.push(rec);
                break;
            }
            let dir = match phase.minimal_pair(&pair) {
                Ok(d) => d,
                Err(LsError::NeedLargerS { gprime_sup, .. }) => {
                    trace.push(rec);
                    required = gprime_sup.powf(2.0 / 3.0);
                    abandon = Some(format!("s below |g'(y)|^(2/3) = {required:.3}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            rec.norm_ratio = dir.norm_a0 / pair.e_value.sqrt();
            rec.e_lin = dir.e_lin;
            let lambda = if cfg.undamped { 1.0 } else { phase.line_search(&pair, &dir, cfg.m).lambda };
            rec.lambda = lambda;
            let candidate = if lambda > 0.0 { Some(advance(&phase, &pair, &dir, lambda)?) } else { None };
            match candidate {
                Some((next, check)) if cfg.undamped || next.e_value < pair.e_value => {
                    trace.push(rec);
                    stalls = 0;
                    series.iter_mut().zip(dir.y1_hat.iter()).for_each(|(s, d)| *s += lambda * d);
                    last_drift = check.drift;
                    last_direct = check.e_direct;
                    replacements += usize::from(check.replaced);
                    pair = next;
                }
                _ => {
                    // no decrease: the step is rejected and the iterate kept
                    rec.lambda = 0.0;
                    trace.push(rec);
                    if pair.e_value <= FLOOR_MARGIN * pair.e_floor {
                        status = Status::Floor;
                        break;
                    }
                    stalls += 1;
                    if stalls >= 2 {
                        abandon = Some("no decrease for 2 consecutive iterations".into());
                        break;
                    }
                }
            }
        }
        annotate(&mut trace, phase_idx, g.p);
        if let Some(reason) = abandon {
            restarts.push(Restart { s, at_iteration: trace.last().map_or(0, |r| r.k), reason: reason.clone() });
            if restarts.len() > cfg.max_restarts {
                return Err(LsError::NoConvergence { restarts: restarts.len() - 1, reason, trace });
            }
            // a known requirement is met at once rather than in ×growth steps
            s = (s * cfg.s_growth).max(required * 1.01);
            continue;
        }
        let rebuilt = y0_hat.axpy(1.0, &series);
        let scale = pair.y_hat.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let series_mismatch = rebuilt.iter().zip(pair.y_hat.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        let (projected_terminal, projection_error) = phase.projected_terminal(&pair)?;
        let (terminal_norm, forward_note) = match phase.simulate(&pair) {
            Ok(f) => (f.terminal_l2, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        return Ok(LsOutcome {
            pair,
            phase,
            trace,
            status,
            restarts,
            tol_e,
            e_floor,
            e0,
            series_mismatch,
            replacements,
            e_direct: last_direct,
            terminal_norm,
            forward_note,
            projected_terminal,
            projection_error,
            u0_norm,
        });
    }
}

/// A step's outcome `E_{k+1}` reflects the nonlinearity only when it stays
/// this far above the linear-solve defect `E_lin`.
pub const DEFECT_MARGIN: f64 = 100.0;

/// Fills `order`, `order_valid` and `c1` of the records of one phase.
fn annotate(trace: &mut [IterationRecord], phase: usize, p: f64) {
    let idx: Vec<usize> = (0..trace.len()).filter(|i| trace[*i].phase == phase).collect();
    let e: Vec<f64> = idx.iter().map(|i| trace[*i].e).collect();
    let orders = crate::diagnostics::order_sequence(&e);
    // step j → j+1 was taken and landed above its defect
    let ok: Vec<bool> = (0..idx.len())
        .map(|j| {
            let r = &trace[idx[j]];
            j + 1 < e.len() && r.lambda > 0.0 && e[j + 1] >= DEFECT_MARGIN * r.e_lin
        })
        .collect();
    let resolved = |j: usize| ok[j];
    for j in 0..idx.len() {
        let i = idx[j];
        trace[i].order = orders[j];
        trace[i].order_valid = orders[j].is_finite() && j >= 1 && resolved(j - 1) && resolved(j);
        if j + 1 < idx.len() && resolved(j) {
            let lam = trace[i].lambda;
            trace[i].c1 = crate::diagnostics::c1_step(e[j].sqrt(), e[j + 1].sqrt(), lam, p);
        }
    }
}

/// `k₀ = ⌊(1+p)/p·((1+p)^{1/p}c₂√E₀ − 1)⌋ + 1`, or 1 when the bracket is
/// not positive. Not defined for `p = 0`.
pub fn predicted_k0(e0: f64, c2: f64, p: f64) -> Option<usize> {
    if !(p > 0.0 && p <= 1.0) || !(c2 > 0.0) {
        return None;
    }
    let arg = (1.0 + p).powf(1.0 / p) * c2 * e0.sqrt() - 1.0;
    if arg <= 0.0 {
        return Some(1);
    }
    Some(((1.0 + p) / p * arg).floor() as usize + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Interval};
    use crate::nonlinearity::builtin;
    use std::f64::consts::PI;

    fn phase(nx: usize, s: f64, g: &str, amp: f64) -> Phase {
        let grid = make_grid(nx, nx, 0.5, Interval::new(0.2, 0.8)).unwrap();
        let w = WeightSet::new(WeightParams::new(s, 0.5), &grid).unwrap();
        let u0 = linear_control::sample_initial(&grid, |x| amp * (PI * x).sin());
        Phase::new(&grid, &w, &builtin(g).unwrap(), u0).unwrap()
    }

    #[test]
    fn k0_formula() {
        // c₂√E₀ = 1 with E₀ = 1
        assert_eq!(predicted_k0(1.0, 1.0, 1.0), Some(3));
        assert_eq!(predicted_k0(1.0, 2.5, 1.0), Some(9));
        assert_eq!(predicted_k0(1.0, 0.4, 1.0), Some(1));
        assert_eq!(predicted_k0(1.0, 1.0, 0.0), None);
    }

    #[test]
    fn zero_data_zero_energy() {
        let ph = phase(8, 2.0, "lipschitz_sin(2)", 0.0);
        let p = ph.initialize_linear().unwrap();
        assert_eq!(p.e_value, 0.0);
        let d = ph.minimal_pair(&p).unwrap();
        assert!(d.y1_hat.iter().all(|v| *v == 0.0) && d.f1_hat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_pair_has_negligible_energy_for_g_zero() {
        let ph = phase(16, 1.0, "zero", 1.0);
        let p = ph.initialize_linear().unwrap();
        let (_, abs) = ph.residual(&p.y_hat, &p.f_hat, false).unwrap();
        let floor = ph.energy_floor(&abs).unwrap();
        assert!(p.e_value <= 1e4 * floor, "E = {} floor {}", p.e_value, floor);
    }

    #[test]
    fn initial_energy_is_the_nonlinear_source() {
        let ph = phase(16, 2.0, "lipschitz_sin(5)", 1.0);
        let p = ph.initialize_linear().unwrap();
        let gh = ph.g_hat(&p.y_hat);
        let f = ph.ws.functional(None, None, &[(&gh, Scale::Rho, false)]);
        let e = ph.energy_of(&f).unwrap();
        assert!((e - p.e_value).abs() <= 1e-10 * e);
        assert!(p.e_value <= ph.plain_nonlinear_energy(&p.y_hat) * (1.0 + 1e-12));
    }

    #[test]
    fn derivative_identity_and_linear_exactness() {
        let ph = phase(16, 2.0, "loglim(0,0.5)", 1.0);
        let p = ph.initialize_linear().unwrap();
        let d = ph.minimal_pair(&p).unwrap();
        let dd = ph.directional_derivative(&p, &d, 1e-4).unwrap();
        assert!((dd - 2.0 * p.e_value).abs() <= 1e-3 * 2.0 * p.e_value, "{dd} vs {}", 2.0 * p.e_value);

        let lin = phase(16, 2.0, "linear(2)", 1.0);
        let p = lin.initialize_linear().unwrap();
        let d = lin.minimal_pair(&p).unwrap();
        let ls = lin.line_search(&p, &d, 2.0);
        assert_eq!(ls.lambda, 1.0);
        let (next, _) = advance(&lin, &p, &d, 1.0).unwrap();
        assert!(next.e_value <= 1e-20 * p.e_value, "{} vs {}", next.e_value, p.e_value);
    }

    #[test]
    fn expansion_matches_direct_residual() {
        let ph = phase(16, 2.0, "loglim(0,0.5)", 2.0);
        let p = ph.initialize_linear().unwrap();
        let d = ph.minimal_pair(&p).unwrap();
        for &lam in &[0.3, 1.0, 1.7] {
            let (_, check) = advance(&ph, &p, &d, lam).unwrap();
            assert!(check.drift < 1e-10 && !check.replaced, "lambda {lam}: drift {}", check.drift);
        }
    }

    #[test]
    fn cutoff_initializer() {
        let ph = phase(16, 1.0, "zero", 1.0);
        let p = ph.initialize_cutoff(|x| (PI * x).sin()).unwrap();
        for (i, v) in p.y_hat.iter().enumerate() {
            let (_, t) = ph.ws.grid.point(i);
            if t >= 0.25 {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(p.f_hat.iter().all(|v| *v == 0.0));
        // the free evolution solves the heat equation: only the cut-off contributes
        assert!(p.e_value > 0.0 && p.e_value.is_finite());
        assert_eq!(cutoff(0.0, 1.0), 1.0);
        assert_eq!(cutoff(0.5, 1.0), 0.0);
    }

    #[test]
    fn brent_finds_parabola_minimum() {
        let mut f = |x: f64| (x - 0.7) * (x - 0.7) + 1.0;
        let (x, fx) = brent_min(&mut f, 0.0, 2.0, 1.0, 1.09, 1e-6, 60);
        assert!((x - 0.7).abs() < 1e-5 && (fx - 1.0).abs() < 1e-9);
    }
}
