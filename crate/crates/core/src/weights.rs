//! Carleman weights `θ, φ, ξ, ρ = e^{sφ}, ρ₀ = ξ^{-3/2}ρ, ρ₁ = ξ^{-1}ρ`.
//!
//! Everything is carried as logarithms. Amplitude of `φ` is governed by a
//! [`WeightProfile`]: `φ = θ(λe^{Kλ} − e^{λψ̂})` with `ψ̂ = ψ̃ + σ`. The
//! classical choice is `σ = 6, K = 12`; the default solver profile uses
//! `σ = 0, K = 2`, which keeps `sφ` resolvable on desk-size meshes.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, PointField, SpaceTimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("s must be >= 1, got {0}")]
    BadS(f64),
    #[error("lambda0 must be >= 1, got {0}")]
    BadLambda(f64),
    #[error("T1 = {t1} must satisfy 0 < T1 < min(1/4, 3T/8) = {max}")]
    BadT1 { t1: f64, max: f64 },
    #[error("xstar = {xstar} must lie inside the control region ({a}, {b})")]
    BadXstar { xstar: f64, a: f64, b: f64 },
    #[error("weight profile (shift {shift}, peak {peak}) violates lambda e^(K lambda) >= 2.5 e^(lambda (shift + 1))")]
    BadProfile { shift: f64, peak: f64 },
    #[error("theta is only defined on [0, T), got t = {0}")]
    OutsideHorizon(f64),
}

/// Amplitude of the weight: `φ = θ(λe^{Kλ} − e^{λ(ψ̃+σ)})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub psi_shift: f64,
    pub peak_exponent: f64,
}

impl WeightProfile {
    /// `ψ̂ = ψ̃ + 6`, `λe^{12λ}`.
    pub const STEEP: Self = Self { psi_shift: 6.0, peak_exponent: 12.0 };
    /// `ψ̂ = ψ̃`, `λe^{2λ}`.
    pub const DESK: Self = Self { psi_shift: 0.0, peak_exponent: 2.0 };

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "steep" => Some(Self::STEEP),
            "desk" => Some(Self::DESK),
            _ => None,
        }
    }

    fn validate(&self, lambda: f64) -> Result<(), WeightError> {
        // log form of λe^{Kλ} ≥ 2.5 e^{λ(σ+1)}
        let lhs = lambda.ln() + self.peak_exponent * lambda;
        let rhs = 2.5f64.ln() + lambda * (self.psi_shift + 1.0);
        if lhs >= rhs && self.psi_shift >= 0.0 {
            Ok(())
        } else {
            Err(WeightError::BadProfile { shift: self.psi_shift, peak: self.peak_exponent })
        }
    }
}

impl Default for WeightProfile {
    fn default() -> Self {
        Self::DESK
    }
}

/// C¹ profile on `[0,1]` vanishing at both ends, maximal (`0.99`) at `x*`,
/// strictly monotone on each side of `x*`: two quadratic arcs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiTilde {
    pub xstar: f64,
}

const PSI_PEAK: f64 = 0.99;

/// Builds `ψ̃` with its sole critical point at `xstar ∈ ω`.
pub fn make_psi_tilde(omega: crate::grid::Interval, xstar: f64) -> Result<PsiTilde, WeightError> {
    if !omega.contains(xstar) {
        return Err(WeightError::BadXstar { xstar, a: omega.a, b: omega.b });
    }
    Ok(PsiTilde { xstar })
}

impl PsiTilde {
    pub fn value(&self, x: f64) -> f64 {
        let d = if x <= self.xstar { (self.xstar - x) / self.xstar } else { (x - self.xstar) / (1.0 - self.xstar) };
        PSI_PEAK * (1.0 - d * d)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        if x <= self.xstar {
            2.0 * PSI_PEAK * (self.xstar - x) / (self.xstar * self.xstar)
        } else {
            -2.0 * PSI_PEAK * (x - self.xstar) / ((1.0 - self.xstar) * (1.0 - self.xstar))
        }
    }
}

/// User-facing parameters of the weight family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub s: f64,
    pub lambda0: f64,
    /// `None` selects `0.5·min(1/4, 3T/8)`.
    pub t1: Option<f64>,
    pub s0: f64,
    pub xstar: f64,
    #[serde(default)]
    pub profile: WeightProfile,
}

impl WeightParams {
    pub fn new(s: f64, xstar: f64) -> Self {
        Self { s, lambda0: 1.0, t1: None, s0: 1.0, xstar, profile: WeightProfile::DESK }
    }

    pub fn with_s(&self, s: f64) -> Self {
        Self { s, ..*self }
    }
}

/// Time profile `θ` with its cached constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theta {
    pub t_final: f64,
    pub t1: f64,
    pub mu: f64,
    /// Quintic bridge `1 + a3 u³ + a4 u⁴ + a5 u⁵` on `[T−2T₁, T−T₁]`.
    bridge: [f64; 3],
}

impl Theta {
    pub fn new(t_final: f64, t1: f64, mu: f64) -> Self {
        // End data in the bridge variable u = (t − (T−2T₁))/T₁:
        // value 1/T₁, slope T₁·(1/T₁²), curvature T₁²·(2/T₁³).
        let d = 1.0 / t1 - 1.0;
        let d1 = 1.0 / t1;
        let e1 = 2.0 / t1;
        let bridge = [
            10.0 * d - 4.0 * d1 + 0.5 * e1,
            -15.0 * d + 7.0 * d1 - e1,
            6.0 * d - 3.0 * d1 + 0.5 * e1,
        ];
        Self { t_final, t1, mu, bridge }
    }

    fn bridge_value(&self, u: f64) -> f64 {
        let [a3, a4, a5] = self.bridge;
        1.0 + u * u * u * (a3 + u * (a4 + u * a5))
    }

    fn bridge_slope(&self, u: f64) -> f64 {
        let [a3, a4, a5] = self.bridge;
        u * u * (3.0 * a3 + u * (4.0 * a4 + 5.0 * a5 * u))
    }

    /// Whether the bridge is nondecreasing, checked on a dense sample.
    pub fn bridge_is_monotone(&self) -> bool {
        (0..=2000).all(|k| self.bridge_slope(k as f64 / 2000.0) >= -1e-12)
    }

    pub fn value(&self, t: f64) -> Result<f64, WeightError> {
        let tf = self.t_final;
        if !(0.0..tf).contains(&t) {
            return Err(WeightError::OutsideHorizon(t));
        }
        Ok(self.value_unchecked(t))
    }

    fn value_unchecked(&self, t: f64) -> f64 {
        let tf = self.t_final;
        if t <= 0.25 * tf {
            // (1 − 4t/T)^μ through exp/log so large μ underflows cleanly to 0
            let base = 1.0 - 4.0 * t / tf;
            if base <= 0.0 {
                1.0
            } else {
                1.0 + (self.mu * base.ln()).exp()
            }
        } else if t <= tf - 2.0 * self.t1 {
            1.0
        } else if t < tf - self.t1 {
            self.bridge_value((t - (tf - 2.0 * self.t1)) / self.t1)
        } else {
            1.0 / (tf - t)
        }
    }

    /// `θ′(t)`, used only in diagnostics.
    pub fn derivative(&self, t: f64) -> f64 {
        let tf = self.t_final;
        if t <= 0.25 * tf {
            let base = 1.0 - 4.0 * t / tf;
            if base <= 0.0 {
                0.0
            } else {
                -4.0 / tf * self.mu * ((self.mu - 1.0) * base.ln()).exp()
            }
        } else if t <= tf - 2.0 * self.t1 {
            0.0
        } else if t < tf - self.t1 {
            self.bridge_slope((t - (tf - 2.0 * self.t1)) / self.t1) / self.t1
        } else {
            1.0 / ((tf - t) * (tf - t))
        }
    }
}

/// Free-function form of `θ`.
pub fn theta(t: f64, set: &WeightSet) -> Result<f64, WeightError> {
    set.theta.value(t)
}

/// Values of the weight family at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightPoint {
    pub theta: f64,
    pub phi: f64,
    pub xi: f64,
    pub log_rho: f64,
    pub log_rho0: f64,
    pub log_rho1: f64,
}

/// Evaluators of the weight family for one `(s, λ₀, T₁, ψ̂)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSet {
    pub params: WeightParams,
    pub psi: PsiTilde,
    pub theta: Theta,
    /// Latest time at which weights are evaluated, `T(1 − 1/(2nt))`.
    pub t_clip: f64,
    /// `c = ‖φ(·,0)‖_∞`
    pub c: f64,
    /// `λe^{Kλ}`
    peak: f64,
}

impl WeightSet {
    pub fn new(params: WeightParams, grid: &SpaceTimeGrid) -> Result<Self, WeightError> {
        let lam = params.lambda0;
        if !(params.s >= 1.0) {
            return Err(WeightError::BadS(params.s));
        }
        if !(lam >= 1.0) {
            return Err(WeightError::BadLambda(lam));
        }
        params.profile.validate(lam)?;
        let tf = grid.t_final;
        let t1_max = 0.25f64.min(0.375 * tf);
        let mut t1 = params.t1.unwrap_or(0.5 * t1_max);
        if !(t1 > 0.0 && t1 < t1_max) {
            return Err(WeightError::BadT1 { t1, max: t1_max });
        }
        let psi = make_psi_tilde(grid.omega, params.xstar)?;
        let mu = params.s * lam * lam * (2.0 * lam).exp();
        let mut th = Theta::new(tf, t1, mu);
        while !th.bridge_is_monotone() {
            t1 *= 0.8;
            th = Theta::new(tf, t1, mu);
        }
        let peak = lam * (params.profile.peak_exponent * lam).exp();
        let c = 2.0 * (peak - (lam * params.profile.psi_shift).exp());
        Ok(Self {
            params: WeightParams { t1: Some(t1), ..params },
            psi,
            theta: th,
            t_clip: tf * (1.0 - 0.5 / grid.nt as f64),
            c,
            peak,
        })
    }

    pub fn s(&self) -> f64 {
        self.params.s
    }

    pub fn lambda0(&self) -> f64 {
        self.params.lambda0
    }

    /// `κ = s³λ₀⁴`, the observation coefficient of the adjoint form.
    pub fn kappa(&self) -> f64 {
        self.params.s.powi(3) * self.params.lambda0.powi(4)
    }

    pub fn mu(&self) -> f64 {
        self.theta.mu
    }

    pub fn psi_hat(&self, x: f64) -> f64 {
        self.psi.value(x) + self.params.profile.psi_shift
    }

    /// Weight family at `(x, t)`; `t` is clipped to `t_clip` as all solver
    /// evaluations are.
    pub fn eval(&self, x: f64, t: f64) -> WeightPoint {
        let te = t.min(self.t_clip).max(0.0);
        let th = self.theta.value_unchecked(te);
        self.eval_with_theta(x, th)
    }

    /// Strict variant: rejects `t ∉ [0, T)` and does not clip.
    pub fn phi_xi_rho(&self, x: f64, t: f64) -> Result<WeightPoint, WeightError> {
        let th = self.theta.value(t)?;
        Ok(self.eval_with_theta(x, th))
    }

    fn eval_with_theta(&self, x: f64, th: f64) -> WeightPoint {
        let lam = self.params.lambda0;
        let e = (lam * self.psi_hat(x)).exp();
        let phi = th * (self.peak - e);
        let xi = th * e;
        let log_rho = self.params.s * phi;
        let log_xi = xi.ln();
        WeightPoint {
            theta: th,
            phi,
            xi,
            log_rho,
            log_rho0: log_rho - 1.5 * log_xi,
            log_rho1: log_rho - log_xi,
        }
    }

    /// Logs of the weights at every quadrature point of the grid.
    pub fn table(&self, grid: &SpaceTimeGrid) -> WeightTable {
        let pts = crate::par::map_range(grid.n_points(), |idx| {
            let (x, t) = grid.point(idx);
            self.eval(x, t)
        });
        let initial = grid.spatial_points().iter().map(|(x, _)| self.eval(*x, 0.0)).collect::<Vec<_>>();
        WeightTable {
            log_rho: PointField::from(pts.iter().map(|w| w.log_rho).collect::<Vec<_>>()),
            log_rho0: PointField::from(pts.iter().map(|w| w.log_rho0).collect::<Vec<_>>()),
            log_rho1: PointField::from(pts.iter().map(|w| w.log_rho1).collect::<Vec<_>>()),
            initial_log_rho: initial.iter().map(|w| w.log_rho).collect(),
            s: self.params.s,
        }
    }

    /// Diagnostic dump on the nodal lattice; the final time level is clipped.
    pub fn write_dump<W: Write>(&self, grid: &SpaceTimeGrid, mut w: W) -> io::Result<()> {
        writeln!(w, "x,t,theta,phi,xi,log_rho,log_rho0,log_rho1")?;
        for j in 0..=grid.nt {
            let t = grid.t_node(j);
            for i in 0..=grid.nx {
                let x = grid.x_node(i);
                let p = self.eval(x, t);
                writeln!(
                    w,
                    "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                    x, t, p.theta, p.phi, p.xi, p.log_rho, p.log_rho0, p.log_rho1
                )?;
            }
        }
        Ok(())
    }

    /// Left/right ratio of the weighted Carleman inequality for `p`, with the
    /// potential `a` given at quadrature points. `0` when `p` vanishes.
    pub fn carleman_ratio(&self, grid: &SpaceTimeGrid, table: &WeightTable, p: &Field, a: &[f64]) -> f64 {
        let s = self.params.s;
        let lam = self.params.lambda0;
        let kappa = self.kappa();
        let e = p.evaluate(grid);
        let cw = grid.cell_weights();
        let npc = grid.points_per_cell();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for idx in 0..grid.n_points() {
            let w = cw[idx % npc];
            let lr = table.log_rho[idx];
            let lr0 = table.log_rho0[idx];
            let lr1 = table.log_rho1[idx];
            let l = -e.dt[idx] - e.dxx[idx] + a[idx] * e.value[idx];
            rhs += w * sq_weighted(l, -lr);
            let p0 = sq_weighted(e.value[idx], -lr0);
            if grid.point_in_control(idx) {
                rhs += w * kappa * p0;
            }
            lhs += w * (s * lam * lam * sq_weighted(e.dx[idx], -lr1) + kappa * p0);
        }
        // initial-time terms
        let vals = p.level_values(grid, 0);
        let slopes = level_slopes(p, grid, 0);
        let amp = (2.0 * lam * (self.params.profile.psi_shift + 1.0)).exp();
        for (k, (_, wx)) in grid.spatial_points().iter().enumerate() {
            let lr = table.initial_log_rho[k];
            lhs += wx * (sq_weighted(slopes[k], -lr) + kappa * amp * sq_weighted(vals[k], -lr));
        }
        if rhs == 0.0 {
            0.0
        } else {
            lhs / rhs
        }
    }
}

/// `(e^{log_w} u)²` formed without overflow.
#[inline]
fn sq_weighted(u: f64, log_w: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        (2.0 * (log_w + u.abs().ln())).exp()
    }
}

fn level_slopes(p: &Field, grid: &SpaceTimeGrid, j: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.nx * grid.nq());
    for ix in 0..grid.nx {
        for q in 0..grid.nq() {
            let hd = crate::grid::hermite_dx(grid.rule.nodes[q], grid.h);
            out.push((0..4).map(|a| hd[a] * p.dofs[p.index(ix + a / 2, j, a % 2)]).sum());
        }
    }
    out
}

/// Logs of `ρ, ρ₀, ρ₁` at the quadrature points of a grid, plus `log ρ(·,0)`
/// at the spatial Gauss points.
#[derive(Debug, Clone)]
pub struct WeightTable {
    pub log_rho: PointField,
    pub log_rho0: PointField,
    pub log_rho1: PointField,
    pub initial_log_rho: Vec<f64>,
    pub s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Interval};

    fn setup(s: f64) -> (SpaceTimeGrid, WeightSet) {
        let g = make_grid(16, 16, 0.5, Interval::new(0.2, 0.8)).unwrap();
        let w = WeightSet::new(WeightParams::new(s, 0.5), &g).unwrap();
        (g, w)
    }

    #[test]
    fn psi_tilde_symmetric_case() {
        let p = make_psi_tilde(Interval::new(0.25, 0.75), 0.5).unwrap();
        for k in 0..=100 {
            let x = k as f64 / 100.0;
            assert!((p.value(x) - 3.96 * x * (1.0 - x)).abs() < 1e-14);
        }
        assert!((p.value(0.5) - 0.99).abs() < 1e-15);
        assert!(p.derivative(0.1) > 0.0 && p.derivative(0.9) < 0.0);
        assert_eq!(p.value(0.0), 0.0);
        assert_eq!(p.value(1.0), 0.0);
        assert!(make_psi_tilde(Interval::new(0.25, 0.75), 0.8).is_err());
    }

    #[test]
    fn psi_tilde_slope_away_from_control() {
        let om = Interval::new(0.3, 0.6);
        let p = make_psi_tilde(om, 0.4).unwrap();
        let mut min_slope = f64::INFINITY;
        for k in 0..=10_000 {
            let x = k as f64 / 10_000.0;
            if !om.contains(x) {
                min_slope = min_slope.min(p.derivative(x).abs());
            }
            let v = p.value(x);
            assert!((0.0..=0.99).contains(&v));
        }
        assert!(min_slope > 0.1);
    }

    #[test]
    fn theta_examples() {
        let (g, w) = setup(2.0);
        let t1 = w.theta.t1;
        assert_eq!(w.theta.value(0.0).unwrap(), 2.0);
        assert_eq!(w.theta.value(0.25).unwrap(), 1.0);
        assert!((w.theta.value(0.5 - t1 / 2.0).unwrap() - 2.0 / t1).abs() < 1e-12);
        assert!(w.theta.value(0.5).is_err());
        assert!(w.theta.value(-0.1).is_err());
        assert!(theta(g.t_final * 0.9, &w).is_ok());
    }

    #[test]
    fn theta_is_continuous_and_at_least_one() {
        let (_, w) = setup(3.0);
        let th = &w.theta;
        let tf = th.t_final;
        let mut prev = th.value(0.0).unwrap();
        for k in 1..10_000 {
            let t = tf * k as f64 / 10_000.0;
            let v = th.value(t).unwrap();
            assert!(v >= 1.0 && v.is_finite());
            let jump = (v - prev).abs();
            let local = th.derivative(t).abs().max(th.derivative(t - tf / 1e4).abs());
            assert!(jump <= local * tf / 1e4 * 1.5 + 1e-9, "t = {t}: jump {jump}");
            prev = v;
        }
        // breakpoints of the bridge
        let b0 = tf - 2.0 * th.t1;
        let b1 = tf - th.t1;
        assert!((th.value(b0 + 1e-12).unwrap() - 1.0).abs() < 1e-9);
        assert!((th.value(b1 - 1e-12).unwrap() - 1.0 / th.t1).abs() < 1e-8);
        assert!((th.derivative(b1 - 1e-12) - 1.0 / (th.t1 * th.t1)).abs() < 1e-6);
    }

    #[test]
    fn bridge_monotone_for_a_range_of_t1() {
        for &t1 in &[0.2, 0.1, 0.09375, 0.05, 0.02] {
            assert!(Theta::new(1.0, t1, 5.0).bridge_is_monotone(), "T1 = {t1}");
        }
    }

    #[test]
    fn mu_branch_underflows_gracefully() {
        let th = Theta::new(1.0, 0.1, 1e6);
        let v = th.value(0.01).unwrap();
        assert_eq!(v, 1.0);
        assert!(!th.derivative(0.01).is_nan());
    }

    #[test]
    fn identities_at_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for profile in [WeightProfile::DESK, WeightProfile::STEEP] {
            let g = make_grid(16, 16, 0.5, Interval::new(0.2, 0.8)).unwrap();
            let w = WeightSet::new(WeightParams { profile, ..WeightParams::new(3.0, 0.5) }, &g).unwrap();
            for _ in 0..1000 {
                let x = rng.gen::<f64>();
                let t = rng.gen::<f64>() * w.t_clip;
                let p = w.eval(x, t);
                let lx = p.xi.ln();
                assert!((p.log_rho0 - (p.log_rho - 1.5 * lx)).abs() <= 1e-12 * p.log_rho.abs());
                assert!(p.log_rho0 > 0.0 && p.log_rho0 <= p.log_rho1 && p.log_rho1 <= p.log_rho);
                assert!(p.log_rho0 >= 1.5 * w.s());
                assert!(p.phi >= 1.5 * p.xi);
            }
        }
    }

    #[test]
    fn log_rho_linear_in_s() {
        let (g, w1) = setup(1.0);
        let w2 = WeightSet::new(w1.params.with_s(2.0), &g).unwrap();
        let w3 = WeightSet::new(w1.params.with_s(3.0), &g).unwrap();
        // θ's first branch depends on s through μ; test in the middle branch
        for &(x, t) in &[(0.1, 0.2), (0.5, 0.15), (0.9, 0.2)] {
            let (a, b, c) = (w1.eval(x, t).log_rho, w2.eval(x, t).log_rho, w3.eval(x, t).log_rho);
            assert!((b - 2.0 * a).abs() < 1e-12 && (c - 3.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn no_overflow_at_large_s() {
        let g = make_grid(32, 32, 0.5, Interval::new(0.2, 0.8)).unwrap();
        let w = WeightSet::new(WeightParams::new(200.0, 0.5), &g).unwrap();
        let t = w.table(&g);
        assert!(t.log_rho.iter().all(|v| v.is_finite()));
        let p = w.eval(0.5, g.t_final * (1.0 - 1.0 / 32.0));
        assert!(p.log_rho.is_finite());
    }

    #[test]
    fn constant_c_matches_definition() {
        let (_, w) = setup(2.0);
        let sup = (0..=1000).map(|k| w.eval(k as f64 / 1000.0, 0.0).phi).fold(0.0f64, f64::max);
        assert!((sup - w.c).abs() < 1e-12 * w.c);
    }

    #[test]
    fn rejects_invalid_params() {
        let g = make_grid(8, 8, 0.5, Interval::new(0.25, 0.75)).unwrap();
        let ok = WeightParams::new(2.0, 0.5);
        assert!(matches!(WeightSet::new(ok.with_s(0.5), &g), Err(WeightError::BadS(_))));
        assert!(WeightSet::new(WeightParams { lambda0: 0.5, ..ok }, &g).is_err());
        assert!(WeightSet::new(WeightParams { t1: Some(0.2), ..ok }, &g).is_err());
        assert!(WeightSet::new(WeightParams { xstar: 0.1, ..ok }, &g).is_err());
        let bad = WeightProfile { psi_shift: 0.0, peak_exponent: 1.0 };
        assert!(WeightSet::new(WeightParams { profile: bad, ..ok }, &g).is_err());
    }

    #[test]
    fn carleman_ratio_zero_and_scale_invariant() {
        let (g, w) = setup(2.0);
        let tab = w.table(&g);
        let a = vec![0.0; g.n_points()];
        assert_eq!(w.carleman_ratio(&g, &tab, &Field::zeros(&g), &a), 0.0);
        let p = Field::interpolate(
            &g,
            |x, t| (std::f64::consts::PI * x).sin() * (1.0 + t),
            |x, t| std::f64::consts::PI * (std::f64::consts::PI * x).cos() * (1.0 + t),
        );
        let mut p10 = p.clone();
        p10.dofs.iter_mut().for_each(|v| *v *= 10.0);
        let r1 = w.carleman_ratio(&g, &tab, &p, &a);
        let r2 = w.carleman_ratio(&g, &tab, &p10, &a);
        assert!(r1.is_finite() && r1 > 0.0);
        assert!((r1 - r2).abs() < 1e-10 * r1);
    }

    #[test]
    fn dump_header() {
        let (g, w) = setup(1.0);
        let mut buf = Vec::new();
        w.write_dump(&g, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,t,theta,phi,xi,log_rho,log_rho0,log_rho1\n"));
        assert_eq!(s.lines().count(), 1 + 17 * 17);
    }
}
