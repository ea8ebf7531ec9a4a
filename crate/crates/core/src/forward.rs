//! Independent forward solver used to check a control by what it does:
//! integrates `∂ₜy − ∂ₓₓy + g(y) = f` from `u₀` on the Hermite space in `x`
//! with the L-stable 3-stage Radau IIA scheme, one step per time slab.
//!
//! The control is only known at the time Gauss nodes of each slab; stage
//! values come from the Lagrange interpolant through them.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::{hermite, hermite_dx, SpaceTimeGrid};
use crate::nonlinearity::NonlinearitySpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error("singular stage matrix at t = {0}")]
    Singular(f64),
    #[error("stage Newton iteration failed at t = {0}")]
    NoConvergence(f64),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("expected {expected} control values, got {got}")]
    Size { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `‖y(·,T)‖₂`
    pub terminal_l2: f64,
    /// `max_n ‖y(·,t_n)‖_∞` over the nodal values.
    pub sup: f64,
    pub newton_iterations: usize,
    pub factorizations: usize,
}

/// Radau IIA, 3 stages: nodes and Butcher matrix (the last row is `b`).
fn radau() -> ([f64; 3], [[f64; 3]; 3]) {
    let r = 6f64.sqrt();
    (
        [(4.0 - r) / 10.0, (4.0 + r) / 10.0, 1.0],
        [
            [(88.0 - 7.0 * r) / 360.0, (296.0 - 169.0 * r) / 1800.0, (-2.0 + 3.0 * r) / 225.0],
            [(296.0 + 169.0 * r) / 1800.0, (88.0 + 7.0 * r) / 360.0, (-2.0 - 3.0 * r) / 225.0],
            [(16.0 - r) / 36.0, (16.0 + r) / 36.0, 1.0 / 9.0],
        ],
    )
}

fn lagrange(nodes: &[f64], q: usize, tau: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|(m, _)| *m != q)
        .map(|(_, v)| (tau - v) / (nodes[q] - v))
        .product()
}

/// Dirichlet Hermite space on the grid's spatial mesh.
struct Space {
    n: usize,
    nx: usize,
    nq: usize,
    /// Per spatial point: `(weight, [φ_a])`.
    pts: Vec<(f64, [f64; 4])>,
    /// Per cell: global index of each local function.
    map: Vec<[Option<usize>; 4]>,
    m: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl Space {
    fn new(grid: &SpaceTimeGrid) -> Self {
        let (nx, nq, h) = (grid.nx, grid.nq(), grid.h);
        // node i carries (value, slope); values at x = 0, 1 are removed
        let index = |i: usize, c: usize| -> Option<usize> {
            match (i, c) {
                (0, 0) => None,
                (0, 1) => Some(0),
                (i, 0) if i == nx => None,
                (i, _) if i == nx => Some(2 * nx - 1),
                (i, 0) => Some(2 * i - 1),
                (i, _) => Some(2 * i),
            }
        };
        let n = 2 * nx;
        let map: Vec<[Option<usize>; 4]> =
            (0..nx).map(|ix| [index(ix, 0), index(ix, 1), index(ix + 1, 0), index(ix + 1, 1)]).collect();
        let mut pts = Vec::with_capacity(nx * nq);
        let mut m = DMatrix::zeros(n, n);
        let mut k = DMatrix::zeros(n, n);
        for loc in map.iter() {
            for q in 0..nq {
                let u = grid.rule.nodes[q];
                let w = grid.rule.weights[q] * h;
                let (v, d) = (hermite(u, h), hermite_dx(u, h));
                pts.push((w, v));
                for a in 0..4 {
                    let Some(i) = loc[a] else { continue };
                    for b in 0..4 {
                        let Some(j) = loc[b] else { continue };
                        m[(i, j)] += w * v[a] * v[b];
                        k[(i, j)] += w * d[a] * d[b];
                    }
                }
            }
        }
        Self { n, nx, nq, pts, map, m, k }
    }

    fn values(&self, y: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.pts.len());
        for (ix, loc) in self.map.iter().enumerate() {
            for q in 0..self.nq {
                let phi = &self.pts[ix * self.nq + q].1;
                out.push((0..4).filter_map(|a| loc[a].map(|i| y[i] * phi[a])).sum());
            }
        }
        out
    }

    /// `(∫ v φ_k)_k` for point values `v`.
    fn load(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (ix, loc) in self.map.iter().enumerate() {
            for q in 0..self.nq {
                let (w, phi) = &self.pts[ix * self.nq + q];
                let c = w * v[ix * self.nq + q];
                for a in 0..4 {
                    if let Some(i) = loc[a] {
                        out[i] += c * phi[a];
                    }
                }
            }
        }
        out
    }

    /// `(∫ d φ_k φ_l)_{kl}` for point values `d`.
    fn weighted_mass(&self, d: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for (ix, loc) in self.map.iter().enumerate() {
            for q in 0..self.nq {
                let (w, phi) = &self.pts[ix * self.nq + q];
                let c = w * d[ix * self.nq + q];
                for a in 0..4 {
                    let Some(i) = loc[a] else { continue };
                    for b in 0..4 {
                        if let Some(j) = loc[b] {
                            out[(i, j)] += c * phi[a] * phi[b];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Integrates from `u₀` (at the spatial Gauss points) with the physical
/// control `f` (at the space-time quadrature points) and returns the
/// terminal norm.
pub fn simulate(grid: &SpaceTimeGrid, g: &NonlinearitySpec, u0: &[f64], f: &[f64]) -> Result<Forward, ForwardError> {
    if f.len() != grid.n_points() {
        return Err(ForwardError::Size { expected: grid.n_points(), got: f.len() });
    }
    let sp = Space::new(grid);
    let (n, nq, nx, dt) = (sp.n, sp.nq, sp.nx, grid.dt);
    let (c, a) = radau();
    let mut y = sp
        .m
        .clone()
        .cholesky()
        .ok_or(ForwardError::Singular(0.0))?
        .solve(&sp.load(u0));
    let nonlinear = |z: &DVector<f64>| -> DVector<f64> {
        let v: Vec<f64> = sp.values(z).iter().map(|r| g.g(*r)).collect();
        sp.load(&v)
    };
    let jacobian = |y: &DVector<f64>| -> DMatrix<f64> {
        let d: Vec<f64> = sp.values(y).iter().map(|r| g.gprime(*r)).collect();
        let kd = &sp.k + sp.weighted_mass(&d);
        let mut j = DMatrix::zeros(3 * n, 3 * n);
        for s in 0..3 {
            for r in 0..3 {
                let mut blk = kd.scale(dt * a[s][r]);
                if s == r {
                    blk += &sp.m;
                }
                j.view_mut((s * n, r * n), (n, n)).copy_from(&blk);
            }
        }
        j
    };
    let mut lu = None;
    let mut stats = Forward { terminal_l2: 0.0, sup: 0.0, newton_iterations: 0, factorizations: 0 };
    let mut fvals = vec![0.0; nx * nq];
    for jt in 0..grid.nt {
        let t0 = jt as f64 * dt;
        let loads: Vec<DVector<f64>> = c
            .iter()
            .map(|&tau| {
                for ix in 0..nx {
                    for qx in 0..nq {
                        fvals[ix * nq + qx] = (0..nq)
                            .map(|qt| lagrange(&grid.rule.nodes, qt, tau) * f[((jt * nx + ix) * nq + qt) * nq + qx])
                            .sum();
                    }
                }
                sp.load(&fvals)
            })
            .collect();
        let my = &sp.m * &y;
        let mut fresh = false;
        'newton: loop {
            if lu.is_none() {
                lu = Some(jacobian(&y).lu());
                stats.factorizations += 1;
                fresh = true;
            }
            let solver = lu.as_ref().expect("factorized above");
            let mut z: Vec<DVector<f64>> = vec![y.clone(); 3];
            let mut prev = f64::INFINITY;
            for it in 0..25 {
                let fl: Vec<DVector<f64>> = (0..3).map(|r| &sp.k * &z[r] + nonlinear(&z[r]) - &loads[r]).collect();
                let mut res = DVector::zeros(3 * n);
                for s in 0..3 {
                    let mut rs = &sp.m * &z[s] - &my;
                    for r in 0..3 {
                        rs.axpy(dt * a[s][r], &fl[r], 1.0);
                    }
                    res.rows_mut(s * n, n).copy_from(&rs);
                }
                let dz = solver.solve(&res).ok_or(ForwardError::Singular(t0))?;
                stats.newton_iterations += 1;
                let step = dz.amax();
                for s in 0..3 {
                    z[s] -= dz.rows(s * n, n);
                }
                let scale = z.iter().map(|v| v.amax()).fold(0.0, f64::max);
                if !step.is_finite() || !scale.is_finite() {
                    return Err(ForwardError::NonFinite(t0 + dt));
                }
                if step <= 1e-13 * scale.max(1e-300) || (g.is_linear() && it == 0) {
                    y = z.swap_remove(2);
                    break 'newton;
                }
                if it > 0 && step > 0.5 * prev {
                    break;
                }
                prev = step;
            }
            // slow contraction: refresh a stale Jacobian, give up on a fresh one
            if fresh {
                return Err(ForwardError::NoConvergence(t0));
            }
            lu = None;
        }
        stats.sup = stats.sup.max(y.amax());
    }
    stats.terminal_l2 = y.dot(&(&sp.m * &y)).max(0.0).sqrt();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Interval};
    use crate::nonlinearity::builtin;
    use std::f64::consts::PI;

    #[test]
    fn free_decay_of_first_mode() {
        let grid = make_grid(16, 16, 0.5, Interval::new(0.2, 0.8)).unwrap();
        let u0 = crate::linear_control::sample_initial(&grid, |x| (PI * x).sin());
        let f = vec![0.0; grid.n_points()];
        let out = simulate(&grid, &builtin("zero").unwrap(), &u0, &f).unwrap();
        let exact = (-PI * PI * 0.5).exp() * 0.5f64.sqrt();
        assert!((out.terminal_l2 - exact).abs() < 1e-5 * exact, "{} vs {exact}", out.terminal_l2);
    }

    #[test]
    fn linear_potential_and_nonlinear_agree_on_small_data() {
        let grid = make_grid(12, 12, 0.5, Interval::new(0.2, 0.8)).unwrap();
        let u0 = crate::linear_control::sample_initial(&grid, |x| 1e-6 * (PI * x).sin());
        let f = vec![0.0; grid.n_points()];
        // sin r ≈ r for tiny data
        let a = simulate(&grid, &builtin("lipschitz_sin(1)").unwrap(), &u0, &f).unwrap();
        let b = simulate(&grid, &builtin("linear(1)").unwrap(), &u0, &f).unwrap();
        assert!((a.terminal_l2 - b.terminal_l2).abs() < 1e-10 * b.terminal_l2);
        let exact = (-(PI * PI + 1.0) * 0.5).exp() * 0.5f64.sqrt() * 1e-6;
        assert!((b.terminal_l2 - exact).abs() < 1e-4 * exact, "{} vs {exact}", b.terminal_l2);
    }

    #[test]
    fn interpolated_source_is_integrated_accurately() {
        // y = t·sin(πx) solves y_t − y_xx = (1 + π²t) sin(πx), y(0) = 0
        let grid = make_grid(16, 8, 0.5, Interval::new(0.2, 0.8)).unwrap();
        let f = grid.sample(|x, t| (1.0 + PI * PI * t) * (PI * x).sin()).into_inner();
        let u0 = vec![0.0; grid.nx * grid.nq()];
        let out = simulate(&grid, &builtin("zero").unwrap(), &u0, &f).unwrap();
        let exact = 0.5 * 0.5f64.sqrt();
        assert!((out.terminal_l2 - exact).abs() < 1e-6 * exact, "{}", out.terminal_l2);
    }
}
