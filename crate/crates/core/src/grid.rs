//! Space-time meshes of `Q_T = (0,1) x (0,T)`, C¹ cubic Hermite fields in
//! space with continuous piecewise-linear time dependence, tensor Gauss
//! quadrature and weighted norms.
//!
//! Quadrature points are numbered slab by slab: for time cell `j`, space cell
//! `i`, and local Gauss indices `(qt, qx)` the flat index is
//! `((j * nx + i) * nq + qt) * nq + qx`. All point-valued data in the crate
//! ([`PointField`]) follows this layout.

use std::fmt;
use std::io::{self, Write};
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("need nx >= 4 and nt >= 4, got nx = {nx}, nt = {nt}")]
    TooCoarse { nx: usize, nt: usize },
    #[error("time horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("control region ({a}, {b}) must satisfy 0 < a < b < 1")]
    BadControlRegion { a: f64, b: f64 },
    #[error("unsupported Gauss rule with {0} points (supported: 2..=5)")]
    BadQuadrature(usize),
}

/// Open interval `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.a && x < self.b
    }
}

/// Gauss-Legendre rule mapped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(n: usize) -> Result<Self, GridError> {
        let (x, w): (Vec<f64>, Vec<f64>) = match n {
            2 => {
                let a = 1.0 / 3f64.sqrt();
                (vec![-a, a], vec![1.0, 1.0])
            }
            3 => {
                let a = (3.0f64 / 5.0).sqrt();
                (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
            }
            4 => {
                let r = (6.0f64 / 5.0).sqrt() * 2.0 / 7.0;
                let a = (3.0 / 7.0 - r).sqrt();
                let b = (3.0 / 7.0 + r).sqrt();
                let wa = (18.0 + 30f64.sqrt()) / 36.0;
                let wb = (18.0 - 30f64.sqrt()) / 36.0;
                (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
            }
            5 => {
                let r = 2.0 * (10.0f64 / 7.0).sqrt();
                let a = (5.0 - r).sqrt() / 3.0;
                let b = (5.0 + r).sqrt() / 3.0;
                let w0 = 128.0 / 225.0;
                let wa = (322.0 + 13.0 * 70f64.sqrt()) / 900.0;
                let wb = (322.0 - 13.0 * 70f64.sqrt()) / 900.0;
                (vec![-b, -a, 0.0, a, b], vec![wb, wa, w0, wa, wb])
            }
            _ => return Err(GridError::BadQuadrature(n)),
        };
        Ok(Self {
            nodes: x.iter().map(|v| 0.5 * (v + 1.0)).collect(),
            weights: w.iter().map(|v| 0.5 * v).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Cubic Hermite shape functions on a cell of width `h`, local coordinate
/// `u` in `[0, 1]`. Order: value-left, slope-left, value-right, slope-right.
pub fn hermite(u: f64, h: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        1.0 - 3.0 * u2 + 2.0 * u3,
        h * (u - 2.0 * u2 + u3),
        3.0 * u2 - 2.0 * u3,
        h * (u3 - u2),
    ]
}

/// First x-derivatives of [`hermite`].
pub fn hermite_dx(u: f64, h: f64) -> [f64; 4] {
    let u2 = u * u;
    [
        (-6.0 * u + 6.0 * u2) / h,
        1.0 - 4.0 * u + 3.0 * u2,
        (6.0 * u - 6.0 * u2) / h,
        3.0 * u2 - 2.0 * u,
    ]
}

/// Second x-derivatives of [`hermite`].
pub fn hermite_dxx(u: f64, h: f64) -> [f64; 4] {
    [
        (-6.0 + 12.0 * u) / (h * h),
        (-4.0 + 6.0 * u) / h,
        (6.0 - 12.0 * u) / (h * h),
        (6.0 * u - 2.0) / h,
    ]
}

/// Values, derivatives and operator images of the 8 local basis functions
/// of one space-time cell at every quadrature point of the cell.
///
/// Local basis index `loc = 4 * b + a` pairs the Hermite function `a` with
/// the time hat `b` (0: lower level, 1: upper level). Point index inside the
/// cell is `qt * nq + qx`.
#[derive(Debug, Clone)]
pub struct ElementTables {
    pub val: [Vec<f64>; 8],
    pub dx: [Vec<f64>; 8],
    pub dxx: [Vec<f64>; 8],
    pub dt: [Vec<f64>; 8],
}

/// Tensor-product mesh of `Q_T` with the control cells of `q_T` marked.
#[derive(Debug, Clone)]
pub struct SpaceTimeGrid {
    pub nx: usize,
    pub nt: usize,
    pub t_final: f64,
    /// Control region after snapping to nodes.
    pub omega: Interval,
    /// Node indices of the snapped control region endpoints.
    pub omega_nodes: (usize, usize),
    pub h: f64,
    pub dt: f64,
    pub rule: GaussRule,
    tables: ElementTables,
}

/// Builds a grid with the default 3-point Gauss rule in each direction.
pub fn make_grid(nx: usize, nt: usize, t_final: f64, omega: Interval) -> Result<SpaceTimeGrid, GridError> {
    SpaceTimeGrid::with_rule(nx, nt, t_final, omega, 3)
}

impl SpaceTimeGrid {
    pub fn with_rule(
        nx: usize,
        nt: usize,
        t_final: f64,
        omega: Interval,
        nq: usize,
    ) -> Result<Self, GridError> {
        if nx < 4 || nt < 4 {
            return Err(GridError::TooCoarse { nx, nt });
        }
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(GridError::BadHorizon(t_final));
        }
        let bad = GridError::BadControlRegion { a: omega.a, b: omega.b };
        if !(omega.a > 0.0 && omega.b < 1.0 && omega.a < omega.b) {
            return Err(bad);
        }
        let ia = (omega.a * nx as f64).round() as usize;
        let ib = (omega.b * nx as f64).round() as usize;
        if ia == 0 || ib >= nx || ia >= ib {
            return Err(bad);
        }
        let rule = GaussRule::new(nq)?;
        let h = 1.0 / nx as f64;
        let dt = t_final / nt as f64;
        let tables = build_tables(&rule, h, dt);
        Ok(Self {
            nx,
            nt,
            t_final,
            omega: Interval::new(ia as f64 * h, ib as f64 * h),
            omega_nodes: (ia, ib),
            h,
            dt,
            rule,
            tables,
        })
    }

    /// Same mesh, different quadrature rule.
    pub fn with_quadrature(&self, nq: usize) -> Result<Self, GridError> {
        let mut g = Self::with_rule(self.nx, self.nt, self.t_final, self.omega, nq)?;
        g.omega = self.omega;
        g.omega_nodes = self.omega_nodes;
        Ok(g)
    }

    pub fn nq(&self) -> usize {
        self.rule.len()
    }

    /// Quadrature points per space-time cell.
    pub fn points_per_cell(&self) -> usize {
        self.nq() * self.nq()
    }

    /// Quadrature points per time slab.
    pub fn points_per_slab(&self) -> usize {
        self.nx * self.points_per_cell()
    }

    pub fn n_points(&self) -> usize {
        self.nt * self.points_per_slab()
    }

    pub fn tables(&self) -> &ElementTables {
        &self.tables
    }

    pub fn x_node(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn t_node(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    #[inline]
    pub fn cell_start(&self, ix: usize, jt: usize) -> usize {
        (jt * self.nx + ix) * self.points_per_cell()
    }

    /// Whether space cell `ix` lies inside the control region.
    #[inline]
    pub fn in_control(&self, ix: usize) -> bool {
        ix >= self.omega_nodes.0 && ix < self.omega_nodes.1
    }

    /// `(x, t)` of a flat quadrature index.
    pub fn point(&self, idx: usize) -> (f64, f64) {
        let nq = self.nq();
        let qx = idx % nq;
        let qt = (idx / nq) % nq;
        let cell = idx / (nq * nq);
        let ix = cell % self.nx;
        let jt = cell / self.nx;
        (
            (ix as f64 + self.rule.nodes[qx]) * self.h,
            (jt as f64 + self.rule.nodes[qt]) * self.dt,
        )
    }

    /// Quadrature weight (including the cell measure) of a flat index.
    pub fn weight(&self, idx: usize) -> f64 {
        let nq = self.nq();
        let qx = idx % nq;
        let qt = (idx / nq) % nq;
        self.rule.weights[qx] * self.rule.weights[qt] * self.h * self.dt
    }

    /// Cell-local quadrature weights (`qt * nq + qx` order), cell measure included.
    pub fn cell_weights(&self) -> Vec<f64> {
        let nq = self.nq();
        let mut w = Vec::with_capacity(nq * nq);
        for qt in 0..nq {
            for qx in 0..nq {
                w.push(self.rule.weights[qx] * self.rule.weights[qt] * self.h * self.dt);
            }
        }
        w
    }

    /// Whether the flat index lies in `q_T`.
    pub fn point_in_control(&self, idx: usize) -> bool {
        let cell = idx / self.points_per_cell();
        self.in_control(cell % self.nx)
    }

    /// Spatial Gauss points on `Ω` at a fixed time: `(x, weight)` in cell order.
    pub fn spatial_points(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.nx * self.nq());
        for ix in 0..self.nx {
            for q in 0..self.nq() {
                out.push((
                    (ix as f64 + self.rule.nodes[q]) * self.h,
                    self.rule.weights[q] * self.h,
                ));
            }
        }
        out
    }

    /// Evaluates `f(x, t)` at every quadrature point.
    pub fn sample<F: Fn(f64, f64) -> f64 + Sync>(&self, f: F) -> PointField {
        let values = crate::par::map_range(self.n_points(), |idx| {
            let (x, t) = self.point(idx);
            f(x, t)
        });
        PointField::from(values)
    }

    /// Number of nodal degrees of freedom of a [`Field`].
    pub fn n_field_dofs(&self) -> usize {
        (self.nt + 1) * (self.nx + 1) * 2
    }
}

impl fmt::Display for SpaceTimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} grid on (0,1)x(0,{}), omega = ({}, {})",
            self.nx, self.nt, self.t_final, self.omega.a, self.omega.b
        )
    }
}

fn build_tables(rule: &GaussRule, h: f64, dt: f64) -> ElementTables {
    let nq = rule.len();
    let npt = nq * nq;
    let mut t = ElementTables {
        val: std::array::from_fn(|_| vec![0.0; npt]),
        dx: std::array::from_fn(|_| vec![0.0; npt]),
        dxx: std::array::from_fn(|_| vec![0.0; npt]),
        dt: std::array::from_fn(|_| vec![0.0; npt]),
    };
    for qt in 0..nq {
        let tau = rule.nodes[qt];
        let nt_val = [1.0 - tau, tau];
        let nt_dt = [-1.0 / dt, 1.0 / dt];
        for qx in 0..nq {
            let u = rule.nodes[qx];
            let hv = hermite(u, h);
            let hd = hermite_dx(u, h);
            let hdd = hermite_dxx(u, h);
            let q = qt * nq + qx;
            for b in 0..2 {
                for a in 0..4 {
                    let loc = 4 * b + a;
                    t.val[loc][q] = hv[a] * nt_val[b];
                    t.dx[loc][q] = hd[a] * nt_val[b];
                    t.dxx[loc][q] = hdd[a] * nt_val[b];
                    t.dt[loc][q] = hv[a] * nt_dt[b];
                }
            }
        }
    }
    t
}

/// Scalar data attached to the quadrature points of a grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointField {
    values: Vec<f64>,
}

impl PointField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self { values: vec![0.0; grid.n_points()] }
    }

    pub fn constant(grid: &SpaceTimeGrid, c: f64) -> Self {
        Self { values: vec![c; grid.n_points()] }
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { values: self.values.iter().map(|v| c * v).collect() }
    }

    /// `self - lambda * other`
    pub fn axpy(&self, lambda: f64, other: &PointField) -> Self {
        Self {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - lambda * b).collect(),
        }
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        Self { values: self.values.iter().map(|v| f(*v)).collect() }
    }
}

impl From<Vec<f64>> for PointField {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

impl Deref for PointField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for PointField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Region of integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// `Q_T`
    Full,
    /// `q_T = ω x (0,T)`
    Control,
}

/// `(∫ w² u²)^{1/2}` over the region, with `w = exp(log_w)` given as logs at
/// the quadrature points (`None` means `w = 1`). Products are formed as
/// `exp(log_w + ln|u|)` so that large weights times small values stay finite.
pub fn weighted_l2_norm(grid: &SpaceTimeGrid, u: &[f64], log_w: Option<&[f64]>, region: Region) -> f64 {
    assert_eq!(u.len(), grid.n_points());
    let cw = grid.cell_weights();
    let npc = grid.points_per_cell();
    let slab = grid.points_per_slab();
    let partial = crate::par::map_range(grid.nt, |jt| {
        let mut acc = 0.0;
        for ix in 0..grid.nx {
            if region == Region::Control && !grid.in_control(ix) {
                continue;
            }
            let base = jt * slab + ix * npc;
            for q in 0..npc {
                let v = u[base + q];
                if v == 0.0 {
                    continue;
                }
                let term = match log_w {
                    Some(lw) => (2.0 * (lw[base + q] + v.abs().ln())).exp(),
                    None => v * v,
                };
                acc += cw[q] * term;
            }
        }
        acc
    });
    partial.iter().sum::<f64>().sqrt()
}

/// Nodal C¹-in-space, C⁰-in-time field: at every time level and node a value
/// and a slope. Layout `((j * (nx + 1)) + i) * 2 + k`, `k = 0` value, `k = 1` slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub nx: usize,
    pub nt: usize,
    pub dofs: Vec<f64>,
}

/// A field and its derivatives at all quadrature points.
#[derive(Debug, Clone)]
pub struct FieldEval {
    pub value: PointField,
    pub dx: PointField,
    pub dxx: PointField,
    pub dt: PointField,
}

impl Field {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self { nx: grid.nx, nt: grid.nt, dofs: vec![0.0; grid.n_field_dofs()] }
    }

    /// Nodal Hermite interpolant of `f` with slope `fx` at every time level.
    pub fn interpolate<F, G>(grid: &SpaceTimeGrid, f: F, fx: G) -> Self
    where
        F: Fn(f64, f64) -> f64,
        G: Fn(f64, f64) -> f64,
    {
        let mut out = Self::zeros(grid);
        for j in 0..=grid.nt {
            let t = grid.t_node(j);
            for i in 0..=grid.nx {
                let x = grid.x_node(i);
                let (a, b) = (out.index(i, j, 0), out.index(i, j, 1));
                out.dofs[a] = f(x, t);
                out.dofs[b] = fx(x, t);
            }
        }
        out
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        ((j * (self.nx + 1)) + i) * 2 + k
    }

    pub fn value_at_node(&self, i: usize, j: usize) -> f64 {
        self.dofs[self.index(i, j, 0)]
    }

    /// True when every boundary value dof vanishes exactly.
    pub fn is_homogeneous_dirichlet(&self) -> bool {
        (0..=self.nt).all(|j| self.value_at_node(0, j) == 0.0 && self.value_at_node(self.nx, j) == 0.0)
    }

    /// Zeroes the boundary value dofs.
    pub fn impose_dirichlet(&mut self) {
        for j in 0..=self.nt {
            let a = self.index(0, j, 0);
            let b = self.index(self.nx, j, 0);
            self.dofs[a] = 0.0;
            self.dofs[b] = 0.0;
        }
    }

    /// Point evaluation at `(x, t)` in `[0,1] x [0,T]`.
    pub fn eval(&self, grid: &SpaceTimeGrid, x: f64, t: f64) -> f64 {
        let (ix, u) = locate(x, grid.h, grid.nx);
        let (jt, tau) = locate(t, grid.dt, grid.nt);
        let hv = hermite(u, grid.h);
        let mut acc = 0.0;
        for (b, wt) in [(0usize, 1.0 - tau), (1usize, tau)] {
            for a in 0..4 {
                acc += wt * hv[a] * self.dofs[self.index(ix + a / 2, jt + b, a % 2)];
            }
        }
        acc
    }

    /// Value and derivatives at every quadrature point.
    pub fn evaluate(&self, grid: &SpaceTimeGrid) -> FieldEval {
        let tb = grid.tables();
        let npc = grid.points_per_cell();
        let slabs = crate::par::map_range(grid.nt, |jt| {
            let mut v = vec![0.0; grid.points_per_slab()];
            let mut dx = v.clone();
            let mut dxx = v.clone();
            let mut dt = v.clone();
            for ix in 0..grid.nx {
                let base = ix * npc;
                for loc in 0..8 {
                    let (a, b) = (loc % 4, loc / 4);
                    let c = self.dofs[self.index(ix + a / 2, jt + b, a % 2)];
                    if c == 0.0 {
                        continue;
                    }
                    for q in 0..npc {
                        v[base + q] += c * tb.val[loc][q];
                        dx[base + q] += c * tb.dx[loc][q];
                        dxx[base + q] += c * tb.dxx[loc][q];
                        dt[base + q] += c * tb.dt[loc][q];
                    }
                }
            }
            (v, dx, dxx, dt)
        });
        let n = grid.n_points();
        let mut out = FieldEval {
            value: PointField::from(Vec::with_capacity(n)),
            dx: PointField::from(Vec::with_capacity(n)),
            dxx: PointField::from(Vec::with_capacity(n)),
            dt: PointField::from(Vec::with_capacity(n)),
        };
        for (v, dx, dxx, dt) in slabs {
            out.value.values.extend(v);
            out.dx.values.extend(dx);
            out.dxx.values.extend(dxx);
            out.dt.values.extend(dt);
        }
        out
    }

    /// Values on `Ω` at time level `j`, sampled at the spatial Gauss points.
    pub fn level_values(&self, grid: &SpaceTimeGrid, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.nx * grid.nq());
        for ix in 0..grid.nx {
            for q in 0..grid.nq() {
                let hv = hermite(grid.rule.nodes[q], grid.h);
                out.push((0..4).map(|a| hv[a] * self.dofs[self.index(ix + a / 2, j, a % 2)]).sum());
            }
        }
        out
    }

    /// `‖u(·, t_j)‖_{L²(Ω)}`
    pub fn level_l2(&self, grid: &SpaceTimeGrid, j: usize) -> f64 {
        let vals = self.level_values(grid, j);
        grid.spatial_points()
            .iter()
            .zip(&vals)
            .map(|((_, w), v)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// CSV dump on the nodal lattice, header `x,t,value`.
    pub fn write_csv<W: Write>(&self, grid: &SpaceTimeGrid, mut w: W) -> io::Result<()> {
        writeln!(w, "x,t,value")?;
        for j in 0..=self.nt {
            for i in 0..=self.nx {
                writeln!(w, "{},{},{:e}", grid.x_node(i), grid.t_node(j), self.value_at_node(i, j))?;
            }
        }
        Ok(())
    }

    /// Binary dump: magic `NHFIELD1`, `nx: u64`, `nt: u64`, `T: f64`, then the
    /// nodal values row-major (time level outer, node inner) as `f64`, all
    /// little-endian.
    pub fn write_binary<W: Write>(&self, grid: &SpaceTimeGrid, mut w: W) -> io::Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&(self.nx as u64).to_le_bytes())?;
        w.write_all(&(self.nt as u64).to_le_bytes())?;
        w.write_all(&grid.t_final.to_le_bytes())?;
        for j in 0..=self.nt {
            for i in 0..=self.nx {
                w.write_all(&self.value_at_node(i, j).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

pub const FIELD_MAGIC: &[u8; 8] = b"NHFIELD1";

/// Cell index and local coordinate of `x` on a uniform mesh of `n` cells of width `h`.
fn locate(x: f64, h: f64, n: usize) -> (usize, f64) {
    let s = (x / h).max(0.0);
    let i = (s.floor() as usize).min(n - 1);
    (i, (s - i as f64).clamp(0.0, 1.0))
}

/// Linear part of the heat operator, `∂ₜy − ∂ₓₓy`, at the quadrature points.
pub fn heat_operator(grid: &SpaceTimeGrid, y: &Field) -> PointField {
    let e = y.evaluate(grid);
    PointField::from(e.dt.iter().zip(e.dxx.iter()).map(|(a, b)| a - b).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, nt: usize, t: f64) -> SpaceTimeGrid {
        make_grid(nx, nt, t, Interval::new(0.2, 0.8)).unwrap()
    }

    #[test]
    fn snaps_control_region_to_nodes() {
        let g = grid(64, 64, 0.5);
        assert_eq!(g.omega.a, 13.0 / 64.0);
        assert_eq!(g.omega.b, 51.0 / 64.0);
        assert_eq!(g.omega.a, 0.203125);
        assert_eq!(g.omega.b, 0.796875);

        let g = make_grid(4, 4, 1.0, Interval::new(0.25, 0.75)).unwrap();
        assert_eq!((g.omega.a, g.omega.b), (0.25, 0.75));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            make_grid(64, 64, 0.5, Interval::new(0.0, 0.5)),
            Err(GridError::BadControlRegion { .. })
        ));
        assert!(make_grid(64, 64, 0.5, Interval::new(0.5, 1.0)).is_err());
        // snapping onto the boundary is also rejected
        assert!(make_grid(4, 4, 0.5, Interval::new(0.1, 0.5)).is_err());
        assert!(matches!(make_grid(3, 8, 0.5, Interval::new(0.25, 0.75)), Err(GridError::TooCoarse { .. })));
        assert!(matches!(make_grid(8, 8, 0.0, Interval::new(0.25, 0.75)), Err(GridError::BadHorizon(_))));
    }

    #[test]
    fn gauss_rules_integrate_polynomials() {
        for n in 2..=5 {
            let r = GaussRule::new(n).unwrap();
            let deg = 2 * n - 1;
            for p in 0..=deg {
                let q: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(p as i32)).sum();
                assert!((q - 1.0 / (p as f64 + 1.0)).abs() < 1e-14, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn hermite_derivatives_match_finite_differences() {
        let h = 0.3;
        let eps = 1e-6;
        for &u in &[0.1, 0.4, 0.77] {
            let d = hermite_dx(u, h);
            let dd = hermite_dxx(u, h);
            let p = hermite(u + eps, h);
            let m = hermite(u - eps, h);
            let dp = hermite_dx(u + eps, h);
            let dm = hermite_dx(u - eps, h);
            for a in 0..4 {
                assert!(((p[a] - m[a]) / (2.0 * eps * h) - d[a]).abs() < 1e-7);
                assert!(((dp[a] - dm[a]) / (2.0 * eps * h) - dd[a]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_field_has_zero_residual() {
        let g = grid(8, 8, 0.5);
        let r = heat_operator(&g, &Field::zeros(&g));
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn polynomial_residual_is_exact() {
        // y = t x (1 - x): cubic in x, linear in t, hence represented exactly
        let g = grid(8, 6, 0.5);
        let y = Field::interpolate(&g, |x, t| t * x * (1.0 - x), |x, t| t * (1.0 - 2.0 * x));
        let r = heat_operator(&g, &y);
        for (idx, v) in r.iter().enumerate() {
            let (x, t) = g.point(idx);
            let exact = x * (1.0 - x) + 2.0 * t;
            assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        }
        assert!(y.is_homogeneous_dirichlet());
    }

    #[test]
    fn point_evaluation_reproduces_cubics() {
        let g = grid(5, 4, 1.0);
        let y = Field::interpolate(&g, |x, t| (1.0 + t) * x * x * x, |x, t| 3.0 * (1.0 + t) * x * x);
        for &(x, t) in &[(0.13, 0.2), (0.5, 0.5), (0.99, 0.91), (1.0, 1.0)] {
            assert!((y.eval(&g, x, t) - (1.0 + t) * x.powi(3)).abs() < 1e-13);
        }
    }

    #[test]
    fn measures_of_domains() {
        let g = grid(16, 16, 0.5);
        let one = PointField::constant(&g, 1.0);
        let n = weighted_l2_norm(&g, &one, None, Region::Full);
        assert!((n - 0.5f64.sqrt()).abs() < 1e-13);

        let g = make_grid(16, 16, 1.0, Interval::new(0.25, 0.75)).unwrap();
        let one = PointField::constant(&g, 1.0);
        let n = weighted_l2_norm(&g, &one, None, Region::Control);
        assert!((n - 0.5f64.sqrt()).abs() < 1e-13);

        assert_eq!(weighted_l2_norm(&g, &PointField::zeros(&g), None, Region::Full), 0.0);
    }

    #[test]
    fn log_weights_match_plain_products() {
        let g = grid(8, 8, 0.5);
        let u = g.sample(|x, t| (x - 0.3) * (1.0 + t));
        let lw = g.sample(|x, t| 2.0 * x - t);
        let direct: Vec<f64> = u.iter().zip(lw.iter()).map(|(a, b)| a * b.exp()).collect();
        let a = weighted_l2_norm(&g, &u, Some(&lw), Region::Full);
        let b = weighted_l2_norm(&g, &direct, None, Region::Full);
        assert!((a - b).abs() < 1e-13 * b);
    }

    #[test]
    fn csv_dump_has_header_and_all_nodes() {
        let g = grid(4, 4, 1.0);
        let y = Field::interpolate(&g, |x, _| x, |_, _| 1.0);
        let mut buf = Vec::new();
        y.write_csv(&g, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,t,value\n"));
        assert_eq!(s.lines().count(), 1 + 5 * 5);
    }

    #[test]
    fn binary_dump_layout() {
        let g = grid(4, 4, 1.0);
        let y = Field::interpolate(&g, |x, t| x + 10.0 * t, |_, _| 1.0);
        let mut buf = Vec::new();
        y.write_binary(&g, &mut buf).unwrap();
        assert_eq!(&buf[..8], FIELD_MAGIC);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 32 + 25 * 8);
        // node (i=2, j=1): x = 0.5, t = 0.25
        let off = 32 + (5 + 2) * 8;
        assert_eq!(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()), 3.0);
    }
}
