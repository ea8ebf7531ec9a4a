//! Weighted null control of `∂ₜz − ∂ₓₓz + Az = v·1_ω + B`, `z(0) = z₀`,
//! `z(T) = 0`, by the variational (adjoint) method.
//!
//! The adjoint `p` lives in the conforming space `P_h` of C¹ cubic Hermite
//! (space) × continuous P1 (time) functions vanishing at `x = 0, 1`, with
//! `p(·,T)` free. It solves
//!
//! ```text
//! a(p, q) = ∫ρ⁻² L*_A p L*_A q + κ∫_{q_T} ρ₀⁻² p q = ∫z₀q(0) + ∫Bq   ∀q ∈ P_h
//! ```
//!
//! with `κ = s³λ₀⁴`, and then `z = ρ⁻²L*_A p`, `v = −κρ₀⁻²p` on `q_T`. This
//! pair satisfies `∫z L*_A q − ∫_{q_T} v q = ∫z₀q(0) + ∫Bq` for every test
//! function, which is the discrete (transposition) form of the controlled
//! equation including `z(T) = 0`.
//!
//! Weights span hundreds of orders of magnitude, so nothing is formed in
//! physical scale. Each basis function `q_i` carries `d_i`, the minimum of
//! `log ρ` over its support, and the unknowns are `p̂_i = e^{-d_i} p_i`.
//! States are stored as `ẑ = ρz` and controls as `v̂ = ρ₀v`.

use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::grid::{Field, PointField, SpaceTimeGrid};
use crate::linalg::{self, BandCholesky, BandedSpd, LinalgError, SolveInfo};
use crate::par;
use crate::weights::{WeightSet, WeightTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearControlError {
    #[error("s = {s} is below max(|A|^(2/3), s0) = {required}")]
    NeedLargerS { s: f64, required: f64 },
    #[error("initial-time weight e^{0:.1} is not representable; lower s")]
    InitialScale(f64),
    #[error("linear solver failed: {0}")]
    Linalg(#[from] LinalgError),
    #[error("adjoint system residual {0:e} above tolerance")]
    Inaccurate(f64),
}

/// Dof numbering of `P_h`: level-major, per level the slope at `x = 0`, then
/// value/slope pairs of interior nodes, then the slope at `x = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestSpace {
    pub nx: usize,
    pub nt: usize,
    /// Dofs per time level, `2·nx`.
    pub per_level: usize,
    pub n: usize,
    /// Half bandwidth, `2·nx + 3`.
    pub kd: usize,
}

impl TestSpace {
    pub fn new(grid: &SpaceTimeGrid) -> Self {
        let per_level = 2 * grid.nx;
        Self { nx: grid.nx, nt: grid.nt, per_level, n: per_level * (grid.nt + 1), kd: per_level + 3 }
    }

    /// Index within a level of node `i`, kind `k` (0 value, 1 slope).
    pub fn local(&self, i: usize, k: usize) -> Option<usize> {
        if i == 0 {
            (k == 1).then_some(0)
        } else if i == self.nx {
            (k == 1).then_some(self.per_level - 1)
        } else {
            Some(1 + 2 * (i - 1) + k)
        }
    }

    pub fn global(&self, i: usize, j: usize, k: usize) -> Option<usize> {
        self.local(i, k).map(|l| j * self.per_level + l)
    }

    /// Global dofs of the 8 local basis functions of cell `(ix, jt)`.
    pub fn element_dofs(&self, ix: usize, jt: usize) -> [Option<usize>; 8] {
        std::array::from_fn(|loc| {
            let (a, b) = (loc % 4, loc / 4);
            self.global(ix + a / 2, jt + b, a % 2)
        })
    }

    /// Field with the given (physical) coefficients.
    pub fn to_field(&self, coef: &[f64]) -> Field {
        let mut f = Field { nx: self.nx, nt: self.nt, dofs: vec![0.0; (self.nt + 1) * (self.nx + 1) * 2] };
        for j in 0..=self.nt {
            for i in 0..=self.nx {
                for k in 0..2 {
                    if let Some(g) = self.global(i, j, k) {
                        let idx = f.index(i, j, k);
                        f.dofs[idx] = coef[g];
                    }
                }
            }
        }
        f
    }

    /// Coefficients of a Field in this space (boundary values dropped).
    pub fn from_field(&self, f: &Field) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for j in 0..=self.nt {
            for i in 0..=self.nx {
                for k in 0..2 {
                    if let Some(g) = self.global(i, j, k) {
                        out[g] = f.dofs[f.index(i, j, k)];
                    }
                }
            }
        }
        out
    }
}

/// Weight to divide by in a mass-type term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// `e^{d_i − log ρ}`: pairs with `ρ`-scaled data.
    Rho,
    /// `e^{d_i − log ρ₀}`: pairs with `ρ₀`-scaled data.
    Rho0,
}

/// Grid, weights and the log-scaled test basis for one value of `s`.
#[derive(Debug, Clone)]
pub struct WeightedSpace {
    pub grid: SpaceTimeGrid,
    pub weights: WeightSet,
    pub table: WeightTable,
    pub space: TestSpace,
    /// `d_i`
    pub scale: Vec<f64>,
    /// `e^{d_a − log ρ}` per `(element, loc, point)`.
    er: Vec<f64>,
    /// `e^{d_a − log ρ₀}` per `(element, loc, point)`.
    er0: Vec<f64>,
    /// `e^{log ρ₀ − log ρ}` per point, i.e. `ξ^{-3/2}`.
    ratio0: Vec<f64>,
}

impl WeightedSpace {
    pub fn new(grid: &SpaceTimeGrid, weights: &WeightSet) -> Self {
        let table = weights.table(grid);
        let space = TestSpace::new(grid);
        let npc = grid.points_per_cell();
        let nx = grid.nx;
        let elem_min: Vec<f64> = (0..nx * grid.nt)
            .map(|e| table.log_rho[e * npc..(e + 1) * npc].iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        let mut scale = vec![f64::INFINITY; space.n];
        for jt in 0..grid.nt {
            for ix in 0..nx {
                for d in space.element_dofs(ix, jt).iter().flatten() {
                    scale[*d] = scale[*d].min(elem_min[jt * nx + ix]);
                }
            }
        }
        let per_elem = 8 * npc;
        let chunks = par::map_range(grid.nt, |jt| {
            let mut er = vec![0.0; nx * per_elem];
            let mut er0 = vec![0.0; nx * per_elem];
            for ix in 0..nx {
                let dofs = space.element_dofs(ix, jt);
                let base = grid.cell_start(ix, jt);
                for (loc, dof) in dofs.iter().enumerate() {
                    let Some(d) = dof else { continue };
                    for q in 0..npc {
                        let o = ix * per_elem + loc * npc + q;
                        er[o] = (scale[*d] - table.log_rho[base + q]).exp();
                        er0[o] = (scale[*d] - table.log_rho0[base + q]).exp();
                    }
                }
            }
            (er, er0)
        });
        let mut er = Vec::with_capacity(grid.n_points() * 8);
        let mut er0 = Vec::with_capacity(grid.n_points() * 8);
        for (a, b) in chunks {
            er.extend(a);
            er0.extend(b);
        }
        let ratio0 = (0..grid.n_points()).map(|i| (table.log_rho0[i] - table.log_rho[i]).exp()).collect();
        Self { grid: grid.clone(), weights: weights.clone(), table, space, scale, er, er0, ratio0 }
    }

    pub fn s(&self) -> f64 {
        self.weights.s()
    }

    pub fn kappa(&self) -> f64 {
        self.weights.kappa()
    }

    #[inline]
    fn elem_offset(&self, ix: usize, jt: usize) -> usize {
        (jt * self.grid.nx + ix) * 8 * self.grid.points_per_cell()
    }

    /// `ρ₀/ρ` at each quadrature point.
    pub fn rho0_over_rho(&self) -> &[f64] {
        &self.ratio0
    }

    /// Physical values `u = e^{-log w}·û` of scaled data.
    pub fn unscale(&self, uhat: &[f64], s: Scale) -> PointField {
        let lw = match s {
            Scale::Rho => &self.table.log_rho,
            Scale::Rho0 => &self.table.log_rho0,
        };
        PointField::from(uhat.iter().zip(lw.iter()).map(|(u, l)| u * (-l).exp()).collect::<Vec<_>>())
    }

    /// `ρ₀/ρ · û`: converts `ρ`-scaled data to `ρ₀`-scaled data.
    pub fn rho_to_rho0(&self, uhat: &[f64]) -> PointField {
        PointField::from(uhat.iter().zip(&self.ratio0).map(|(u, r)| u * r).collect::<Vec<_>>())
    }

    /// `L*_A` of local basis function `loc` at local point `q`.
    #[inline]
    fn lstar(&self, loc: usize, q: usize, a: f64) -> f64 {
        let t = self.grid.tables();
        -t.dt[loc][q] - t.dxx[loc][q] + a * t.val[loc][q]
    }

    /// Scaled weak functional
    /// `F_i = e^{d_i}[∫ρ⁻¹ lstar_data · L*_A q_i + Σ ∫ w⁻¹ mass_data · q_i]`,
    /// i.e. each input is paired with `q_i` through its own weight.
    pub fn functional(&self, a: Option<&[f64]>, lstar_data: Option<&[f64]>, mass: &[(&[f64], Scale, bool)]) -> Vec<f64> {
        self.functional_impl(a, lstar_data, mass, false)
    }

    /// Root-sum-square of the individual quadrature terms of [`Self::functional`],
    /// the statistical scale of its round-off.
    pub fn functional_rss(&self, a: Option<&[f64]>, lstar_data: Option<&[f64]>, mass: &[(&[f64], Scale, bool)]) -> Vec<f64> {
        self.functional_impl(a, lstar_data, mass, true)
    }

    fn functional_impl(&self, a: Option<&[f64]>, lstar_data: Option<&[f64]>, mass: &[(&[f64], Scale, bool)], abs: bool) -> Vec<f64> {
        let f = |v: f64| if abs { v * v } else { v };
        let g = &self.grid;
        let npc = g.points_per_cell();
        let cw = g.cell_weights();
        let tb = g.tables();
        let pl = self.space.per_level;
        let parts = par::map_range(g.nt, |jt| {
            let mut loc_acc = vec![0.0; 2 * pl];
            for ix in 0..g.nx {
                let dofs = self.space.element_dofs(ix, jt);
                let base = g.cell_start(ix, jt);
                let eo = self.elem_offset(ix, jt);
                for (loc, dof) in dofs.iter().enumerate() {
                    let Some(d) = dof else { continue };
                    let mut acc = 0.0;
                    for q in 0..npc {
                        let p = base + q;
                        let o = eo + loc * npc + q;
                        if let Some(ld) = lstar_data {
                            let av = a.map_or(0.0, |a| a[p]);
                            acc += f(cw[q] * self.er[o] * ld[p] * self.lstar(loc, q, av));
                        }
                        for (data, sc, control_only) in mass {
                            if *control_only && !g.in_control(ix) {
                                continue;
                            }
                            let e = match sc {
                                Scale::Rho => self.er[o],
                                Scale::Rho0 => self.er0[o],
                            };
                            acc += f(cw[q] * e * data[p] * tb.val[loc][q]);
                        }
                    }
                    loc_acc[*d - jt * pl] += acc;
                }
            }
            loc_acc
        });
        let mut out = vec![0.0; self.space.n];
        for (jt, part) in parts.iter().enumerate() {
            for (k, v) in part.iter().enumerate() {
                out[jt * pl + k] += v;
            }
        }
        if abs {
            out.iter_mut().for_each(|v| *v = v.sqrt());
        }
        out
    }

    /// Scaled initial-data functional `e^{d_i}∫z₀ q_i(·,0)` with `z₀` given
    /// at the spatial Gauss points.
    pub fn initial_functional(&self, z0: &[f64]) -> Result<Vec<f64>, LinearControlError> {
        let g = &self.grid;
        let nq = g.nq();
        let mut out = vec![0.0; self.space.n];
        for ix in 0..g.nx {
            let dofs = self.space.element_dofs(ix, 0);
            for (loc, dof) in dofs.iter().enumerate().take(4) {
                let Some(d) = dof else { continue };
                let e = self.scale[*d];
                if e > 700.0 {
                    return Err(LinearControlError::InitialScale(e));
                }
                let mut acc = 0.0;
                for q in 0..nq {
                    let hv = crate::grid::hermite(g.rule.nodes[q], g.h);
                    acc += g.rule.weights[q] * g.h * z0[ix * nq + q] * hv[loc];
                }
                out[*d] += e.exp() * acc;
            }
        }
        Ok(out)
    }

    /// `ẑ = Σ p̂_a e^{d_a − log ρ} L*_A q_a` and, when `with_control`,
    /// `v̂ = −κ Σ p̂_a e^{d_a − log ρ₀} q_a` on `q_T` (exact zeros elsewhere).
    pub fn reconstruct_fields(&self, a: Option<&[f64]>, p_hat: &[f64]) -> (PointField, PointField) {
        let g = &self.grid;
        let npc = g.points_per_cell();
        let tb = g.tables();
        let kappa = self.kappa();
        let parts = par::map_range(g.nt, |jt| {
            let mut z = vec![0.0; g.points_per_slab()];
            let mut v = vec![0.0; g.points_per_slab()];
            for ix in 0..g.nx {
                let dofs = self.space.element_dofs(ix, jt);
                let base = g.cell_start(ix, jt);
                let eo = self.elem_offset(ix, jt);
                let ctrl = g.in_control(ix);
                for (loc, dof) in dofs.iter().enumerate() {
                    let Some(d) = dof else { continue };
                    let c = p_hat[*d];
                    if c == 0.0 {
                        continue;
                    }
                    for q in 0..npc {
                        let o = eo + loc * npc + q;
                        let av = a.map_or(0.0, |a| a[base + q]);
                        z[ix * npc + q] += c * self.er[o] * self.lstar(loc, q, av);
                        if ctrl {
                            v[ix * npc + q] -= kappa * c * self.er0[o] * tb.val[loc][q];
                        }
                    }
                }
            }
            (z, v)
        });
        let mut z = Vec::with_capacity(g.n_points());
        let mut v = Vec::with_capacity(g.n_points());
        for (a, b) in parts {
            z.extend(a);
            v.extend(b);
        }
        (PointField::from(z), PointField::from(v))
    }

    /// Scaled adjoint matrix `â_ij = e^{d_i+d_j} a(q_i, q_j)`.
    pub fn assemble_matrix(&self, a: Option<&[f64]>) -> BandedSpd {
        self.assemble_generic(a, true, self.kappa(), false)
    }

    /// Scaled weighted Gram matrix `Ĝ_ij = e^{d_i+d_j}∫ρ₀⁻² q_i q_j` over `Q_T`.
    pub fn assemble_gram(&self) -> BandedSpd {
        self.assemble_generic(None, false, 1.0, true)
    }

    fn assemble_generic(&self, a: Option<&[f64]>, with_lstar: bool, mass_coef: f64, mass_everywhere: bool) -> BandedSpd {
        let g = &self.grid;
        let npc = g.points_per_cell();
        let cw = g.cell_weights();
        let tb = g.tables();
        let locals = par::map_range(g.nt, |jt| {
            let mut mats = Vec::with_capacity(g.nx);
            let mut lh = vec![0.0; 8 * npc];
            let mut vh = vec![0.0; 8 * npc];
            for ix in 0..g.nx {
                let dofs = self.space.element_dofs(ix, jt);
                let base = g.cell_start(ix, jt);
                let eo = self.elem_offset(ix, jt);
                let with_mass = mass_everywhere || g.in_control(ix);
                for loc in 0..8 {
                    for q in 0..npc {
                        let o = eo + loc * npc + q;
                        if dofs[loc].is_none() {
                            lh[loc * npc + q] = 0.0;
                            vh[loc * npc + q] = 0.0;
                            continue;
                        }
                        let av = a.map_or(0.0, |a| a[base + q]);
                        lh[loc * npc + q] = if with_lstar { self.er[o] * self.lstar(loc, q, av) } else { 0.0 };
                        vh[loc * npc + q] = if with_mass { self.er0[o] * tb.val[loc][q] } else { 0.0 };
                    }
                }
                let mut m = [0.0; 64];
                for r in 0..8 {
                    for c in 0..=r {
                        let mut acc = 0.0;
                        for q in 0..npc {
                            acc += cw[q]
                                * (lh[r * npc + q] * lh[c * npc + q] + mass_coef * vh[r * npc + q] * vh[c * npc + q]);
                        }
                        m[r * 8 + c] = acc;
                    }
                }
                mats.push((dofs, m));
            }
            mats
        });
        let mut out = BandedSpd::zeros(self.space.n, self.space.kd);
        for slab in locals {
            for (dofs, m) in slab {
                for r in 0..8 {
                    let Some(i) = dofs[r] else { continue };
                    for c in 0..=r {
                        let Some(j) = dofs[c] else { continue };
                        if i == j && r != c {
                            continue;
                        }
                        out.add(i, j, m[r * 8 + c]);
                    }
                }
            }
        }
        out
    }

    /// Unweighted `L²` mass matrix of the space.
    pub fn assemble_mass(&self) -> BandedSpd {
        let g = &self.grid;
        let npc = g.points_per_cell();
        let cw = g.cell_weights();
        let tb = g.tables();
        let mut out = BandedSpd::zeros(self.space.n, self.space.kd);
        for jt in 0..g.nt {
            for ix in 0..g.nx {
                let dofs = self.space.element_dofs(ix, jt);
                for r in 0..8 {
                    let Some(i) = dofs[r] else { continue };
                    for c in 0..=r {
                        let Some(j) = dofs[c] else { continue };
                        let v: f64 = (0..npc).map(|q| cw[q] * tb.val[r][q] * tb.val[c][q]).sum();
                        out.add(i, j, v);
                    }
                }
            }
        }
        out
    }

    /// `L²` projection of physical point data onto the Dirichlet space.
    /// Returns the projected field and the relative `L²` projection error.
    pub fn project(&self, u: &[f64]) -> Result<(Field, f64), LinearControlError> {
        let g = &self.grid;
        let npc = g.points_per_cell();
        let cw = g.cell_weights();
        let tb = g.tables();
        let mut rhs = vec![0.0; self.space.n];
        for jt in 0..g.nt {
            for ix in 0..g.nx {
                let dofs = self.space.element_dofs(ix, jt);
                let base = g.cell_start(ix, jt);
                for (loc, dof) in dofs.iter().enumerate() {
                    let Some(d) = dof else { continue };
                    rhs[*d] += (0..npc).map(|q| cw[q] * u[base + q] * tb.val[loc][q]).sum::<f64>();
                }
            }
        }
        let m = self.assemble_mass();
        let (c, _) = linalg::solve_spd(&m, &rhs, 1e-13)?;
        let f = self.space.to_field(&c);
        let fv = f.evaluate(g).value;
        let diff: Vec<f64> = fv.iter().zip(u).map(|(a, b)| a - b).collect();
        let dn = crate::grid::weighted_l2_norm(g, &diff, None, crate::grid::Region::Full);
        let un = crate::grid::weighted_l2_norm(g, u, None, crate::grid::Region::Full);
        Ok((f, if un > 0.0 { dn / un } else { 0.0 }))
    }

    /// `Σ w û v̂` over `Q_T` (or `q_T`).
    pub fn inner(&self, u: &[f64], v: &[f64], control_only: bool) -> f64 {
        let g = &self.grid;
        let npc = g.points_per_cell();
        let cw = g.cell_weights();
        let parts = par::map_range(g.nt, |jt| {
            let mut acc = 0.0;
            for ix in 0..g.nx {
                if control_only && !g.in_control(ix) {
                    continue;
                }
                let base = g.cell_start(ix, jt);
                for q in 0..npc {
                    acc += cw[q] * u[base + q] * v[base + q];
                }
            }
            acc
        });
        parts.iter().sum()
    }

    pub fn norm(&self, u: &[f64], control_only: bool) -> f64 {
        self.inner(u, u, control_only).sqrt()
    }
}

/// Factored, Jacobi-balanced adjoint operator.
#[derive(Debug, Clone)]
pub struct AdjointOperator {
    pub matrix: BandedSpd,
    balanced: BandedSpd,
    jacobi: Vec<f64>,
    chol: Option<BandCholesky>,
    pub pivot_ratio: f64,
}

impl AdjointOperator {
    pub fn new(matrix: BandedSpd) -> Result<Self, LinearControlError> {
        if !matrix.is_finite() {
            return Err(LinalgError::NonFinite.into());
        }
        let jacobi: Vec<f64> = matrix.diagonal().iter().map(|d| if *d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }).collect();
        let mut balanced = matrix.clone();
        balanced.scale_symmetric(&jacobi);
        let chol = balanced.cholesky().ok();
        let pivot_ratio = chol.as_ref().map_or(0.0, |c| c.pivot_ratio());
        Ok(Self { matrix, balanced, jacobi, chol, pivot_ratio })
    }

    /// Solves `Â x = b` to relative residual `tol` (in balanced variables).
    pub fn solve(&self, b: &[f64], tol: f64) -> Result<(Vec<f64>, SolveInfo), LinearControlError> {
        let bb: Vec<f64> = b.iter().zip(&self.jacobi).map(|(u, d)| u * d).collect();
        let (y, info) = match &self.chol {
            Some(c) => refine(&self.balanced, c, &bb, tol),
            None => linalg::solve_spd(&self.balanced, &bb, tol)?,
        };
        if info.residual > tol.max(1e-6) {
            return Err(LinearControlError::Inaccurate(info.residual));
        }
        Ok((y.iter().zip(&self.jacobi).map(|(u, d)| u * d).collect(), info))
    }
}

impl AdjointOperator {
    /// Refines until the residual stops decreasing. Falls back to
    /// [`AdjointOperator::solve`] when that leaves a relative residual above
    /// `accept` or there is no factorization.
    pub fn solve_tight(&self, b: &[f64], accept: f64) -> Result<(Vec<f64>, SolveInfo), LinearControlError> {
        let Some(c) = &self.chol else { return self.solve(b, accept) };
        let bb: Vec<f64> = b.iter().zip(&self.jacobi).map(|(u, d)| u * d).collect();
        let (y, info) = refine_inner(&self.balanced, c, &bb, 0.0);
        if info.residual > accept {
            return self.solve(b, accept);
        }
        Ok((y.iter().zip(&self.jacobi).map(|(u, d)| u * d).collect(), info))
    }
}

fn refine_inner(a: &BandedSpd, c: &BandCholesky, b: &[f64], tol: f64) -> (Vec<f64>, SolveInfo) {
    let bn = linalg::norm2(b);
    if bn == 0.0 {
        return (vec![0.0; a.n], SolveInfo { residual: 0.0, refinement_steps: 0, cg_iterations: 0, used_fallback: false });
    }
    let mut x = c.solve(b);
    let res = |x: &[f64]| -> Vec<f64> { a.matvec(x).iter().zip(b).map(|(u, v)| v - u).collect() };
    let mut r = res(&x);
    let mut rel = linalg::norm2(&r) / bn;
    let mut steps = 0;
    while rel > tol && steps < 8 {
        let dx = c.solve(&r);
        let cand: Vec<f64> = x.iter().zip(&dx).map(|(u, v)| u + v).collect();
        let r2 = res(&cand);
        let rel2 = linalg::norm2(&r2) / bn;
        steps += 1;
        if rel2 >= rel {
            break;
        }
        x = cand;
        r = r2;
        rel = rel2;
    }
    (x, SolveInfo { residual: rel, refinement_steps: steps, cg_iterations: 0, used_fallback: false })
}

fn refine(a: &BandedSpd, c: &BandCholesky, b: &[f64], tol: f64) -> (Vec<f64>, SolveInfo) {
    let (mut x, mut info) = refine_inner(a, c, b, tol);
    let rel = info.residual;
    if rel > tol {
        if let Ok((x2, it, rel2)) = linalg::pcg(a, b, Some(&x), tol, 4 * a.n) {
            info.cg_iterations = it;
            info.used_fallback = true;
            if rel2 < rel {
                x = x2;
                info.residual = rel2;
            }
        }
    }
    (x, info)
}

/// Data of one weighted linear control problem.
#[derive(Debug, Clone, Default)]
pub struct LinearControlProblem {
    /// Potential `A` at quadrature points (`None`: `A = 0`).
    pub a: Option<PointField>,
    /// `z₀` at the spatial Gauss points.
    pub z0: Option<Vec<f64>>,
    /// `ρ₀B` at quadrature points.
    pub rho0_b: Option<PointField>,
    /// Extra scaled right-hand side, added verbatim.
    pub functional: Option<Vec<f64>>,
}

impl LinearControlProblem {
    pub fn initial(z0: Vec<f64>) -> Self {
        Self { z0: Some(z0), ..Default::default() }
    }

    pub fn a_sup(&self) -> f64 {
        self.a.as_ref().map_or(0.0, |a| a.sup_norm())
    }

    /// Checks `s ≥ max(‖A‖_∞^{2/3}, s₀)`.
    pub fn check_s(&self, ws: &WeightedSpace) -> Result<(), LinearControlError> {
        let required = self.a_sup().powf(2.0 / 3.0).max(ws.weights.params.s0);
        if ws.s() + 1e-12 < required {
            return Err(LinearControlError::NeedLargerS { s: ws.s(), required });
        }
        Ok(())
    }
}

/// Assembled adjoint system in scaled variables.
#[derive(Debug, Clone)]
pub struct PSystem {
    pub matrix: BandedSpd,
    pub rhs: Vec<f64>,
}

pub fn assemble_rhs(ws: &WeightedSpace, pb: &LinearControlProblem) -> Result<Vec<f64>, LinearControlError> {
    let mut rhs = vec![0.0; ws.space.n];
    if let Some(z0) = &pb.z0 {
        let f = ws.initial_functional(z0)?;
        rhs.iter_mut().zip(&f).for_each(|(r, v)| *r += v);
    }
    if let Some(b) = &pb.rho0_b {
        let f = ws.functional(None, None, &[(b, Scale::Rho0, false)]);
        rhs.iter_mut().zip(&f).for_each(|(r, v)| *r += v);
    }
    if let Some(f) = &pb.functional {
        rhs.iter_mut().zip(f).for_each(|(r, v)| *r += v);
    }
    Ok(rhs)
}

pub fn assemble_p_system(ws: &WeightedSpace, pb: &LinearControlProblem) -> Result<PSystem, LinearControlError> {
    pb.check_s(ws)?;
    Ok(PSystem { matrix: ws.assemble_matrix(pb.a.as_deref()), rhs: assemble_rhs(ws, pb)? })
}

/// Adjoint coefficients `p̂` and solver metadata.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub p_hat: Vec<f64>,
    pub info: SolveInfo,
    pub pivot_ratio: f64,
}

pub const ADJOINT_TOL: f64 = 1e-10;

pub fn solve_adjoint(ws: &WeightedSpace, pb: &LinearControlProblem) -> Result<(AdjointSolution, AdjointOperator), LinearControlError> {
    let sys = assemble_p_system(ws, pb)?;
    let op = AdjointOperator::new(sys.matrix)?;
    let (p_hat, info) = op.solve(&sys.rhs, ADJOINT_TOL)?;
    Ok((AdjointSolution { p_hat, info, pivot_ratio: op.pivot_ratio }, op))
}

/// `(ρz, ρ₀v)` with the cost value.
#[derive(Debug, Clone)]
pub struct ControlledSolution {
    /// `ρz` at quadrature points.
    pub z_hat: PointField,
    /// `ρ₀v` at quadrature points, exactly zero outside `q_T`.
    pub v_hat: PointField,
    /// `J = ½‖ρz‖² + (2κ)⁻¹‖ρ₀v‖²`
    pub j_value: f64,
    pub p_hat: Vec<f64>,
}

/// Cost `J(z, v)` from scaled fields.
pub fn cost(ws: &WeightedSpace, z_hat: &[f64], v_hat: &[f64]) -> f64 {
    0.5 * ws.inner(z_hat, z_hat, false) + 0.5 / ws.kappa() * ws.inner(v_hat, v_hat, true)
}

pub fn reconstruct(ws: &WeightedSpace, pb: &LinearControlProblem, p_hat: &[f64]) -> ControlledSolution {
    let (z_hat, v_hat) = ws.reconstruct_fields(pb.a.as_deref(), p_hat);
    let j_value = cost(ws, &z_hat, &v_hat);
    ControlledSolution { z_hat, v_hat, j_value, p_hat: p_hat.to_vec() }
}

/// Monitored (never asserted) constants of the a-priori estimates.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct EstimateMonitor {
    /// `(‖ρz‖ + ‖ρ₀v‖)·s^{3/2} / (‖ρ₀B‖ + e^{cs}‖z₀‖₂)`
    pub energy_ratio: f64,
    /// `‖z‖_∞ e^{3s/2} / ((1+‖A‖_∞)(‖ρ₀B‖ + e^{cs}‖z₀‖₂))`
    pub sup_ratio: f64,
    pub solver_residual: f64,
    pub pivot_ratio: f64,
}

/// assemble → solve → reconstruct, plus the monitored estimate ratios.
pub fn solve_null_control(ws: &WeightedSpace, pb: &LinearControlProblem) -> Result<(ControlledSolution, EstimateMonitor), LinearControlError> {
    let (adj, _) = solve_adjoint(ws, pb)?;
    let sol = reconstruct(ws, pb, &adj.p_hat);
    let s = ws.s();
    let b_norm = pb.rho0_b.as_ref().map_or(0.0, |b| ws.norm(b, false));
    let z0_norm = pb.z0.as_ref().map_or(0.0, |z| {
        let pts = ws.grid.spatial_points();
        pts.iter().zip(z).map(|((_, w), v)| w * v * v).sum::<f64>().sqrt()
    });
    let data = b_norm + (ws.weights.c * s).exp() * z0_norm;
    let zn = ws.norm(&sol.z_hat, false);
    let vn = ws.norm(&sol.v_hat, true);
    let z_sup = ws.unscale(&sol.z_hat, Scale::Rho).sup_norm();
    let mon = EstimateMonitor {
        energy_ratio: if data > 0.0 { (zn + vn) * s.powf(1.5) / data } else { 0.0 },
        sup_ratio: if data > 0.0 { z_sup * (1.5 * s).exp() / ((1.0 + pb.a_sup()) * data) } else { 0.0 },
        solver_residual: adj.info.residual,
        pivot_ratio: adj.pivot_ratio,
    };
    Ok((sol, mon))
}

/// Residual of the transposition identity against the test function
/// `q = Σ c_i e^{d_i} q_i`, relative to the sum of the magnitudes of its terms.
pub fn transposition_residual(ws: &WeightedSpace, pb: &LinearControlProblem, sol: &ControlledSolution, c: &[f64]) -> Result<f64, LinearControlError> {
    let lhs_z = ws.functional(pb.a.as_deref(), Some(&sol.z_hat), &[]);
    let lhs_v = ws.functional(None, None, &[(&sol.v_hat, Scale::Rho0, true)]);
    let rhs = assemble_rhs(ws, pb)?;
    let t1 = linalg::dot(c, &lhs_z);
    let t2 = linalg::dot(c, &lhs_v);
    let t3 = linalg::dot(c, &rhs);
    let scale = t1.abs() + t2.abs() + t3.abs();
    Ok(if scale == 0.0 { 0.0 } else { (t1 - t2 - t3).abs() / scale })
}

/// Outcome of the perturbation test of minimality.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OptimalityReport {
    pub j_value: f64,
    /// `J(z+δz, v+δv) − J(z, v)` per perturbation.
    pub increases: Vec<f64>,
    /// `|∫ρ²zδz + κ⁻¹∫ρ₀²vδv| / J` per perturbation.
    pub first_order: Vec<f64>,
    /// Feasibility residual of each perturbation (relative).
    pub feasibility: Vec<f64>,
    pub all_increase: bool,
}

/// Random feasible perturbation `(δẑ, δv̂)`: a pair satisfying the homogeneous
/// identity, built by projecting random smooth data.
pub fn feasible_perturbation(
    ws: &WeightedSpace,
    a: Option<&[f64]>,
    op: &AdjointOperator,
    rng: &mut impl Rng,
) -> Result<(PointField, PointField), LinearControlError> {
    let g = &ws.grid;
    let mut modes = Vec::new();
    for _ in 0..6 {
        modes.push((rng.gen_range(1..6) as f64, rng.gen_range(0..4) as f64, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)));
    }
    let tf = g.t_final;
    let w1 = g.sample(|x, t| {
        modes.iter().map(|(k, m, c, ph)| c * (k * std::f64::consts::PI * x).sin() * (m * std::f64::consts::PI * t / tf + ph).cos()).sum()
    });
    let w2raw = g.sample(|x, t| modes.iter().map(|(k, m, c, _)| c * (k * x + m * t).cos()).sum());
    let w2 = PointField::from(
        w2raw.iter().enumerate().map(|(i, v)| if g.point_in_control(i) { *v } else { 0.0 }).collect::<Vec<_>>(),
    );
    let rhs_a = ws.functional(a, Some(&w1), &[]);
    let rhs_b = ws.functional(None, None, &[(&w2, Scale::Rho0, true)]);
    let rhs: Vec<f64> = rhs_a.iter().zip(&rhs_b).map(|(u, v)| u - v).collect();
    let (p, _) = op.solve(&rhs, ADJOINT_TOL)?;
    let (zp, vp) = ws.reconstruct_fields(a, &p);
    Ok((w1.axpy(1.0, &zp), w2.axpy(1.0, &vp)))
}

pub fn verify_optimality(
    ws: &WeightedSpace,
    pb: &LinearControlProblem,
    sol: &ControlledSolution,
    count: usize,
    seed: u64,
) -> Result<OptimalityReport, LinearControlError> {
    let op = AdjointOperator::new(ws.assemble_matrix(pb.a.as_deref()))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let j0 = sol.j_value;
    let kinv = 1.0 / ws.kappa();
    let mut rep = OptimalityReport { j_value: j0, increases: vec![], first_order: vec![], feasibility: vec![], all_increase: true };
    for _ in 0..count {
        let (dz, dv) = feasible_perturbation(ws, pb.a.as_deref(), &op, &mut rng)?;
        let zt = sol.z_hat.axpy(-1.0, &dz);
        let vt = sol.v_hat.axpy(-1.0, &dv);
        let inc = cost(ws, &zt, &vt) - j0;
        let fo = ws.inner(&sol.z_hat, &dz, false) + kinv * ws.inner(&sol.v_hat, &dv, true);
        // feasibility: ∫δz L*q − ∫δv q = 0 for all q
        let fz = ws.functional(pb.a.as_deref(), Some(&dz), &[]);
        let fv = ws.functional(None, None, &[(&dv, Scale::Rho0, true)]);
        let num = linalg::norm2(&fz.iter().zip(&fv).map(|(a, b)| a - b).collect::<Vec<_>>());
        let den = linalg::norm2(&fz) + linalg::norm2(&fv);
        rep.feasibility.push(if den > 0.0 { num / den } else { 0.0 });
        rep.first_order.push(if j0 > 0.0 { fo.abs() / j0 } else { fo.abs() });
        rep.all_increase &= inc >= -1e-8 * j0;
        rep.increases.push(inc);
    }
    Ok(rep)
}

/// `‖Πz(·,T)‖₂` of the `L²` projection of physical point data, and the
/// relative projection error.
pub fn terminal_norm(ws: &WeightedSpace, z_phys: &[f64]) -> Result<(f64, f64), LinearControlError> {
    let (f, err) = ws.project(z_phys)?;
    Ok((f.level_l2(&ws.grid, ws.grid.nt), err))
}

/// Spatial Gauss-point samples of `u₀`.
pub fn sample_initial(grid: &SpaceTimeGrid, u0: impl Fn(f64) -> f64) -> Vec<f64> {
    grid.spatial_points().iter().map(|(x, _)| u0(*x)).collect()
}

/// Random test coefficients for identity checks.
pub fn random_coefficients(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Interval};
    use crate::weights::WeightParams;
    use std::f64::consts::PI;

    fn space(nx: usize, s: f64) -> WeightedSpace {
        let g = make_grid(nx, nx, 0.5, Interval::new(0.2, 0.8)).unwrap();
        let w = WeightSet::new(WeightParams::new(s, 0.5), &g).unwrap();
        WeightedSpace::new(&g, &w)
    }

    #[test]
    fn test_space_numbering() {
        let g = make_grid(4, 4, 1.0, Interval::new(0.25, 0.75)).unwrap();
        let ts = TestSpace::new(&g);
        assert_eq!(ts.n, 8 * 5);
        assert_eq!(ts.local(0, 0), None);
        assert_eq!(ts.local(0, 1), Some(0));
        assert_eq!(ts.local(1, 0), Some(1));
        assert_eq!(ts.local(3, 1), Some(6));
        assert_eq!(ts.local(4, 1), Some(7));
        assert_eq!(ts.local(4, 0), None);
        let mut max_gap = 0;
        for jt in 0..4 {
            for ix in 0..4 {
                let d: Vec<usize> = ts.element_dofs(ix, jt).iter().flatten().cloned().collect();
                let gap = d.iter().max().unwrap() - d.iter().min().unwrap();
                max_gap = max_gap.max(gap);
            }
        }
        assert_eq!(max_gap, ts.kd);
        let f = ts.to_field(&(0..ts.n).map(|i| i as f64 + 1.0).collect::<Vec<_>>());
        assert!(f.is_homogeneous_dirichlet());
        assert_eq!(ts.from_field(&f), (0..ts.n).map(|i| i as f64 + 1.0).collect::<Vec<_>>());
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let ws = space(8, 1.0);
        let pb = LinearControlProblem::initial(vec![0.0; 8 * 3]);
        let sys = assemble_p_system(&ws, &pb).unwrap();
        assert!(sys.rhs.iter().all(|v| *v == 0.0));
        let (sol, _) = solve_null_control(&ws, &pb).unwrap();
        assert!(sol.p_hat.iter().all(|v| *v == 0.0));
        assert_eq!(sol.j_value, 0.0);
    }

    #[test]
    fn matrix_is_symmetric_positive_definite() {
        let ws = space(8, 1.0);
        let m = ws.assemble_matrix(None);
        let dense = m.to_dense();
        let mx = m.max_abs();
        for i in 0..m.n {
            for j in 0..m.n {
                assert!((dense[i][j] - dense[j][i]).abs() <= 1e-12 * mx);
            }
        }
        let op = AdjointOperator::new(m).unwrap();
        let (lo, hi) = linalg::eigen_bounds(&op.balanced, 300).unwrap();
        assert!(lo > 0.0 && hi > lo, "{lo} {hi}");
    }

    #[test]
    fn linear_control_identities() {
        let ws = space(16, 1.0);
        let z0 = sample_initial(&ws.grid, |x| (PI * x).sin());
        let pb = LinearControlProblem::initial(z0.clone());
        let (sol, mon) = solve_null_control(&ws, &pb).unwrap();
        assert!(mon.solver_residual <= ADJOINT_TOL);
        assert!(sol.v_hat.iter().enumerate().all(|(i, v)| ws.grid.point_in_control(i) || *v == 0.0));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let c = random_coefficients(ws.space.n, &mut rng);
            let r = transposition_residual(&ws, &pb, &sol, &c).unwrap();
            assert!(r < 1e-8, "transposition residual {r}");
        }
        // a(p,p)/2 = J and Galerkin duality
        let sys = assemble_p_system(&ws, &pb).unwrap();
        let ap = sys.matrix.matvec(&sol.p_hat);
        let app = linalg::dot(&sol.p_hat, &ap);
        let lp = linalg::dot(&sol.p_hat, &sys.rhs);
        assert!((app - lp).abs() <= 1e-9 * app.abs());
        assert!((0.5 * app - sol.j_value).abs() <= 1e-6 * sol.j_value);

        // superposition and scaling
        let z1 = sample_initial(&ws.grid, |x| (2.0 * PI * x).sin() * x);
        let s1 = solve_null_control(&ws, &LinearControlProblem::initial(z1.clone())).unwrap().0;
        let sum: Vec<f64> = z0.iter().zip(&z1).map(|(a, b)| a + b).collect();
        let s2 = solve_null_control(&ws, &LinearControlProblem::initial(sum)).unwrap().0;
        for i in 0..ws.space.n {
            let e = (sol.p_hat[i] + s1.p_hat[i] - s2.p_hat[i]).abs();
            assert!(e <= 1e-9 * (sol.p_hat[i].abs() + s1.p_hat[i].abs() + 1e-300) + 1e-9 * linalg::norm2(&s2.p_hat) / (ws.space.n as f64).sqrt());
        }
    }

    #[test]
    fn optimality_against_feasible_perturbations() {
        let ws = space(12, 1.0);
        let pb = LinearControlProblem::initial(sample_initial(&ws.grid, |x| (PI * x).sin()));
        let (sol, _) = solve_null_control(&ws, &pb).unwrap();
        let rep = verify_optimality(&ws, &pb, &sol, 5, 3).unwrap();
        assert!(rep.all_increase, "{rep:?}");
        assert!(rep.first_order.iter().all(|v| *v < 1e-6), "{rep:?}");
        assert!(rep.feasibility.iter().all(|v| *v < 1e-8), "{rep:?}");
    }

    #[test]
    fn rejects_small_s() {
        let ws = space(8, 1.0);
        let pb = LinearControlProblem { a: Some(PointField::constant(&ws.grid, 27.0)), ..Default::default() };
        assert!(matches!(assemble_p_system(&ws, &pb), Err(LinearControlError::NeedLargerS { .. })));
    }

    #[test]
    fn projection_reproduces_space_members() {
        let ws = space(8, 1.0);
        let f = Field::interpolate(&ws.grid, |x, t| (1.0 + t) * x * (1.0 - x), |x, t| (1.0 + t) * (1.0 - 2.0 * x));
        let vals = f.evaluate(&ws.grid).value;
        let (pf, err) = ws.project(&vals).unwrap();
        assert!(err < 1e-12);
        for (a, b) in pf.dofs.iter().zip(&f.dofs) {
            assert!((a - b).abs() < 1e-11);
        }
    }
}
