//! Symmetric banded matrices, band Cholesky and Jacobi-preconditioned CG.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix not positive definite: pivot {pivot:e} at column {col}")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("conjugate gradient stalled after {iters} iterations (relative residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("non-finite entry in system")]
    NonFinite,
}

/// Symmetric matrix stored as its lower band, column-major: entry `(i, j)`
/// with `j ≤ i ≤ j + kd` lives at `j * (kd + 1) + (i - j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSpd {
    pub n: usize,
    pub kd: usize,
    ab: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, kd: usize) -> Self {
        Self { n, kd, ab: vec![0.0; n * (kd + 1)] }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(r - c <= self.kd, "entry ({r},{c}) outside band {}", self.kd);
        c * (self.kd + 1) + (r - c)
    }

    /// Adds `v` to `(i, j)` and, implicitly, `(j, i)`. Call once per
    /// unordered pair.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j);
        self.ab[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.kd {
            0.0
        } else {
            self.ab[self.slot(r, c)]
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.ab[i * (self.kd + 1)]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.ab.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.ab.iter().all(|v| v.is_finite())
    }

    /// `A ← D A D`
    pub fn scale_symmetric(&mut self, d: &[f64]) {
        let w = self.kd + 1;
        for j in 0..self.n {
            for off in 0..w.min(self.n - j) {
                self.ab[j * w + off] *= d[j] * d[j + off];
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let w = self.kd + 1;
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let col = &self.ab[j * w..j * w + w.min(self.n - j)];
            y[j] += col[0] * x[j];
            for (off, a) in col.iter().enumerate().skip(1) {
                y[j + off] += a * x[j];
                y[j] += a * x[j + off];
            }
        }
        y
    }

    /// Dense copy, for small oracle computations.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j)).collect()).collect()
    }

    pub fn cholesky(&self) -> Result<BandCholesky, LinalgError> {
        if !self.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let n = self.n;
        let kd = self.kd;
        let w = kd + 1;
        let mut l = self.ab.clone();
        for j in 0..n {
            let d = l[j * w];
            if !(d > 0.0) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { col: j, pivot: d });
            }
            let piv = d.sqrt();
            let len = w.min(n - j);
            l[j * w] = piv;
            for off in 1..len {
                l[j * w + off] /= piv;
            }
            // rank-1 update of the trailing band
            let (head, tail) = l.split_at_mut((j + 1) * w);
            let colj = &head[j * w..j * w + len];
            for a in 1..len {
                let lkj = colj[a];
                if lkj == 0.0 {
                    continue;
                }
                let colk = &mut tail[(a - 1) * w..(a - 1) * w + (len - a)];
                for (b, dst) in colk.iter_mut().enumerate() {
                    *dst -= colj[a + b] * lkj;
                }
            }
        }
        Ok(BandCholesky { n, kd, l })
    }
}

/// Lower band factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    kd: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let w = self.kd + 1;
        let n = self.n;
        let mut x = b.to_vec();
        for j in 0..n {
            let col = &self.l[j * w..j * w + w.min(n - j)];
            x[j] /= col[0];
            let xj = x[j];
            for (off, v) in col.iter().enumerate().skip(1) {
                x[j + off] -= v * xj;
            }
        }
        for j in (0..n).rev() {
            let col = &self.l[j * w..j * w + w.min(n - j)];
            let mut acc = x[j];
            for (off, v) in col.iter().enumerate().skip(1) {
                acc -= v * x[j + off];
            }
            x[j] = acc / col[0];
        }
        x
    }

    /// Smallest pivot ratio, a cheap conditioning indicator.
    pub fn pivot_ratio(&self) -> f64 {
        let w = self.kd + 1;
        let piv: Vec<f64> = (0..self.n).map(|j| self.l[j * w]).collect();
        let mx = piv.iter().cloned().fold(0.0f64, f64::max);
        let mn = piv.iter().cloned().fold(f64::INFINITY, f64::min);
        (mn / mx).powi(2)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a linear solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveInfo {
    /// Relative algebraic residual `‖Ax − b‖ / ‖b‖`.
    pub residual: f64,
    pub refinement_steps: usize,
    pub cg_iterations: usize,
    pub used_fallback: bool,
}

/// Cholesky with iterative refinement; CG with Jacobi preconditioning if the
/// factorization fails or refinement cannot reach `tol`.
pub fn solve_spd(a: &BandedSpd, b: &[f64], tol: f64) -> Result<(Vec<f64>, SolveInfo), LinalgError> {
    let bn = norm2(b);
    if bn == 0.0 {
        let info = SolveInfo { residual: 0.0, refinement_steps: 0, cg_iterations: 0, used_fallback: false };
        return Ok((vec![0.0; a.n], info));
    }
    let chol = match a.cholesky() {
        Ok(c) => Some(c),
        Err(LinalgError::NonFinite) => return Err(LinalgError::NonFinite),
        Err(_) => None,
    };
    if let Some(c) = chol {
        let mut x = c.solve(b);
        let mut res = residual_vec(a, &x, b);
        let mut rel = norm2(&res) / bn;
        let mut steps = 0;
        while rel > tol && steps < 5 {
            let dx = c.solve(&res);
            let cand: Vec<f64> = x.iter().zip(&dx).map(|(u, v)| u + v).collect();
            let r2 = residual_vec(a, &cand, b);
            let rel2 = norm2(&r2) / bn;
            steps += 1;
            if rel2 >= rel {
                break;
            }
            x = cand;
            res = r2;
            rel = rel2;
        }
        if rel <= tol {
            return Ok((x, SolveInfo { residual: rel, refinement_steps: steps, cg_iterations: 0, used_fallback: false }));
        }
        let (x2, it, rel2) = pcg(a, b, Some(&x), tol, 20 * a.n.max(100))?;
        let ok = rel2.min(rel);
        let x = if rel2 < rel { x2 } else { x };
        return Ok((x, SolveInfo { residual: ok, refinement_steps: steps, cg_iterations: it, used_fallback: true }));
    }
    let (x, it, rel) = pcg(a, b, None, tol, 20 * a.n.max(100))?;
    if rel > tol {
        return Err(LinalgError::NoConvergence { iters: it, residual: rel });
    }
    Ok((x, SolveInfo { residual: rel, refinement_steps: 0, cg_iterations: it, used_fallback: true }))
}

fn residual_vec(a: &BandedSpd, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.matvec(x);
    b.iter().zip(&ax).map(|(u, v)| u - v).collect()
}

/// Jacobi-preconditioned conjugate gradient. Returns `(x, iterations, relative residual)`.
pub fn pcg(
    a: &BandedSpd,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, f64), LinalgError> {
    let n = a.n;
    let dinv: Vec<f64> = a.diagonal().iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let bn = norm2(b);
    if bn == 0.0 {
        return Ok((vec![0.0; n], 0, 0.0));
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut r = residual_vec(a, &x, b);
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(u, d)| u * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let rel = norm2(&r) / bn;
        if rel <= tol {
            return Ok((x, it, rel));
        }
        let ap = a.matvec(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { col: it, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = norm2(&residual_vec(a, &x, b)) / bn;
    Ok((x, max_iter, rel))
}

/// Extreme eigenvalue estimates by power and inverse-power iteration.
pub fn eigen_bounds(a: &BandedSpd, iters: usize) -> Result<(f64, f64), LinalgError> {
    let chol = a.cholesky()?;
    let n = a.n;
    let start: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let mut v = start.clone();
    let mut lmax = 0.0;
    for _ in 0..iters {
        let nv = norm2(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let w = a.matvec(&v);
        lmax = dot(&v, &w);
        v = w;
    }
    let mut u = start;
    let mut lmin = 0.0;
    for _ in 0..iters {
        let nu = norm2(&u);
        u.iter_mut().for_each(|x| *x /= nu);
        let w = chol.solve(&u);
        lmin = 1.0 / dot(&u, &w);
        u = w;
    }
    Ok((lmin, lmax))
}
