//! Nonlinearities `g` with `g(0) = 0`: values, derivatives, the quotient
//! `g̃(r) = g(r)/r`, the growth bound `ψ(r) = α + β ln^{3/2}(1+|r|)` and
//! Hölder data `(p, [g′]_p)` of `g′`.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinearityError {
    #[error("unknown nonlinearity '{0}' (expected zero, linear(b), loglim(b,c), saturated_tanh(k), lipschitz_sin(k))")]
    Unknown(String),
    #[error("bad arguments for '{name}': {detail}")]
    BadArgs { name: String, detail: String },
    #[error("expression error: {0}")]
    Expr(#[from] ExprError),
    #[error("g(0) = {0} but the nonlinearity must vanish at 0")]
    NonzeroAtOrigin(f64),
    #[error("Hölder exponent must lie in [0, 1], got {0}")]
    BadExponent(f64),
}

/// Serializable description of `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonlinearityKind {
    Zero,
    Linear { b: f64 },
    /// `g(r) = b r + c r ln^{3/2}(1+|r|)`
    Loglim { b: f64, c: f64 },
    /// `g(r) = κ tanh r`
    SaturatedTanh { kappa: f64 },
    /// `g(r) = κ sin r`
    LipschitzSin { kappa: f64 },
    /// User expression in `r`; `gprime` defaults to a central difference
    /// with step `1e-6·max(1,|r|)`. `p` defaults to 1.
    Expression {
        g: String,
        #[serde(default)]
        gprime: Option<String>,
        #[serde(default)]
        p: Option<f64>,
    },
}

impl NonlinearityKind {
    /// Parses `name` or `name(a, b)` forms of the catalog.
    pub fn parse(text: &str) -> Result<Self, NonlinearityError> {
        let t = text.trim();
        let (name, args) = match t.find('(') {
            Some(i) if t.ends_with(')') => {
                let inner = &t[i + 1..t.len() - 1];
                let args: Result<Vec<f64>, _> = inner
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<f64>())
                    .collect();
                let args = args.map_err(|e| NonlinearityError::BadArgs { name: t[..i].to_string(), detail: e.to_string() })?;
                (t[..i].trim(), args)
            }
            _ => (t, vec![]),
        };
        let want = |n: usize| -> Result<(), NonlinearityError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(NonlinearityError::BadArgs {
                    name: name.to_string(),
                    detail: format!("expected {n} argument(s), got {}", args.len()),
                })
            }
        };
        Ok(match name {
            "zero" => {
                want(0)?;
                Self::Zero
            }
            "linear" => {
                want(1)?;
                Self::Linear { b: args[0] }
            }
            "loglim" => {
                want(2)?;
                Self::Loglim { b: args[0], c: args[1] }
            }
            "saturated_tanh" => {
                want(1)?;
                Self::SaturatedTanh { kappa: args[0] }
            }
            "lipschitz_sin" => {
                want(1)?;
                Self::LipschitzSin { kappa: args[0] }
            }
            _ => return Err(NonlinearityError::Unknown(text.to_string())),
        })
    }
}

/// Catalog lookup by textual name, e.g. `"loglim(0, 0.5)"`.
pub fn builtin(name: &str) -> Result<NonlinearitySpec, NonlinearityError> {
    NonlinearitySpec::new(NonlinearityKind::parse(name)?)
}

/// Growth bound `ψ(r) = α + β ln^{3/2}(1+|r|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthBound {
    pub alpha: f64,
    pub beta: f64,
}

impl GrowthBound {
    pub fn psi(&self, r: f64) -> f64 {
        self.alpha + self.beta * r.abs().ln_1p().powf(1.5)
    }
}

/// A fully resolved nonlinearity.
#[derive(Debug, Clone)]
pub struct NonlinearitySpec {
    pub kind: NonlinearityKind,
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
    /// `[g′]_p`; estimated (a lower bound) for user expressions.
    pub holder_seminorm: f64,
    exprs: Option<(Expr, Option<Expr>)>,
}

const FD_STEP: f64 = 1e-6;
const SMALL_R: f64 = 1e-8;

fn ln32(r: f64) -> f64 {
    r.abs().ln_1p().powf(1.5)
}

/// `sup |h″|` for `h(r) = r ln^{3/2}(1+|r|)`, by dense sampling of the
/// closed form of `h″` on `u = |r| > 0`.
fn loglim_curvature_sup() -> f64 {
    let h2 = |u: f64| {
        let l = u.ln_1p();
        let sl = l.sqrt();
        let q = 1.0 + u;
        1.5 * sl / q + 1.5 * sl / (q * q) + 0.75 * u / (sl * q * q)
    };
    (0..=20_000)
        .map(|k| 10f64.powf(-8.0 + 16.0 * k as f64 / 20_000.0))
        .map(h2)
        .fold(0.0, f64::max)
}

impl NonlinearitySpec {
    pub fn new(kind: NonlinearityKind) -> Result<Self, NonlinearityError> {
        let mut spec = match &kind {
            NonlinearityKind::Zero => Self::raw(kind.clone(), "zero".into(), 0.0, 0.0, 1.0, 0.0),
            NonlinearityKind::Linear { b } => Self::raw(kind.clone(), format!("linear({b})"), b.abs(), 0.0, 1.0, 0.0),
            NonlinearityKind::Loglim { b, c } => Self::raw(
                kind.clone(),
                format!("loglim({b},{c})"),
                b.abs(),
                2.5 * c.abs(),
                1.0,
                c.abs() * loglim_curvature_sup(),
            ),
            NonlinearityKind::SaturatedTanh { kappa } => Self::raw(
                kind.clone(),
                format!("saturated_tanh({kappa})"),
                kappa.abs(),
                0.0,
                1.0,
                kappa.abs() * 4.0 / (3.0 * 3f64.sqrt()),
            ),
            NonlinearityKind::LipschitzSin { kappa } => Self::raw(
                kind.clone(),
                format!("lipschitz_sin({kappa})"),
                kappa.abs(),
                0.0,
                0.0,
                2.0 * kappa.abs(),
            ),
            NonlinearityKind::Expression { g, gprime, p } => {
                let ge = Expr::parse_in(g, &['r'])?;
                let gp = gprime.as_deref().map(|s| Expr::parse_in(s, &['r'])).transpose()?;
                let p = p.unwrap_or(1.0);
                if !(0.0..=1.0).contains(&p) {
                    return Err(NonlinearityError::BadExponent(p));
                }
                let mut s = Self::raw(kind.clone(), g.clone(), 0.0, 0.0, p, 0.0);
                s.exprs = Some((ge, gp));
                let g0 = s.g(0.0);
                if g0 != 0.0 {
                    return Err(NonlinearityError::NonzeroAtOrigin(g0));
                }
                s
            }
        };
        if spec.exprs.is_some() {
            spec.alpha = spec.gprime(0.0).abs();
            let mut beta: f64 = 0.0;
            for k in 1..=400 {
                let r = 10f64.powf(-6.0 + 12.0 * k as f64 / 400.0);
                for r in [r, -r] {
                    let excess = spec.gprime(r).abs() - spec.alpha;
                    if excess > 0.0 {
                        beta = beta.max(excess / ln32(r));
                    }
                }
            }
            spec.beta = beta;
            spec.holder_seminorm = if spec.p == 0.0 {
                let sup = (0..=2000)
                    .map(|k| spec.gprime(-1e3 + k as f64).abs())
                    .fold(0.0, f64::max);
                2.0 * sup
            } else {
                estimate_holder(&spec, spec.p, 1e3)
            };
        }
        Ok(spec)
    }

    fn raw(kind: NonlinearityKind, name: String, alpha: f64, beta: f64, p: f64, h: f64) -> Self {
        Self { kind, name, alpha, beta, p, holder_seminorm: h, exprs: None }
    }

    pub fn growth(&self) -> GrowthBound {
        GrowthBound { alpha: self.alpha, beta: self.beta }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, NonlinearityKind::Zero)
    }

    /// True when `g` is affine, so the linearization remainder vanishes.
    pub fn is_linear(&self) -> bool {
        matches!(self.kind, NonlinearityKind::Zero | NonlinearityKind::Linear { .. })
    }

    pub fn g(&self, r: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { b } => b * r,
            NonlinearityKind::Loglim { b, c } => b * r + c * r * ln32(r),
            NonlinearityKind::SaturatedTanh { kappa } => kappa * r.tanh(),
            NonlinearityKind::LipschitzSin { kappa } => kappa * r.sin(),
            NonlinearityKind::Expression { .. } => self.exprs.as_ref().unwrap().0.eval_r(r),
        }
    }

    pub fn gprime(&self, r: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { b } => *b,
            NonlinearityKind::Loglim { b, c } => {
                let u = r.abs();
                let l = u.ln_1p();
                b + c * (l.powf(1.5) + 1.5 * u * l.sqrt() / (1.0 + u))
            }
            NonlinearityKind::SaturatedTanh { kappa } => {
                let c = r.cosh();
                if c.is_finite() {
                    kappa / (c * c)
                } else {
                    0.0
                }
            }
            NonlinearityKind::LipschitzSin { kappa } => kappa * r.cos(),
            NonlinearityKind::Expression { .. } => {
                let (g, gp) = self.exprs.as_ref().unwrap();
                match gp {
                    Some(e) => e.eval_r(r),
                    None => {
                        let h = FD_STEP * r.abs().max(1.0);
                        (g.eval_r(r + h) - g.eval_r(r - h)) / (2.0 * h)
                    }
                }
            }
        }
    }

    /// `g(r)/r`, continuous at 0 with value `g′(0)`.
    pub fn gtilde(&self, r: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { b } => *b,
            NonlinearityKind::Loglim { b, c } => b + c * ln32(r),
            _ => {
                if r.abs() < SMALL_R {
                    // g(r)/r = ∫₀¹ g′(τr)dτ ≈ g′(r/2), second-order accurate
                    self.gprime(0.5 * r)
                } else {
                    self.g(r) / r
                }
            }
        }
    }

    /// `ℓ(y, w) = g(y + w) − g(y) − g′(y)w`. Small steps use
    /// `w∫₀¹(g′(y+τw) − g′(y))dτ`, which keeps relative accuracy where the
    /// direct difference cancels.
    pub fn remainder(&self, y: f64, w: f64) -> f64 {
        if self.is_linear() || w == 0.0 {
            return 0.0;
        }
        if w.abs() > 1e-3 * (1.0 + y.abs()) {
            return self.g(y + w) - self.g(y) - self.gprime(y) * w;
        }
        // 4-point Gauss-Legendre on [0, 1]
        const NODES: [f64; 4] = [0.069_431_844_202_973_71, 0.330_009_478_207_571_9, 0.669_990_521_792_428_1, 0.930_568_155_797_026_3];
        const WEIGHTS: [f64; 4] = [0.173_927_422_568_726_9, 0.326_072_577_431_273_1, 0.326_072_577_431_273_1, 0.173_927_422_568_726_9];
        let gp = self.gprime(y);
        w * NODES.iter().zip(WEIGHTS).map(|(t, c)| c * (self.gprime(y + t * w) - gp)).sum::<f64>()
    }
}

/// Empirical `sup |g′(a) − g′(b)| / |a − b|^p` over stratified random pairs
/// in `[-R, R]`: pair centres and separations are both log-stratified. A
/// lower bound on the true seminorm.
pub fn estimate_holder(spec: &NonlinearitySpec, p: f64, range: f64) -> f64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let top = range.log10();
    let mut best: f64 = 0.0;
    let n = 20_000;
    for k in 0..n {
        let c_exp = -3.0 + (top + 3.0) * (k as f64 + rng.gen::<f64>()) / n as f64;
        let centre = 10f64.powf(c_exp) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let centre = if k % 4 == 0 { rng.gen_range(-range..range) } else { centre };
        let sep = 10f64.powf(rng.gen_range(-4.0..(2.0 * range).log10()));
        let a = (centre - 0.5 * sep).clamp(-range, range);
        let b = (centre + 0.5 * sep).clamp(-range, range);
        if a == b {
            continue;
        }
        let q = (spec.gprime(a) - spec.gprime(b)).abs() / (a - b).abs().powf(p);
        if q.is_finite() {
            best = best.max(q);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expr(g: &str, gp: Option<&str>) -> NonlinearitySpec {
        NonlinearitySpec::new(NonlinearityKind::Expression { g: g.into(), gprime: gp.map(Into::into), p: None }).unwrap()
    }

    #[test]
    fn catalog_examples() {
        let z = builtin("zero").unwrap();
        assert_eq!((z.g(3.0), z.alpha, z.beta, z.growth().psi(10.0)), (0.0, 0.0, 0.0, 0.0));

        let s = builtin("lipschitz_sin(3)").unwrap();
        assert_eq!((s.p, s.holder_seminorm, s.alpha, s.beta), (0.0, 6.0, 3.0, 0.0));

        let l = builtin("loglim(0, 2)").unwrap();
        assert_eq!(l.gprime(0.0), 0.0);
        for e in 2..=8 {
            let r = 10f64.powi(e);
            let ratio = l.gprime(r) / ln32(r) / 2.0;
            // the correction term decays like 1/ln r
            assert!((ratio - 1.0).abs() < 1.6 / r.ln_1p(), "r = {r}: {ratio}");
        }
        assert!(matches!(builtin("cubic"), Err(NonlinearityError::Unknown(_))));
        assert!(matches!(builtin("loglim(1)"), Err(NonlinearityError::BadArgs { .. })));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for name in ["linear(2)", "loglim(0.5,0.7)", "saturated_tanh(2)", "lipschitz_sin(1.5)"] {
            let s = builtin(name).unwrap();
            for &r in &[-30.0f64, -1.3, -0.01, 0.2, 4.0, 1e3] {
                let h = 1e-6 * f64::max(1.0, r.abs());
                let fd = (s.g(r + h) - s.g(r - h)) / (2.0 * h);
                assert!((fd - s.gprime(r)).abs() < 1e-5 * (1.0 + fd.abs()), "{name} at {r}");
            }
        }
    }

    #[test]
    fn growth_bound_holds_on_log_grid() {
        for name in ["linear(-2)", "loglim(0.5,0.7)", "loglim(0,-1)", "saturated_tanh(2)", "lipschitz_sin(1.5)"] {
            let s = builtin(name).unwrap();
            let psi = s.growth();
            for k in 0..=1200 {
                let r = 10f64.powf(-6.0 + 12.0 * k as f64 / 1200.0);
                for r in [r, -r] {
                    assert!(s.gprime(r).abs() <= psi.psi(r) * (1.0 + 1e-12), "{name} at {r}");
                }
            }
        }
    }

    #[test]
    fn holder_bounds_hold_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for name in ["loglim(0.5,0.7)", "saturated_tanh(2)", "lipschitz_sin(1.5)"] {
            let s = builtin(name).unwrap();
            for _ in 0..10_000 {
                let a: f64 = rng.gen_range(-50.0..50.0);
                let b: f64 = rng.gen_range(-50.0..50.0);
                let lhs = (s.gprime(a) - s.gprime(b)).abs();
                let rhs = s.holder_seminorm * (a - b).abs().powf(s.p);
                assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-14, "{name}: {a} {b}");
            }
        }
    }

    #[test]
    fn gtilde_continuous_at_zero() {
        for name in ["loglim(0.5,0.7)", "saturated_tanh(2)", "lipschitz_sin(1.5)"] {
            let s = builtin(name).unwrap();
            let g0 = s.gprime(0.0);
            for e in 1..=12 {
                let r = 10f64.powi(-e);
                assert!((s.gtilde(r) - g0).abs() < 10.0 * r.sqrt(), "{name} r={r}");
                assert!(s.gtilde(-r).is_finite());
            }
            assert_eq!(s.gtilde(0.0), g0);
        }
        let e = expr("sin(r)", None);
        assert!((e.gtilde(0.0) - 1.0).abs() < 1e-9);
        assert!((e.gtilde(1e-10) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn remainder_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for name in ["loglim(0,0.5)", "saturated_tanh(1)", "lipschitz_sin(1)"] {
            let s = builtin(name).unwrap();
            for _ in 0..5000 {
                let y: f64 = rng.gen_range(-20.0..20.0);
                let w: f64 = rng.gen_range(-5.0..5.0);
                let bound = s.holder_seminorm * w.abs().powf(1.0 + s.p) / (1.0 + s.p);
                assert!(s.remainder(y, w).abs() <= bound * (1.0 + 1e-9) + 1e-12);
            }
        }
        assert_eq!(builtin("linear(3)").unwrap().remainder(1.0, 2.0), 0.0);
    }

    #[test]
    fn holder_estimates() {
        let q = expr("r^2/2", Some("r"));
        assert!((estimate_holder(&q, 1.0, 1e3) - 1.0).abs() < 1e-6);
        let z = builtin("zero").unwrap();
        assert_eq!(estimate_holder(&z, 1.0, 1e3), 0.0);
        let s = builtin("lipschitz_sin(1)").unwrap();
        let e = estimate_holder(&s, 1.0, 1e3);
        assert!((0.99..=1.0 + 1e-12).contains(&e), "{e}");
    }

    #[test]
    fn expression_nonlinearities() {
        let e = expr("2*r + 0.5*r*ln(1+abs(r))^1.5", None);
        let l = builtin("loglim(2,0.5)").unwrap();
        for &r in &[-3.0, 0.5, 40.0] {
            assert!((e.g(r) - l.g(r)).abs() < 1e-12);
            assert!((e.gprime(r) - l.gprime(r)).abs() < 1e-6);
        }
        assert!((e.alpha - 2.0).abs() < 1e-6);
        assert!(matches!(
            NonlinearitySpec::new(NonlinearityKind::Expression { g: "1+r".into(), gprime: None, p: None }),
            Err(NonlinearityError::NonzeroAtOrigin(_))
        ));
        assert!(NonlinearitySpec::new(NonlinearityKind::Expression { g: "x".into(), gprime: None, p: None }).is_err());
    }

    #[test]
    fn kind_round_trips_through_toml() {
        #[derive(Serialize, Deserialize)]
        struct W {
            g: NonlinearityKind,
        }
        let w = W { g: NonlinearityKind::Loglim { b: 0.0, c: 0.5 } };
        let s = toml::to_string(&w).unwrap();
        let back: W = toml::from_str(&s).unwrap();
        assert_eq!(back.g, w.g);
    }
}
