//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Every entry point returns a JSON string. The `*_json` functions are the
//! plain-Rust versions, usable and tested natively.

use std::f64::consts::PI;

use nullheat::leastsquares::{self, IterationRecord, LSConfig, Status};
use nullheat::nonlinearity::builtin;
use nullheat::scenario::physical_fields;
use nullheat::{make_grid, Interval, WeightParams, WeightProfile, WeightSet};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const OMEGA: Interval = Interval { a: 0.2, b: 0.8 };
const T_FINAL: f64 = 0.5;
/// Samples per axis of the plotted lattice.
const PLOT: usize = 41;

#[derive(Serialize)]
struct Heatmap {
    x: Vec<f64>,
    t: Vec<f64>,
    /// Row-major in `t`.
    values: Vec<Vec<f64>>,
}

fn heatmap(t_max: f64, f: impl Fn(f64, f64) -> f64) -> Heatmap {
    let x: Vec<f64> = (0..PLOT).map(|i| i as f64 / (PLOT - 1) as f64).collect();
    let t: Vec<f64> = (0..PLOT).map(|j| t_max * j as f64 / (PLOT - 1) as f64).collect();
    let values = t.iter().map(|t| x.iter().map(|x| f(*x, *t)).collect()).collect();
    Heatmap { x, t, values }
}

fn profile(name: &str) -> Result<WeightProfile, String> {
    WeightProfile::by_name(name).ok_or_else(|| format!("unknown weight profile {name:?}"))
}

/// `log ρ` on a plotting lattice for one profile and `s`.
pub fn weights_json(profile_name: &str, s: f64, n: usize) -> Result<String, String> {
    let grid = make_grid(n, n, T_FINAL, OMEGA).map_err(|e| e.to_string())?;
    let params = WeightParams { profile: profile(profile_name)?, ..WeightParams::new(s, T_FINAL) };
    let w = WeightSet::new(params, &grid).map_err(|e| e.to_string())?;
    let map = heatmap(w.t_clip, |x, t| w.eval(x, t).log_rho);
    serde_json::to_string(&map).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SolveResult<'a> {
    status: String,
    s_final: f64,
    terminal_ratio: f64,
    trace: &'a [IterationRecord],
    y: Heatmap,
    f: Heatmap,
}

/// Least-squares solve for `u₀ = amplitude·sin(πx)` on an `n×n` grid.
/// `g = "zero"` gives the linear control.
pub fn solve_json(g: &str, amplitude: f64, n: usize) -> Result<String, String> {
    let grid = make_grid(n, n, T_FINAL, OMEGA).map_err(|e| e.to_string())?;
    let spec = builtin(g).map_err(|e| e.to_string())?;
    let u0 = move |x: f64| amplitude * (PI * x).sin();
    let out = leastsquares::solve(&grid, WeightParams::new(1.0, T_FINAL), &spec, &u0, &LSConfig::default()).map_err(|e| e.to_string())?;
    let (y, f) = physical_fields(&out.phase, &out.pair).map_err(|e| e.to_string())?;
    let status = match out.status {
        Status::Converged => "converged",
        Status::Floor => "floor",
        Status::MaxIter => "max_iter",
    };
    let res = SolveResult {
        status: status.into(),
        s_final: out.phase.s(),
        terminal_ratio: out.terminal_norm / out.u0_norm,
        trace: &out.trace,
        y: heatmap(T_FINAL, |x, t| y.eval(&grid, x, t)),
        f: heatmap(T_FINAL, |x, t| f.eval(&grid, x, t)),
    };
    serde_json::to_string(&res).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn weights(profile: &str, s: f64, n: usize) -> Result<String, JsValue> {
    weights_json(profile, s, n).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn solve(g: &str, amplitude: f64, n: usize) -> Result<String, JsValue> {
    solve_json(g, amplitude, n).map_err(|e| JsValue::from_str(&e))
}
