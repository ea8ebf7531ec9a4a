//! Acceptance checks, one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines show up in `cargo test` output.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use nullheat::baselines::BaselineStatus;
use nullheat::diagnostics::ConvergenceReport;
use nullheat::leastsquares::{self, Initializer, IterationRecord, LSConfig, LsOutcome, Phase};
use nullheat::linear_control::{self, sample_initial, LinearControlProblem, Scale, WeightedSpace};
use nullheat::nonlinearity::builtin;
use nullheat::scenario::{self, Scenario, EXIT_CONVERGED, EXIT_DIVERGED};
use nullheat::{forward, make_grid, Interval, PointField, SpaceTimeGrid, WeightParams, WeightProfile, WeightSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances
const IDENTITY_TOL: f64 = 1e-12;
const LINEAR_TERMINAL: f64 = 1e-3;
const LINEAR_REFINE_FACTOR: f64 = 3.0;
const TRANSPOSITION_TOL: f64 = 1e-8;
const DERIVATIVE_TOL: f64 = 1e-3;
const GEOMETRIC_RATIO: f64 = 0.9;
const ORDER_MIN: f64 = 1.8;
const ONSET_THRESHOLD: f64 = 1.5;
const K0_SLACK: i64 = 2;
const LAMBDA_TOL: f64 = 0.1;
const CONTRAST_TERMINAL: f64 = 1e-3;
const DRIFT_TOL: f64 = 1e-8;
const REPRO_TOL: f64 = 1e-12;

const OMEGA: Interval = Interval { a: 0.2, b: 0.8 };

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn report(&mut self, n: usize, ok: bool, clock: Instant, detail: String) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("criterion {n:>2}: {tag} ({:.1} s) {detail}", clock.elapsed().as_secs_f64());
        if !ok {
            self.failed.push(n);
        }
    }
}

fn grid(n: usize) -> SpaceTimeGrid {
    make_grid(n, n, 0.5, OMEGA).unwrap()
}

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn weight_identities() -> (bool, String) {
    let g = grid(16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut strict = true;
    for profile in [WeightProfile::DESK, WeightProfile::STEEP] {
        for s in [1.0, 4.0] {
            let w = WeightSet::new(WeightParams { profile, ..WeightParams::new(s, 0.5) }, &g).unwrap();
            for _ in 0..10_000 / 4 {
                let (x, t) = (rng.gen::<f64>(), rng.gen::<f64>() * w.t_clip);
                let p = w.eval(x, t);
                let lx = p.xi.ln();
                worst = worst.max((p.log_rho0 - (p.log_rho - 1.5 * lx)).abs() / p.log_rho.abs());
                worst = worst.max((p.log_rho1 - (p.log_rho - lx)).abs() / p.log_rho.abs());
                strict &= p.log_rho0 > 0.0 && p.log_rho0 <= p.log_rho1 && p.log_rho1 <= p.log_rho;
                strict &= p.log_rho0 >= 1.5 * s && p.phi >= 1.5 * p.xi;
            }
        }
    }
    (worst <= IDENTITY_TOL && strict, format!("max identity error {worst:.2e}, inequalities {}", if strict { "hold" } else { "violated" }))
}

/// Forward-simulated `‖z(T)‖/‖u₀‖` of the linear control on an `n×n` grid.
fn linear_terminal(n: usize) -> (f64, WeightedSpace, LinearControlProblem, linear_control::ControlledSolution) {
    let g = grid(n);
    let ws = WeightedSpace::new(&g, &WeightSet::new(WeightParams::new(1.0, 0.5), &g).unwrap());
    let z0 = sample_initial(&g, |x| (PI * x).sin());
    let pb = LinearControlProblem::initial(z0.clone());
    let (sol, _) = linear_control::solve_null_control(&ws, &pb).unwrap();
    let f = ws.unscale(&sol.v_hat, Scale::Rho0);
    let out = forward::simulate(&g, &builtin("zero").unwrap(), &z0, &f).unwrap();
    (out.terminal_l2 / 0.5f64.sqrt(), ws, pb, sol)
}

fn linear_control_check() -> (bool, String) {
    let (r64, ws, pb, sol) = linear_terminal(64);
    let (r128, ..) = linear_terminal(128);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let worst_tr = (0..10)
        .map(|_| {
            let c = linear_control::random_coefficients(ws.space.n, &mut rng);
            linear_control::transposition_residual(&ws, &pb, &sol, &c).unwrap()
        })
        .fold(0.0f64, f64::max);
    let opt = linear_control::verify_optimality(&ws, &pb, &sol, 10, 9).unwrap();
    let ok = r64 <= LINEAR_TERMINAL && r64 / r128 >= LINEAR_REFINE_FACTOR && worst_tr <= TRANSPOSITION_TOL && opt.all_increase;
    (
        ok,
        format!(
            "|z(T)|/|u0| = {r64:.2e} (64), {r128:.2e} (128), reduction {:.1}x; transposition {worst_tr:.1e}; J increases {}/10",
            r64 / r128,
            opt.increases.iter().filter(|v| **v > 0.0).count()
        ),
    )
}

fn derivative_identity() -> (bool, String) {
    let g = grid(32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for (name, count) in [("loglim(0, 0.5)", 3), ("lipschitz_sin(1)", 2)] {
        let w = WeightSet::new(WeightParams::new(2.5, 0.5), &g).unwrap();
        let ph = Phase::new(&g, &w, &builtin(name).unwrap(), sample_initial(&g, |x| (PI * x).sin())).unwrap();
        let base = ph.initialize_linear().unwrap();
        for _ in 0..count {
            // random smooth perturbation of the state and of the control in ω
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let tf = g.t_final;
            let dy = g.sample(|x, t| (0..4).map(|m| a[m] * ((m + 1) as f64 * PI * x).sin()).sum::<f64>() * t * (tf - t));
            let df = g.sample(|x, t| if OMEGA.contains(x) { (0..4).map(|m| b[m] * ((m + 1) as f64 * PI * x).cos()).sum::<f64>() * (tf - t) } else { 0.0 });
            // perturb in the scaled variables, relative to the linear start
            let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let (ys, fs) = (sup(&base.y_hat), sup(&base.f_hat));
            let y_hat: Vec<f64> = (0..dy.len()).map(|i| base.y_hat[i] + 2.0 * ys * dy[i]).collect();
            let f_hat: Vec<f64> = (0..df.len()).map(|i| base.f_hat[i] + 2.0 * fs * df[i]).collect();
            let pair = ph.pair(PointField::from(y_hat), PointField::from(f_hat), false).unwrap();
            let dir = ph.minimal_pair(&pair).unwrap();
            let dd = ph.directional_derivative(&pair, &dir, 1e-4).unwrap();
            worst = worst.max((dd - 2.0 * pair.e_value).abs() / (2.0 * pair.e_value));
        }
    }
    (worst <= DERIVATIVE_TOL, format!("5 iterates, 2 nonlinearities: max |E'·(Y,F) − 2E|/2E = {worst:.2e}"))
}

fn ls_run(n: usize, g: &str, amp: f64, cfg: LSConfig) -> LsOutcome {
    let grid = grid(n);
    let u0 = move |x: f64| amp * (PI * x).sin();
    leastsquares::solve(&grid, WeightParams::new(1.0, 0.5), &builtin(g).unwrap(), &u0, &cfg).unwrap()
}

/// Within each fixed-`s` phase `E` never increases.
fn monotone(trace: &[IterationRecord]) -> bool {
    trace.windows(2).all(|w| w[0].phase != w[1].phase || w[1].e <= w[0].e)
}

fn main() {
    let mut tally = Tally { failed: vec![] };
    let total = Instant::now();

    let c = Instant::now();
    let (ok, detail) = weight_identities();
    tally.report(1, ok && c.elapsed().as_secs_f64() < 1.0, c, detail);

    let c = Instant::now();
    let (ok, detail) = linear_control_check();
    tally.report(2, ok, c, detail);

    let c = Instant::now();
    let (ok, detail) = derivative_identity();
    tally.report(3, ok, c, detail);

    // runs shared by criteria 4 to 9
    let c = Instant::now();
    let geo1 = ls_run(64, "lipschitz_sin(1)", 2.0, LSConfig::default());
    let geo2 = ls_run(64, "lipschitz_sin(1)", 2.0, LSConfig { s_init: 1.5, ..LSConfig::default() });
    let sup = ls_run(64, "loglim(0, 0.5)", 1.0, LSConfig { initializer: Initializer::Cutoff, ..LSConfig::default() });
    let load = |name: &str| Scenario::load(&scenarios_dir().join(format!("{name}.toml"))).unwrap();
    let picard = scenario::execute(&load("picard_big")).unwrap();
    let big = scenario::execute(&load("ls_big")).unwrap();
    let runs_seconds = c.elapsed().as_secs_f64();

    let c = Instant::now();
    let traces: [&[IterationRecord]; 4] = [&geo1.trace, &geo2.trace, &sup.trace, &big.trace];
    let ok = traces.iter().all(|t| monotone(t));
    tally.report(4, ok, c, format!("{} least-squares runs, E non-increasing within every phase", traces.len()));

    let c = Instant::now();
    let r1 = ConvergenceReport::from_outcome(&geo1, 0.0);
    let r2 = ConvergenceReport::from_outcome(&geo2, 0.0);
    let floor = |o: &LsOutcome| o.e_floor.max(o.tol_e * o.tol_e);
    let ratios: Vec<f64> = geo1
        .final_phase()
        .windows(2)
        .filter(|w| w[1].e > floor(&geo1))
        .map(|w| w[1].sqrt_e / w[0].sqrt_e)
        .collect();
    let max_ratio = ratios.iter().cloned().fold(0.0f64, f64::max);
    let (c1a, c1b) = (r1.c1.map_or(f64::NAN, |f| f.c1), r2.c1.map_or(f64::NAN, |f| f.c1));
    let ok = r1.converged() && r2.converged() && !ratios.is_empty() && max_ratio <= GEOMETRIC_RATIO && c1b < c1a;
    tally.report(5, ok, c, format!("max ratio {max_ratio:.2e} over {} steps; c1 = {c1a:.2e} (s = 1), {c1b:.2e} (s = 1.5)", ratios.len()));

    let c = Instant::now();
    let rep = ConvergenceReport::from_outcome(&sup, 1.0);
    let q = rep.final_order.unwrap_or(f64::NAN);
    let k0_ok = match (rep.k0_predicted, rep.onset_observed) {
        (Some(a), Some(b)) => (a as i64 - b as i64).abs() <= K0_SLACK,
        _ => false,
    };
    let onset_ok = nullheat::diagnostics::observed_onset(&sup.final_phase(), ONSET_THRESHOLD) == rep.onset_observed;
    tally.report(
        6,
        rep.converged() && q >= ORDER_MIN && k0_ok && onset_ok,
        c,
        format!("final valid order {q:.3}; k0 predicted {:?}, observed onset {:?}", rep.k0_predicted, rep.onset_observed),
    );

    let c = Instant::now();
    let lambdas: Vec<f64> = sup.final_phase().iter().filter(|r| r.lambda.is_finite() && r.lambda > 0.0).map(|r| r.lambda).collect();
    let last = &lambdas[lambdas.len().saturating_sub(5)..];
    let ok = !last.is_empty() && last.iter().all(|l| (l - 1.0).abs() <= LAMBDA_TOL);
    tally.report(7, ok, c, format!("last {} step lengths {last:.4?}", last.len()));

    let c = Instant::now();
    let ps = &picard.summary;
    let bs = &big.summary;
    let picard_divergent = ps.exit_code == EXIT_DIVERGED && ps.outcome != "converged";
    let ok = picard_divergent && bs.exit_code == EXIT_CONVERGED && bs.terminal_ratio <= CONTRAST_TERMINAL;
    let _ = BaselineStatus::Stalled;
    tally.report(
        8,
        ok,
        c,
        format!(
            "loglim(0,-1), u0 = 30 sin(pi x): picard_gtilde {} (exit {}), leastsquares {} at s = {:.2} with |y(T)|/|u0| = {:.2e}",
            ps.outcome, ps.exit_code, bs.outcome, bs.s_final, bs.terminal_ratio
        ),
    );

    let c = Instant::now();
    let drift = traces.iter().flat_map(|t| t.iter()).map(|r| r.drift).fold(0.0f64, f64::max);
    let replaced = geo1.replacements + geo2.replacements + sup.replacements;
    tally.report(9, drift <= DRIFT_TOL && replaced == 0, c, format!("max drift {drift:.2e} over every iteration, {replaced} replacements"));

    let c = Instant::now();
    nullheat::par::set_deterministic(true);
    let tmp = tempfile::tempdir().unwrap();
    let mut sc = load("loglim_superlinear");
    sc.grid.nx = 32;
    sc.grid.nt = 32;
    let a = scenario::run(&sc, Some(&tmp.path().join("a"))).unwrap();
    let relock = Scenario::load(&a.dir.join("scenario.lock")).unwrap();
    let b = scenario::run(&relock, Some(&tmp.path().join("b"))).unwrap();
    let read = |d: &PathBuf| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(d.join("summary.json")).unwrap()).unwrap() };
    let (va, vb) = (read(&a.dir), read(&b.dir));
    let mut worst = 0.0f64;
    let mut mismatched = Vec::new();
    compare_json(&va, &vb, "", &mut worst, &mut mismatched);
    tally.report(
        10,
        worst <= REPRO_TOL && mismatched.is_empty(),
        c,
        format!("rerun from scenario.lock: max scalar difference {worst:.1e}{}", if mismatched.is_empty() { String::new() } else { format!(", mismatched {mismatched:?}") }),
    );

    println!("shared solver runs took {runs_seconds:.1} s; total {:.1} s", total.elapsed().as_secs_f64());
    if !tally.failed.is_empty() {
        println!("failed criteria: {:?}", tally.failed);
        std::process::exit(1);
    }
}

/// Relative difference of numeric leaves; other leaves must be equal.
fn compare_json(a: &serde_json::Value, b: &serde_json::Value, path: &str, worst: &mut f64, bad: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, v) in x {
                match y.get(k) {
                    Some(w) => compare_json(v, w, &format!("{path}.{k}"), worst, bad),
                    None => bad.push(format!("{path}.{k}")),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (v, w)) in x.iter().zip(y).enumerate() {
                compare_json(v, w, &format!("{path}[{i}]"), worst, bad);
            }
        }
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            let d = (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
            *worst = worst.max(if x == y { 0.0 } else { d });
        }
        _ if a == b => {}
        _ => bad.push(path.to_string()),
    }
}
