//! Serializable run descriptions, the run orchestrator and its artifacts.
//!
//! A scenario is a TOML file; see the README for the grammar. Every run
//! writes `scenario.lock` (the scenario with all defaults resolved), which is
//! itself a valid scenario and reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use crate::clock::Clock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineConfig, BaselineKind, BaselineStatus};
use crate::diagnostics::{markdown_report, observed_rates, ConvergenceReport, RefinementRow};
use crate::expr::Expr;
use crate::grid::{Field, Interval, SpaceTimeGrid};
use crate::leastsquares::{self, ControlPair, Initializer, IterationRecord, LSConfig, LsError, Phase};
use crate::linear_control::{self, LinearControlProblem, Scale};
use crate::nonlinearity::{NonlinearityError, NonlinearityKind, NonlinearitySpec};
use crate::weights::{WeightParams, WeightProfile, WeightSet};

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

/// Solver name selecting the damped least-squares iteration.
pub const LEASTSQUARES: &str = "leastsquares";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ScenarioError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_)
            | ScenarioError::Read { .. }
            | ScenarioError::Parse { .. }
            | ScenarioError::MissingArtifact(_) => EXIT_CONFIG,
            ScenarioError::Solver(_) | ScenarioError::Io(_) => EXIT_SOLVER,
        }
    }
}

fn config(msg: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Config(msg.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub nt: usize,
    pub t_final: f64,
    /// Control interval `[a, b]`. Required.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<[f64; 2]>,
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
}

fn default_quadrature() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSpec {
    /// `desk` or `steep`.
    pub profile: String,
    pub lambda0: f64,
    pub s0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    /// Defaults to the midpoint of `omega`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xstar: Option<f64>,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self { profile: "desk".into(), lambda0: 1.0, s0: 1.0, t1: None, xstar: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    /// Catalog name such as `loglim(0, 0.5)`, or an expression in `r`.
    pub g: String,
    /// Derivative expression in `r` for expression nonlinearities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gprime: Option<String>,
    /// Hölder exponent for expression nonlinearities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Expression in `x`.
    pub u0: String,
    #[serde(default = "one")]
    pub amplitude: f64,
    /// Amplitude of seeded random sine modes added to `u₀`.
    #[serde(default)]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

fn default_solver() -> String {
    LEASTSQUARES.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// `leastsquares` or a baseline name (`picard_gtilde`, ...).
    #[serde(default = "default_solver")]
    pub solver: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dump_format: DumpFormat,
    pub grid: GridSpec,
    #[serde(default)]
    pub weights: WeightSpec,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub ls: LSConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

/// Everything a run needs, built and checked from a [`Scenario`].
pub struct Resolved {
    pub grid: SpaceTimeGrid,
    pub params: WeightParams,
    pub g: NonlinearitySpec,
    pub u0: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub solver: Option<BaselineKind>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Read { path: path.into(), source })?;
        Self::from_toml(&text).map_err(|e| match e {
            ScenarioError::Parse { source, .. } => ScenarioError::Parse { path: path.into(), source },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse { path: PathBuf::from("<string>"), source: Box::new(e) })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Output directory: `output`, else `runs/<name>`.
    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Fills defaults that depend on other fields, so the lock is explicit.
    pub fn locked(&self) -> Self {
        let mut s = self.clone();
        if s.weights.xstar.is_none() {
            if let Some([a, b]) = s.grid.omega {
                s.weights.xstar = Some(0.5 * (a + b));
            }
        }
        s.output = Some(self.output_dir());
        s
    }

    pub fn resolve(&self) -> Result<Resolved, ScenarioError> {
        let [a, b] = self.grid.omega.ok_or_else(|| config("missing control region grid.omega"))?;
        let grid = SpaceTimeGrid::with_rule(self.grid.nx, self.grid.nt, self.grid.t_final, Interval::new(a, b), self.grid.quadrature)
            .map_err(config)?;
        let profile = WeightProfile::by_name(&self.weights.profile)
            .ok_or_else(|| config(format!("unknown weight profile '{}' (desk, steep)", self.weights.profile)))?;
        let params = WeightParams {
            s: self.weights.s0,
            lambda0: self.weights.lambda0,
            t1: self.weights.t1,
            s0: self.weights.s0,
            xstar: self.weights.xstar.unwrap_or(0.5 * (a + b)),
            profile,
        };
        WeightSet::new(params, &grid).map_err(config)?;
        let g = resolve_g(&self.problem).map_err(config)?;
        let u0 = build_u0(&self.problem, self.seed)?;
        let solver = if self.solver == LEASTSQUARES {
            None
        } else {
            Some(BaselineKind::parse(&self.solver).ok_or_else(|| config(format!("unknown solver '{}'", self.solver)))?)
        };
        if !(self.ls.m >= 1.0) {
            return Err(config(format!("ls.m must be >= 1, got {}", self.ls.m)));
        }
        Ok(Resolved { grid, params, g, u0, solver })
    }
}

const CATALOG: [&str; 5] = ["zero", "linear", "loglim", "saturated_tanh", "lipschitz_sin"];

fn resolve_g(p: &ProblemSpec) -> Result<NonlinearitySpec, NonlinearityError> {
    let kind = if p.gprime.is_some() || p.p.is_some() {
        NonlinearityKind::Expression { g: p.g.clone(), gprime: p.gprime.clone(), p: p.p }
    } else {
        let head = p.g.split('(').next().unwrap_or("").trim();
        match NonlinearityKind::parse(&p.g) {
            Ok(k) => k,
            Err(e) if CATALOG.contains(&head) => return Err(e),
            Err(_) => NonlinearityKind::Expression { g: p.g.clone(), gprime: None, p: None },
        }
    };
    NonlinearitySpec::new(kind)
}

/// `u₀(x) = amplitude·expr(x) + noise·Σ_{m≤8} a_m sin(mπx)/m`, `a_m ~ U(−1,1)`
/// drawn from the seed.
fn build_u0(p: &ProblemSpec, seed: u64) -> Result<Box<dyn Fn(f64) -> f64 + Send + Sync>, ScenarioError> {
    let e = Expr::parse_in(&p.u0, &['x']).map_err(|e| config(format!("u0: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<f64> = (1..=8).map(|m| rng.gen_range(-1.0..1.0) / m as f64).collect();
    let (amp, noise) = (p.amplitude, p.noise);
    Ok(Box::new(move |x| {
        let extra: f64 = if noise != 0.0 {
            modes.iter().enumerate().map(|(m, a)| a * ((m + 1) as f64 * std::f64::consts::PI * x).sin()).sum()
        } else {
            0.0
        };
        amp * e.eval_x(x) + noise * extra
    }))
}

/// Scalars of `summary.json`. Wall time lives in `timing.json` so that the
/// summary is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub method: String,
    pub exit_code: i32,
    /// `converged`, `floor`, `max_iter`, `no_convergence`, `non_finite`,
    /// `diverged` or `stalled`.
    pub outcome: String,
    pub reason: String,
    pub iterations: usize,
    pub e0: f64,
    pub e_final: f64,
    pub s_final: f64,
    pub terminal_norm: f64,
    pub u0_norm: f64,
    pub terminal_ratio: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub least_squares: Option<ConvergenceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_deficits: Option<usize>,
}

/// In-memory result of one scenario execution.
pub struct Executed {
    pub summary: Summary,
    pub trace: Vec<IterationRecord>,
    /// Phase and `(start, end)` pairs when the solver produced an iterate.
    pub fields: Option<(Phase, ControlPair, ControlPair)>,
    pub seconds: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        a
    }
}

/// Runs the solver of a scenario without touching the disk.
pub fn execute(sc: &Scenario) -> Result<Executed, ScenarioError> {
    let r = sc.resolve()?;
    let clock = Clock::start();
    let base = |method: &str| Summary {
        scenario: sc.name.clone(),
        method: method.to_string(),
        exit_code: EXIT_DIVERGED,
        outcome: String::new(),
        reason: String::new(),
        iterations: 0,
        e0: f64::NAN,
        e_final: f64::NAN,
        s_final: f64::NAN,
        terminal_norm: f64::NAN,
        u0_norm: f64::NAN,
        terminal_ratio: f64::NAN,
        seed: sc.seed,
        least_squares: None,
        s_deficits: None,
    };
    let mut ex = match r.solver {
        None => {
            let mut summary = base(LEASTSQUARES);
            match leastsquares::solve(&r.grid, r.params, &r.g, &r.u0, &sc.ls) {
                Ok(out) => {
                    let rep = ConvergenceReport::from_outcome(&out, r.g.p);
                    summary.exit_code = if rep.converged() { EXIT_CONVERGED } else { EXIT_DIVERGED };
                    summary.outcome = to_snake(&format!("{:?}", rep.status));
                    summary.reason = match out.restarts.len() {
                        0 => String::new(),
                        n => format!("{n} restart(s) with larger s"),
                    };
                    summary.iterations = rep.iterations;
                    summary.e0 = rep.e0;
                    summary.e_final = rep.e_final;
                    summary.s_final = rep.s_final;
                    summary.terminal_norm = out.terminal_norm;
                    summary.u0_norm = out.u0_norm;
                    summary.terminal_ratio = ratio(out.terminal_norm, out.u0_norm);
                    summary.least_squares = Some(rep);
                    let start = match sc.ls.initializer {
                        Initializer::Linear => out.phase.initialize_linear(),
                        Initializer::Cutoff => out.phase.initialize_cutoff(&r.u0),
                    }
                    .map_err(|e| ScenarioError::Solver(e.to_string()))?;
                    Executed { summary, trace: out.trace.clone(), fields: Some((out.phase, start, out.pair)), seconds: 0.0 }
                }
                Err(LsError::NoConvergence { reason, trace, .. }) => {
                    summary.outcome = "no_convergence".into();
                    summary.reason = reason;
                    fill_from_trace(&mut summary, &trace);
                    Executed { summary, trace, fields: None, seconds: 0.0 }
                }
                Err(e @ LsError::NonFinite { .. }) => {
                    summary.outcome = "non_finite".into();
                    summary.reason = e.to_string();
                    Executed { summary, trace: vec![], fields: None, seconds: 0.0 }
                }
                Err(e @ (LsError::BadM(_) | LsError::Weights(_))) => return Err(config(e)),
                Err(e) => return Err(ScenarioError::Solver(e.to_string())),
            }
        }
        Some(kind) => {
            let mut summary = base(kind.name());
            let out = baselines::run(kind, &r.grid, r.params, &r.g, &r.u0, &sc.baseline).map_err(|e| match e {
                baselines::BaselineError::Ls(LsError::Weights(w)) => config(w),
                other => ScenarioError::Solver(other.to_string()),
            })?;
            summary.exit_code = if out.status == BaselineStatus::Converged { EXIT_CONVERGED } else { EXIT_DIVERGED };
            summary.outcome = to_snake(&format!("{:?}", out.status));
            summary.reason = out.reason.clone();
            fill_from_trace(&mut summary, &out.trace);
            summary.s_final = out.phase.s();
            summary.terminal_norm = out.terminal_norm;
            summary.u0_norm = out.u0_norm;
            summary.terminal_ratio = ratio(out.terminal_norm, out.u0_norm);
            summary.s_deficits = Some(out.s_deficits);
            let start = out.phase.initialize_linear().map_err(|e| ScenarioError::Solver(e.to_string()))?;
            Executed { summary, trace: out.trace, fields: Some((out.phase, start, out.pair)), seconds: 0.0 }
        }
    };
    ex.seconds = clock.seconds();
    Ok(ex)
}

fn fill_from_trace(summary: &mut Summary, trace: &[IterationRecord]) {
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        summary.e0 = first.e;
        summary.e_final = last.e;
        summary.iterations = last.k;
        summary.s_final = last.s;
    }
}

fn to_snake(s: &str) -> String {
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if c.is_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

/// Outcome of [`run`]: the summary, where it went, and the wall time.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: Summary,
    pub dir: PathBuf,
    pub seconds: f64,
}

/// Executes a scenario and writes its artifacts into `out` (or the
/// scenario's own output directory).
pub fn run(sc: &Scenario, out: Option<&Path>) -> Result<RunReport, ScenarioError> {
    let mut locked = sc.locked();
    if let Some(dir) = out {
        locked.output = Some(dir.to_path_buf());
    }
    let dir = locked.output_dir();
    // config errors surface before anything is written
    locked.resolve()?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("scenario.lock"), locked.to_toml())?;
    let ex = execute(&locked)?;
    write_trace(&dir.join("iterations.csv"), &ex.trace)?;
    write_diagnostics(&dir.join("diagnostics.csv"), &ex.trace)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&ex.summary).map_err(io::Error::other)?)?;
    fs::write(dir.join("timing.json"), serde_json::json!({ "seconds": ex.seconds }).to_string())?;
    if let Some((phase, start, end)) = &ex.fields {
        for (tag, pair) in [("start", start), ("end", end)] {
            let (y, f) = physical_fields(phase, pair)?;
            write_field(&dir, &format!("y_{tag}"), &y, &phase.ws.grid, locked.dump_format)?;
            write_field(&dir, &format!("f_{tag}"), &f, &phase.ws.grid, locked.dump_format)?;
        }
    }
    let title = format!("{} ({})", locked.name, ex.summary.method);
    let md = match &ex.summary.least_squares {
        Some(rep) => markdown_report(&title, rep, &ex.trace),
        None => baseline_report(&title, &ex.summary, &ex.trace),
    };
    fs::write(dir.join("report.md"), md)?;
    Ok(RunReport { summary: ex.summary, dir, seconds: ex.seconds })
}

/// Physical `y` and `f` of a pair, `L²`-projected onto the field space.
pub fn physical_fields(phase: &Phase, pair: &ControlPair) -> Result<(Field, Field), ScenarioError> {
    let solver = |e: linear_control::LinearControlError| ScenarioError::Solver(e.to_string());
    let y = phase.physical(&pair.y_hat);
    let f = phase.ws.unscale(&pair.f_hat, Scale::Rho0);
    let (yf, _) = phase.ws.project(&y).map_err(solver)?;
    let (ff, _) = phase.ws.project(&f).map_err(solver)?;
    Ok((yf, ff))
}

fn write_field(dir: &Path, stem: &str, f: &Field, grid: &SpaceTimeGrid, fmt: DumpFormat) -> io::Result<()> {
    match fmt {
        DumpFormat::Csv => {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{stem}.csv")))?);
            f.write_csv(grid, &mut w)?;
            w.flush()
        }
        DumpFormat::Binary => {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{stem}.bin")))?);
            f.write_binary(grid, &mut w)?;
            w.flush()
        }
    }
}

/// Header `k,E,sqrtE,lambda,y_sup,s,order,c1,seconds`; all phases, in order.
pub fn write_trace(path: &Path, trace: &[IterationRecord]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "k,E,sqrtE,lambda,y_sup,s,order,c1,seconds")?;
    for r in trace {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{},{:e},{:e},{:.6}",
            r.k, r.e, r.sqrt_e, r.lambda, r.y_sup, r.s, r.order, r.c1, r.seconds
        )?;
    }
    w.flush()
}

/// Header `phase,k,drift,norm_ratio,E_floor,E_direct,E_lin,order_valid`.
pub fn write_diagnostics(path: &Path, trace: &[IterationRecord]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "phase,k,drift,norm_ratio,E_floor,E_direct,E_lin,order_valid")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{:e},{:e},{}",
            r.phase, r.k, r.drift, r.norm_ratio, r.e_floor, r.e_direct, r.e_lin, r.order_valid as u8
        )?;
    }
    w.flush()
}

fn baseline_report(title: &str, s: &Summary, trace: &[IterationRecord]) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "# {title}\n");
    let _ = writeln!(m, "| quantity | value |\n|---|---|");
    let _ = writeln!(m, "| outcome | {} |", s.outcome);
    let _ = writeln!(m, "| reason | {} |", s.reason);
    let _ = writeln!(m, "| iterations | {} |", s.iterations);
    let _ = writeln!(m, "| E0 / E final | {:.4e} / {:.4e} |", s.e0, s.e_final);
    let _ = writeln!(m, "| s | {} |", s.s_final);
    let _ = writeln!(m, "| steps with s below the potential | {} |", s.s_deficits.unwrap_or(0));
    let _ = writeln!(m, "| |y(T)| / |u0| | {:.3e} |", s.terminal_ratio);
    let _ = writeln!(m, "\n| k | E | y_sup |\n|---|---|---|");
    for r in trace {
        let _ = writeln!(m, "| {} | {:.4e} | {:.3e} |", r.k, r.e, r.y_sup);
    }
    m
}

/// One row of `comparison.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub scenario: String,
    pub method: String,
    pub outcome: String,
    pub iterations: usize,
    pub sqrt_e_final: f64,
    pub terminal_norm: f64,
    pub terminal_ratio: f64,
    pub seconds: f64,
}

fn read_json(path: &Path) -> Result<serde_json::Value, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|_| ScenarioError::MissingArtifact(path.into()))?;
    serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))
}

/// Merges completed runs into `comparison.csv` and `comparison.md` in `out`.
pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<Vec<CompareRow>, ScenarioError> {
    if dirs.len() < 2 {
        return Err(config(format!("compare needs at least two run directories, got {}", dirs.len())));
    }
    let num = |v: &serde_json::Value, k: &str| v.get(k).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
    let text = |v: &serde_json::Value, k: &str| v.get(k).and_then(|x| x.as_str()).unwrap_or("").to_string();
    let mut rows = Vec::new();
    for d in dirs {
        let s = read_json(&d.join("summary.json"))?;
        let t = read_json(&d.join("timing.json"))?;
        rows.push(CompareRow {
            run: d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()),
            scenario: text(&s, "scenario"),
            method: text(&s, "method"),
            outcome: text(&s, "outcome"),
            iterations: s.get("iterations").and_then(|x| x.as_u64()).unwrap_or(0) as usize,
            sqrt_e_final: num(&s, "e_final").sqrt(),
            terminal_norm: num(&s, "terminal_norm"),
            terminal_ratio: num(&s, "terminal_ratio"),
            seconds: num(&t, "seconds"),
        });
    }
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(fs::File::create(out.join("comparison.csv"))?);
    writeln!(w, "run,scenario,method,outcome,iterations,sqrtE_final,terminal_norm,terminal_ratio,seconds")?;
    let mut md = String::from("| run | method | outcome | iterations | final sqrt(E) | terminal norm | wall time (s) |\n|---|---|---|---|---|---|---|\n");
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{:e},{:e},{:e},{:.3}",
            r.run, r.scenario, r.method, r.outcome, r.iterations, r.sqrt_e_final, r.terminal_norm, r.terminal_ratio, r.seconds
        )?;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.3e} | {:.3e} | {:.2} |",
            r.run, r.method, r.outcome, r.iterations, r.sqrt_e_final, r.terminal_norm, r.seconds
        );
    }
    w.flush()?;
    fs::write(out.join("comparison.md"), md)?;
    Ok(rows)
}

/// Interior sample lattice used to compare solutions across meshes.
fn lattice(t_final: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for j in 0..16 {
        for i in 1..16 {
            pts.push((i as f64 / 16.0, t_final * j as f64 / 16.0));
        }
    }
    pts
}

/// Reruns the scenario on `nx = nt = n` for each level and tabulates the
/// results in `refinement.csv`, `refinement.md` and `refinement.json`.
pub fn refine(sc: &Scenario, levels: &[usize], out: &Path) -> Result<Vec<RefinementRow>, ScenarioError> {
    if levels.len() < 3 {
        return Err(config(format!("refine needs at least three levels, got {}", levels.len())));
    }
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    let scenarios: Vec<Scenario> = levels
        .iter()
        .map(|&n| {
            let mut s = sc.locked();
            s.grid.nx = n;
            s.grid.nt = n;
            s
        })
        .collect();
    for s in &scenarios {
        s.resolve()?;
    }
    let results = crate::par::map_range(scenarios.len(), |i| -> Result<_, ScenarioError> {
        let ex = execute(&scenarios[i])?;
        let Some((phase, _, end)) = &ex.fields else {
            return Err(ScenarioError::Solver(format!("level {} produced no iterate: {}", levels[i], ex.summary.reason)));
        };
        let (y, _) = physical_fields(phase, end)?;
        let samples: Vec<f64> = lattice(sc.grid.t_final).iter().map(|(x, t)| y.eval(&phase.ws.grid, *x, *t)).collect();
        let pb = LinearControlProblem::initial(phase.u0.clone());
        let (_, mon) = linear_control::solve_null_control(&phase.ws, &pb).map_err(|e| ScenarioError::Solver(e.to_string()))?;
        Ok((ex, samples, mon.energy_ratio))
    });
    let results: Vec<_> = results.into_iter().collect::<Result<_, _>>()?;
    let finest = &results.last().expect("at least three levels").1;
    let fmax = finest.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rows: Vec<RefinementRow> = Vec::new();
    for (i, (ex, samples, monitor)) in results.iter().enumerate() {
        let diff = samples.iter().zip(finest).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let e_floor = ex.summary.least_squares.as_ref().map_or(f64::NAN, |r| r.e_floor);
        let terminal_reduction = match rows.last() {
            Some(prev) => ratio(prev.terminal_norm, ex.summary.terminal_norm),
            None => f64::NAN,
        };
        rows.push(RefinementRow {
            nx: levels[i],
            nt: levels[i],
            h: 1.0 / levels[i] as f64,
            iterations: ex.summary.iterations,
            e_final: ex.summary.e_final,
            e_floor,
            terminal_norm: ex.summary.terminal_norm,
            terminal_reduction,
            s_final: ex.summary.s_final,
            monitor: *monitor,
            diff_to_finest: ratio(diff, fmax),
            seconds: ex.seconds,
        });
    }
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(fs::File::create(out.join("refinement.csv"))?);
    writeln!(w, "nx,nt,h,iterations,E_final,E_floor,terminal_norm,terminal_reduction,s_final,monitor,diff_to_finest,seconds")?;
    let mut md = format!("# Refinement: {}\n\n| nx | iterations | E final | terminal norm | reduction | s | monitor | diff to finest |\n|---|---|---|---|---|---|---|---|\n", sc.name);
    for r in &rows {
        writeln!(
            w,
            "{},{},{:e},{},{:e},{:e},{:e},{:e},{},{:e},{:e},{:.3}",
            r.nx, r.nt, r.h, r.iterations, r.e_final, r.e_floor, r.terminal_norm, r.terminal_reduction, r.s_final, r.monitor, r.diff_to_finest, r.seconds
        )?;
        let _ = writeln!(
            md,
            "| {} | {} | {:.3e} | {:.3e} | {:.2} | {} | {:.3e} | {:.3e} |",
            r.nx, r.iterations, r.e_final, r.terminal_norm, r.terminal_reduction, r.s_final, r.monitor, r.diff_to_finest
        );
    }
    w.flush()?;
    let rates = observed_rates(&rows);
    let _ = writeln!(md, "\nobserved rates of the difference to the finest level: {rates:.2?}");
    fs::write(out.join("refinement.md"), md)?;
    fs::write(out.join("refinement.json"), serde_json::to_string_pretty(&rows).map_err(io::Error::other)?)?;
    Ok(rows)
}

/// Writes the weight table of the scenario's grid at `s` (default: the
/// initial `s` of the solver) to `path`.
pub fn weights_dump(sc: &Scenario, s: Option<f64>, path: &Path) -> Result<(), ScenarioError> {
    let r = sc.resolve()?;
    let s = s.unwrap_or(match r.solver {
        None => sc.ls.s_init,
        Some(_) => sc.baseline.s,
    });
    let ws = WeightSet::new(r.params.with_s(s.max(r.params.s0)), &r.grid).map_err(config)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    ws.write_dump(&r.grid, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
[grid]
nx = 8
nt = 8
t_final = 0.5
omega = [0.2, 0.8]
[problem]
g = "zero"
u0 = "sin(pi*x)"
"#;

    #[test]
    fn lock_round_trips() {
        let sc = Scenario::from_toml(BASE).unwrap();
        let locked = sc.locked();
        assert_eq!(locked.weights.xstar, Some(0.5));
        let again = Scenario::from_toml(&locked.to_toml()).unwrap();
        assert_eq!(again, locked);
    }

    #[test]
    fn missing_omega_is_a_config_error() {
        let sc = Scenario::from_toml(&BASE.replace("omega = [0.2, 0.8]\n", "")).unwrap();
        let err = sc.resolve().err().unwrap();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn expression_nonlinearity_and_noise() {
        let text = BASE.replace("g = \"zero\"", "g = \"r^3/(1+r^2)\"\nnoise = 0.1");
        let sc = Scenario::from_toml(&text).unwrap();
        let r = sc.resolve().unwrap();
        assert!((r.g.g(2.0) - 1.6).abs() < 1e-12);
        let again = Scenario::from_toml(&text).unwrap().resolve().unwrap();
        assert_eq!((r.u0)(0.3), (again.u0)(0.3));
        assert!(((r.u0)(0.3) - (0.3 * std::f64::consts::PI).sin()).abs() > 0.0);
    }

    #[test]
    fn unknown_solver_and_bad_catalog_args() {
        let sc = Scenario::from_toml(&BASE.replace("name = \"t\"", "name = \"t\"\nsolver = \"nope\"")).unwrap();
        assert_eq!(sc.resolve().err().unwrap().exit_code(), EXIT_CONFIG);
        let sc = Scenario::from_toml(&BASE.replace("\"zero\"", "\"loglim(1)\"")).unwrap();
        assert_eq!(sc.resolve().err().unwrap().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn snake_case() {
        assert_eq!(to_snake("MaxIter"), "max_iter");
        assert_eq!(to_snake("Converged"), "converged");
    }
}
