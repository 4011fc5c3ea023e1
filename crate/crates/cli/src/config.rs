//! Run configuration, read from a TOML file with one section per subcommand.
//!
//! Numbers that are naturally fractions (`t_final`, step sizes, mesh widths,
//! scales) are written as strings and go through the expression evaluator, so
//! `dt = "1/6"` is accepted.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mstmax_core::fields::{Coefficient, ScalarFn, SeparableField, SeparableTerm};
use mstmax_core::problems::{example, ExactSolution, Problem};
use mstmax_core::tensor::{AssemblyOptions, Mode};
use mstmax_core::timestepper::{SolverKind, SolverSettings};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{constant, Env, Expr, Var};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Syntax(String),
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeChoice {
    Full,
    Sparse,
    Both,
}

impl ModeChoice {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            ModeChoice::Full => vec![Mode::Full],
            ModeChoice::Sparse => vec![Mode::Sparse],
            ModeChoice::Both => vec![Mode::Full, Mode::Sparse],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    /// Default output path; `--out` wins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Write measured wall times into the CSV (the only nondeterministic column).
    #[serde(default = "yes")]
    pub wall_time: bool,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<CellConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrector: Option<CorrectorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// "1", "2" or "custom".
    pub example: String,
    #[serde(default = "one")]
    pub t_final: String,
    /// Custom only: terms `[x-part, y-part]` summed into a(x, y).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub a: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub b: Vec<[String; 2]>,
    /// Load components over x1, x2, t.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g0: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1: Option<[String; 2]>,
    /// Known homogenized coefficients for the cell check; b0 is a multiple of I.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<String>,
}

fn one() -> String {
    "1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// "cg" or "dense".
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_xq")]
    pub x_quadrature_level: u32,
    #[serde(default = "default_yq")]
    pub y_quadrature_level: u32,
}

fn default_tol() -> f64 {
    1e-11
}
fn default_max_iter() -> usize {
    5000
}
fn default_kind() -> String {
    "cg".into()
}
fn default_xq() -> u32 {
    AssemblyOptions::default().x_quadrature_level
}
fn default_yq() -> u32 {
    AssemblyOptions::default().y_quadrature_level
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: default_tol(),
            max_iter: default_max_iter(),
            kind: default_kind(),
            x_quadrature_level: default_xq(),
            y_quadrature_level: default_yq(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    #[serde(default = "sparse")]
    pub mode: ModeChoice,
    /// Explicit `[dt, h]` pairs. Non-dyadic h is rounded to the next finer dyadic level.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<[String; 2]>,
    /// Alternative to `pairs`: levels with `dt = dt_factor * h`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_factor: Option<String>,
    /// Fail (exit 2) unless both error columns decrease and their slope vs h reaches this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_slope: Option<f64>,
    /// Levels at which full and sparse energy projections are compared (mode = both).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub projection_levels: Vec<u32>,
}

fn sparse() -> ModeChoice {
    ModeChoice::Sparse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    /// Cell levels; the last one is checked against `tol`.
    #[serde(default = "cell_levels")]
    pub levels: Vec<u32>,
    /// Samples per direction of the x-grid on [0, 1]^2.
    #[serde(default = "cell_grid")]
    pub grid: usize,
    #[serde(default = "cell_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_order_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_order_b: Option<f64>,
}

fn cell_levels() -> Vec<u32> {
    vec![3, 4, 5, 6]
}
fn cell_grid() -> usize {
    3
}
fn cell_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorConfig {
    #[serde(default = "sparse")]
    pub mode: ModeChoice,
    pub level: u32,
    pub dt: String,
    pub eps: Vec<String>,
    pub fine_level: u32,
    #[serde(default = "max_fine")]
    pub max_fine_level: u32,
    /// Fail (exit 2) unless errors shrink with eps and beat the uncorrected field.
    #[serde(default)]
    pub check: bool,
}

fn max_fine() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub eps: String,
    pub level: u32,
    pub dt: String,
    #[serde(default = "max_fine")]
    pub max_level: u32,
    /// Stop after this many steps (default: up to t_final).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restart: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Config::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.problem.build()?;
        self.t_final()?;
        self.solver.settings()?;
        if !(self.solver.tol > 0.0) {
            return Err(invalid("solver.tol", "must be positive"));
        }
        if let Some(c) = &self.convergence {
            c.schedule(self.t_final()?)?;
            for (i, &l) in c.projection_levels.iter().enumerate() {
                if l > 6 {
                    return Err(invalid(format!("convergence.projection_levels[{i}]"), "at most 6"));
                }
            }
        }
        if let Some(c) = &self.cell {
            if c.levels.is_empty() {
                return Err(invalid("cell.levels", "empty"));
            }
            if c.levels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("cell.levels", "must be strictly ascending"));
            }
            if c.levels.iter().any(|&l| l == 0 || l > 9) {
                return Err(invalid("cell.levels", "levels must lie in 1..=9"));
            }
            if c.grid == 0 {
                return Err(invalid("cell.grid", "must be positive"));
            }
        }
        if let Some(c) = &self.corrector {
            let dt = positive("corrector.dt", &c.dt)?;
            steps_for(self.t_final()?, dt);
            if c.eps.is_empty() {
                return Err(invalid("corrector.eps", "empty"));
            }
            for (i, e) in c.eps.iter().enumerate() {
                let key = format!("corrector.eps[{i}]");
                let v = positive(&key, e)?;
                mstmax_core::reference::dyadic_exponent(v).map_err(|e| invalid(&key, e.to_string()))?;
            }
            if c.fine_level > c.max_fine_level {
                return Err(invalid(
                    "corrector.fine_level",
                    format!("{} exceeds max_fine_level = {}", c.fine_level, c.max_fine_level),
                ));
            }
        }
        if let Some(r) = &self.reference {
            let e = positive("reference.eps", &r.eps)?;
            mstmax_core::reference::dyadic_exponent(e).map_err(|e| invalid("reference.eps", e.to_string()))?;
            positive("reference.dt", &r.dt)?;
            if r.level > r.max_level {
                return Err(invalid("reference.level", format!("{} exceeds max_level = {}", r.level, r.max_level)));
            }
        }
        Ok(())
    }

    pub fn t_final(&self) -> Result<f64, ConfigError> {
        positive("problem.t_final", &self.problem.t_final)
    }

    pub fn assembly(&self) -> AssemblyOptions {
        AssemblyOptions {
            x_quadrature_level: self.solver.x_quadrature_level,
            y_quadrature_level: self.solver.y_quadrature_level,
        }
    }

    /// Settings recorded as `# key = value` lines at the top of every CSV.
    pub fn comments(&self) -> Vec<(String, String)> {
        let mut c = vec![
            ("example".to_string(), self.problem.example.clone()),
            ("t_final".to_string(), self.problem.t_final.clone()),
            ("solver".to_string(), self.solver.kind.clone()),
            ("solver_tol".to_string(), format!("{:e}", self.solver.tol)),
            ("solver_max_iter".to_string(), self.solver.max_iter.to_string()),
            ("x_quadrature_level".to_string(), self.solver.x_quadrature_level.to_string()),
            ("y_quadrature_level".to_string(), self.solver.y_quadrature_level.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        if !self.wall_time {
            c.push(("wall_time".to_string(), "off".to_string()));
        }
        c
    }
}

impl SolverConfig {
    pub fn settings(&self) -> Result<SolverSettings, ConfigError> {
        let kind = match self.kind.as_str() {
            "cg" => SolverKind::Cg,
            "dense" => SolverKind::Dense,
            other => return Err(invalid("solver.kind", format!("expected `cg` or `dense`, got `{other}`"))),
        };
        Ok(SolverSettings { kind, tol: self.tol, max_iter: self.max_iter })
    }
}

/// One point of the convergence schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePoint {
    pub level: u32,
    /// Time step actually used, `T / steps`.
    pub dt: f64,
    pub steps: usize,
    /// Requested values, kept for the CSV notes.
    pub dt_requested: f64,
    pub h_requested: f64,
}

impl SchedulePoint {
    pub fn h(&self) -> f64 {
        0.5f64.powi(self.level as i32)
    }

    pub fn dyadic_substitution(&self) -> bool {
        (self.h() - self.h_requested).abs() > 1e-12 * self.h()
    }

    pub fn dt_adjusted(&self) -> bool {
        (self.dt - self.dt_requested).abs() > 1e-12 * self.dt
    }
}

/// Number of steps reaching `t` with a step close to `dt`.
pub fn steps_for(t: f64, dt: f64) -> usize {
    ((t / dt).round() as usize).max(1)
}

/// Finest dyadic level whose width does not exceed `h` (h = 1/12 gives level 4).
pub fn level_for(h: f64) -> u32 {
    let l = (1.0 / h).log2();
    let r = l.round();
    if (l - r).abs() < 1e-9 {
        r as u32
    } else {
        l.ceil() as u32
    }
}

impl ConvergenceConfig {
    pub fn schedule(&self, t: f64) -> Result<Vec<SchedulePoint>, ConfigError> {
        let mut out = Vec::new();
        match (self.pairs.is_empty(), self.levels.is_empty()) {
            (false, true) => {
                for (i, [dt, h]) in self.pairs.iter().enumerate() {
                    let dt = positive(&format!("convergence.pairs[{i}][0]"), dt)?;
                    let h = positive(&format!("convergence.pairs[{i}][1]"), h)?;
                    if h > 1.0 {
                        return Err(invalid(format!("convergence.pairs[{i}][1]"), "h must be at most 1"));
                    }
                    let steps = steps_for(t, dt);
                    out.push(SchedulePoint { level: level_for(h), dt: t / steps as f64, steps, dt_requested: dt, h_requested: h });
                }
            }
            (true, false) => {
                let factor = match &self.dt_factor {
                    Some(f) => positive("convergence.dt_factor", f)?,
                    None => return Err(invalid("convergence.dt_factor", "required with `levels`")),
                };
                for &l in &self.levels {
                    let h = 0.5f64.powi(l as i32);
                    let dt = factor * h;
                    let steps = steps_for(t, dt);
                    out.push(SchedulePoint { level: l, dt: t / steps as f64, steps, dt_requested: dt, h_requested: h });
                }
            }
            _ => return Err(invalid("convergence", "give exactly one of `pairs` or `levels`")),
        }
        if out.windows(2).any(|w| w[0].level >= w[1].level) {
            return Err(invalid("convergence", "levels must be strictly ascending"));
        }
        if let Some(p) = out.iter().find(|p| p.level > 7) {
            return Err(invalid("convergence", format!("level {} is beyond the supported range (<= 7)", p.level)));
        }
        Ok(out)
    }
}

fn positive(key: &str, src: &str) -> Result<f64, ConfigError> {
    let v = constant(src).map_err(|e| invalid(key, e.to_string()))?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(key, format!("must be positive, got {v}")));
    }
    Ok(v)
}

fn parse_restricted(key: &str, src: &str, allowed: &[Var]) -> Result<Expr, ConfigError> {
    let e = Expr::parse(src).map_err(|e| invalid(key, e.to_string()))?;
    for (v, name) in [(Var::X1, "x1"), (Var::X2, "x2"), (Var::Y1, "y1"), (Var::Y2, "y2"), (Var::T, "t")] {
        if e.uses(v) && !allowed.contains(&v) {
            return Err(invalid(key, format!("`{name}` is not allowed here")));
        }
    }
    Ok(e)
}

const X: &[Var] = &[Var::X1, Var::X2];
const Y: &[Var] = &[Var::Y1, Var::Y2];
const XT: &[Var] = &[Var::X1, Var::X2, Var::T];

fn x_fn(e: Expr) -> ScalarFn {
    Arc::new(move |x| e.eval(&Env { x, ..Env::default() }))
}

fn y_fn(e: Expr) -> ScalarFn {
    Arc::new(move |y| e.eval(&Env { y, ..Env::default() }))
}

fn coefficient(key: &str, terms: &[[String; 2]]) -> Result<Coefficient, ConfigError> {
    if terms.is_empty() {
        return Err(invalid(key, "at least one term is required"));
    }
    let mut out = Vec::new();
    for (i, [xs, ys]) in terms.iter().enumerate() {
        let x = parse_restricted(&format!("{key}[{i}][0]"), xs, X)?;
        let y = parse_restricted(&format!("{key}[{i}][1]"), ys, Y)?;
        out.push(SeparableTerm { x: x_fn(x), y: y_fn(y) });
    }
    let field = SeparableField { terms: out };
    // a cheap sanity check; the cell solvers check again on their own meshes
    let n = 16;
    for i in 0..=n {
        for j in 0..=n {
            let p = [i as f64 / n as f64, j as f64 / n as f64];
            for k in 0..=n {
                for l in 0..=n {
                    let q = [k as f64 / n as f64, l as f64 / n as f64];
                    let v = field.eval(p, q);
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(invalid(key, format!("not positive at x = {p:?}, y = {q:?} (value {v})")));
                    }
                }
            }
        }
    }
    Ok(Coefficient::Separable(field))
}

fn vector(key: &str, src: &Option<[String; 2]>, allowed: &[Var]) -> Result<Option<[Expr; 2]>, ConfigError> {
    match src {
        None => Ok(None),
        Some([a, b]) => {
            Ok(Some([parse_restricted(&format!("{key}[0]"), a, allowed)?, parse_restricted(&format!("{key}[1]"), b, allowed)?]))
        }
    }
}

pub type XFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

/// A problem together with what is known about its solution.
#[derive(Clone)]
pub struct BuiltProblem {
    pub id: String,
    pub problem: Problem,
    pub exact: Option<ExactSolution>,
    pub a0: Option<XFn>,
    pub b0: Option<XFn>,
}

impl ProblemConfig {
    pub fn build(&self) -> Result<BuiltProblem, ConfigError> {
        let t = positive("problem.t_final", &self.t_final)?;
        match self.example.as_str() {
            "1" | "2" => {
                let custom = !self.a.is_empty()
                    || !self.b.is_empty()
                    || self.f.is_some()
                    || self.g0.is_some()
                    || self.g1.is_some()
                    || self.a0.is_some()
                    || self.b0.is_some();
                if custom {
                    return Err(invalid("problem", "coefficients and data may only be given with example = \"custom\""));
                }
                let id: u32 = self.example.parse().expect("checked");
                let (mut problem, exact) = example(id).expect("known example");
                problem.t_final = t;
                let (a0, b0) = (exact.a0.clone(), exact.b0.clone());
                Ok(BuiltProblem { id: self.example.clone(), problem, exact: Some(exact), a0: Some(a0), b0: Some(b0) })
            }
            "custom" => {
                let a = coefficient("problem.a", &self.a)?;
                let b = coefficient("problem.b", &self.b)?;
                let zero = || Some([Expr::parse("0").unwrap(), Expr::parse("0").unwrap()]);
                let f = vector("problem.f", &self.f, XT)?.or_else(zero).unwrap();
                let g0 = vector("problem.g0", &self.g0, X)?.or_else(zero).unwrap();
                let g1 = vector("problem.g1", &self.g1, X)?.or_else(zero).unwrap();
                let problem = Problem {
                    name: "custom".into(),
                    a,
                    b,
                    f: Arc::new(move |t, x| {
                        let env = Env { x, t, ..Env::default() };
                        [f[0].eval(&env), f[1].eval(&env)]
                    }),
                    g0: initial(g0),
                    g1: initial(g1),
                    t_final: t,
                };
                let scalar = |key: &str, s: &Option<String>| -> Result<Option<XFn>, ConfigError> {
                    match s {
                        None => Ok(None),
                        Some(s) => {
                            let e = parse_restricted(key, s, X)?;
                            Ok(Some(Arc::new(move |x| e.eval(&Env { x, ..Env::default() }))))
                        }
                    }
                };
                let a0 = scalar("problem.a0", &self.a0)?;
                let b0 = scalar("problem.b0", &self.b0)?;
                Ok(BuiltProblem { id: "custom".into(), problem, exact: None, a0, b0 })
            }
            other => Err(invalid("problem.example", format!("expected \"1\", \"2\" or \"custom\", got \"{other}\""))),
        }
    }
}

fn initial(g: [Expr; 2]) -> mstmax_core::problems::InitialFn {
    Arc::new(move |x| {
        let env = Env { x, ..Env::default() };
        [g[0].eval(&env), g[1].eval(&env)]
    })
}

/// Constant value of a validated expression field.
pub fn value(src: &str) -> f64 {
    constant(src).expect("validated")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_rounding() {
        assert_eq!(level_for(0.25), 2);
        assert_eq!(level_for(1.0 / 8.0), 3);
        assert_eq!(level_for(1.0 / 12.0), 4);
        assert_eq!(level_for(1.0 / 32.0), 5);
        assert_eq!(level_for(1.0), 0);
    }

    #[test]
    fn steps_round_to_nearest() {
        assert_eq!(steps_for(1.0, 1.0 / 6.0), 6);
        assert_eq!(steps_for(1.0, 0.3), 3);
        assert_eq!(steps_for(1.0, 5.0), 1);
    }
}
