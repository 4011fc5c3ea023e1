//! The experiments behind the subcommands.

use std::fmt::Write as _;
use std::time::Instant;

use mstmax_core::fields::SeparableField;
use mstmax_core::homogenize::{mat_rel_error, HomogenizedCoefficients};
use mstmax_core::postproc::{
    csv_text, energy_projection_error, fine_curl_distance, half_step, half_step_rate, loglog_slope, u0_curls,
    u0_errors, CorrectorField, ErrorReport, MicroNorms,
};
use mstmax_core::problems::unit_coefficient;
use mstmax_core::reference::{solve_fine, FineProblem};
use mstmax_core::tensor::{assemble_blocks, BlockKind, Mode, TwoScaleOperators, TwoScaleSpace};
use mstmax_core::timestepper::{Checkpoint, TimeStepper, Trajectory};
use thiserror::Error;

use crate::config::{steps_for, value, BuiltProblem, Config, ConfigError, ModeChoice};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl StudyError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StudyError::Config(_) => 1,
            StudyError::Solver(_) | StudyError::Io(_) => 3,
        }
    }
}

fn solver<E: std::fmt::Display>(e: E) -> StudyError {
    StudyError::Solver(e.to_string())
}

/// What a study produced: the file contents, a human-readable summary and the
/// list of tolerance checks that failed.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub csv: String,
    pub summary: Vec<String>,
    pub failures: Vec<String>,
}

/// A two-scale solve on one level.
pub struct TwoScaleRun {
    pub ops: TwoScaleOperators,
    pub traj: Trajectory,
    pub seconds: f64,
}

pub fn solve_two_scale(
    cfg: &Config,
    bp: &BuiltProblem,
    level: u32,
    mode: Mode,
    dt: f64,
    steps: usize,
) -> Result<TwoScaleRun, StudyError> {
    let start = Instant::now();
    let p = &bp.problem;
    let space = TwoScaleSpace::new(level, mode);
    let ops = assemble_blocks(&space, &p.a, &p.b, cfg.assembly()).map_err(solver)?;
    let ts = TimeStepper::new(&ops.gram, &ops.stiff, dt, cfg.solver.settings()?).map_err(solver)?;
    let c0 = ops.interpolate_u0(&*p.g0);
    let v0 = ops.interpolate_u0(&*p.g1);
    let f = p.f.clone();
    let load = |t: f64| ts.embed_c0(&ops.load_u0(&|x| f(t, x)));
    let traj = ts.run(&c0, &v0, &load, steps).map_err(solver)?;
    Ok(TwoScaleRun { ops, traj, seconds: start.elapsed().as_secs_f64() })
}

/// Errors of a run against the exact solution, maximized over half-steps.
#[derive(Debug, Clone, Copy)]
pub struct RunErrors {
    pub u0_hcurl: f64,
    pub curl_u1: f64,
    pub dt_u0: f64,
}

impl RunErrors {
    fn missing() -> Self {
        RunErrors { u0_hcurl: f64::NAN, curl_u1: f64::NAN, dt_u0: f64::NAN }
    }
}

pub fn run_errors(cfg: &Config, bp: &BuiltProblem, run: &TwoScaleRun) -> Result<RunErrors, StudyError> {
    let Some(ex) = &bp.exact else { return Ok(RunErrors::missing()) };
    let ops = &run.ops;
    let unit = assemble_blocks(&ops.space, &unit_coefficient(), &unit_coefficient(), cfg.assembly()).map_err(solver)?;
    let norms = MicroNorms::new(&unit);
    let u0r = ops.space.range_of(BlockKind::U0);
    let dt = run.traj.dt;
    let mut out = RunErrors { u0_hcurl: 0.0, curl_u1: 0.0, dt_u0: 0.0 };
    for m in 0..run.traj.states.len() - 1 {
        let (xm, xp) = (&run.traj.states[m], &run.traj.states[m + 1]);
        let (t0, t1) = (m as f64 * dt, (m + 1) as f64 * dt);
        let xh = half_step(xm, xp);
        let (u, c) = (ex.u0.clone(), ex.curl_u0.clone());
        let (l2, cl2) = u0_errors(
            ops,
            &xh[u0r.clone()],
            &|x| {
                let (a, b) = (u(t0, x), u(t1, x));
                [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
            },
            &|x| 0.5 * (c(t0, x) + c(t1, x)),
        );
        out.u0_hcurl = out.u0_hcurl.max((l2 * l2 + cl2 * cl2).sqrt());
        let sigma: SeparableField = (ex.sigma)(t0).plus(&(ex.sigma)(t1)).scaled(0.5);
        out.curl_u1 = out.curl_u1.max(norms.sigma_error(&xh, &sigma));
        let rate = half_step_rate(&xm[u0r.clone()], &xp[u0r.clone()], dt);
        let (dl2, _) = u0_errors(
            ops,
            &rate,
            &|x| {
                let (a, b) = (u(t0, x), u(t1, x));
                [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt]
            },
            &|_| 0.0,
        );
        out.dt_u0 = out.dt_u0.max(dl2);
    }
    Ok(out)
}

fn wall(cfg: &Config, s: f64) -> Option<f64> {
    cfg.wall_time.then_some(s)
}

fn mode_choice(cfg_mode: ModeChoice, over: Option<ModeChoice>) -> ModeChoice {
    over.unwrap_or(cfg_mode)
}

/// Energy-projection errors of the exact solution at `t_final`, full vs sparse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionRow {
    pub level: u32,
    pub dofs_full: usize,
    pub dofs_sparse: usize,
    pub err_full: f64,
    pub err_sparse: f64,
}

pub fn projection_errors(cfg: &Config, bp: &BuiltProblem, level: u32) -> Result<ProjectionRow, StudyError> {
    let ex = bp.exact.as_ref().ok_or_else(|| StudyError::Solver("projection needs an exact solution".into()))?;
    let (a, b) = match (bp.problem.a.as_separable(), bp.problem.b.as_separable()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(StudyError::Solver("projection needs separable coefficients".into())),
    };
    let t = bp.problem.t_final;
    let (ct, ft) = (ex.curl_total(t), ex.field_total(t));
    let mut res = [(0usize, 0.0f64); 2];
    for (k, mode) in [Mode::Full, Mode::Sparse].into_iter().enumerate() {
        let space = TwoScaleSpace::new(level, mode);
        let ops = assemble_blocks(&space, &bp.problem.a, &bp.problem.b, cfg.assembly()).map_err(solver)?;
        let (e, _) = energy_projection_error(&ops, a, b, &ct, &ft, cfg.solver.tol.min(1e-10)).map_err(solver)?;
        res[k] = (space.dim(), e);
    }
    Ok(ProjectionRow { level, dofs_full: res[0].0, dofs_sparse: res[1].0, err_full: res[0].1, err_sparse: res[1].1 })
}

pub fn run_convergence(cfg: &Config, mode: Option<ModeChoice>) -> Result<(Outcome, Vec<ErrorReport>), StudyError> {
    let conv = cfg.convergence.as_ref().ok_or_else(|| crate::config::ConfigError::Invalid {
        key: "convergence".into(),
        msg: "section missing".into(),
    })?;
    let bp = cfg.problem.build()?;
    let t = cfg.t_final()?;
    let schedule = conv.schedule(t)?;
    let modes = mode_choice(conv.mode, mode).modes();
    let mut comments = cfg.comments();
    comments.push(("time_norm".into(), "max over half-steps of the half-step average".into()));
    for p in &schedule {
        if p.dyadic_substitution() {
            comments.push((
                format!("dyadic_substitution_L{}", p.level),
                format!("requested h = {:.6}, used h = {:.6}", p.h_requested, p.h()),
            ));
        }
        if p.dt_adjusted() {
            comments.push((
                format!("dt_adjusted_L{}", p.level),
                format!("requested dt = {:.6}, used dt = T/{} = {:.6}", p.dt_requested, p.steps, p.dt),
            ));
        }
    }
    if bp.exact.is_none() {
        comments.push(("errors".into(), "no exact solution, error columns are nan".into()));
    }
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    for &m in &modes {
        for p in &schedule {
            let run = solve_two_scale(cfg, &bp, p.level, m, p.dt, p.steps)?;
            let err = run_errors(cfg, &bp, &run)?;
            let r = ErrorReport {
                example: bp.id.clone(),
                mode: m.name().into(),
                level: p.level,
                h: p.h(),
                dt: p.dt,
                dofs: run.ops.space.dim(),
                err_u0_hcurl: err.u0_hcurl,
                err_curlu1_l2: err.curl_u1,
                err_dt_u0: err.dt_u0,
                energy_drift: run.traj.energy_drift(),
                corrector_err: None,
                wall_time_s: wall(cfg, run.seconds),
            };
            out.summary.push(format!(
                "{} L={} dt={:.5} dofs={} err_u0_hcurl={:.4e} err_curlu1_l2={:.4e} ({:.1}s)",
                r.mode, r.level, r.dt, r.dofs, r.err_u0_hcurl, r.err_curlu1_l2, run.seconds
            ));
            rows.push(r);
        }
    }
    if let Some(min) = conv.min_slope {
        for &m in &modes {
            let sel: Vec<&ErrorReport> = rows.iter().filter(|r| r.mode == m.name()).collect();
            if sel.len() < 2 {
                continue;
            }
            let h: Vec<f64> = sel.iter().map(|r| r.h).collect();
            for (name, col) in [
                ("err_u0_hcurl", sel.iter().map(|r| r.err_u0_hcurl).collect::<Vec<_>>()),
                ("err_curlu1_l2", sel.iter().map(|r| r.err_curlu1_l2).collect::<Vec<_>>()),
            ] {
                let slope = loglog_slope(&h, &col);
                out.summary.push(format!("{} {name}: slope vs h = {slope:.3}", m.name()));
                if !col.windows(2).all(|w| w[1] < w[0]) {
                    out.failures.push(format!("{} {name} is not decreasing: {col:?}", m.name()));
                }
                if !(slope >= min) {
                    out.failures.push(format!("{} {name} slope {slope:.3} < {min}", m.name()));
                }
            }
        }
    }
    if mode_choice(conv.mode, mode) == ModeChoice::Both && bp.exact.is_some() {
        for &l in &conv.projection_levels {
            let pr = projection_errors(cfg, &bp, l)?;
            comments.push((
                format!("projection_L{l}"),
                format!(
                    "dofs_full = {}, dofs_sparse = {}, err_full = {:.6e}, err_sparse = {:.6e}",
                    pr.dofs_full, pr.dofs_sparse, pr.err_full, pr.err_sparse
                ),
            ));
            if pr.dofs_sparse > pr.dofs_full || pr.err_full > pr.err_sparse * (1.0 + 1e-9) {
                out.failures.push(format!("projection at L={l}: {pr:?}"));
            }
        }
    }
    out.csv = csv_text(&comments, &rows);
    Ok((out, rows))
}

/// Cell-problem check of the homogenized coefficients against known formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub level: u32,
    pub err_a0: f64,
    pub err_b0: f64,
    /// Computed values at the first sample point.
    pub a0: f64,
    pub b0: [[f64; 2]; 2],
}

pub fn cell_points(grid: usize) -> Vec<[f64; 2]> {
    if grid == 1 {
        return vec![[0.0, 0.0]];
    }
    let n = (grid - 1) as f64;
    let mut v = Vec::new();
    for j in 0..grid {
        for i in 0..grid {
            v.push([i as f64 / n, j as f64 / n]);
        }
    }
    v
}

pub fn cell_study(cfg: &Config) -> Result<(Outcome, Vec<CellRow>), StudyError> {
    let cell = cfg.cell.clone().unwrap_or(crate::config::CellConfig {
        levels: vec![3, 4, 5, 6],
        grid: 3,
        tol: 1e-3,
        min_order_a: None,
        min_order_b: None,
    });
    let bp = cfg.problem.build()?;
    let xs = cell_points(cell.grid);
    let mut rows = Vec::new();
    let mut out = Outcome::default();
    for &l in &cell.levels {
        let hc = HomogenizedCoefficients::new(bp.problem.a.clone(), bp.problem.b.clone(), l).map_err(solver)?;
        let vals = hc.tabulate(&xs).map_err(solver)?;
        let mut ea = f64::NAN;
        let mut eb = f64::NAN;
        if let Some(a0) = &bp.a0 {
            ea = xs.iter().zip(&vals).map(|(x, v)| ((v.0 - a0(*x)) / a0(*x)).abs()).fold(0.0, f64::max);
        }
        if let Some(b0) = &bp.b0 {
            eb = xs
                .iter()
                .zip(&vals)
                .map(|(x, v)| {
                    let e = b0(*x);
                    mat_rel_error(&v.1, &[[e, 0.0], [0.0, e]])
                })
                .fold(0.0, f64::max);
        }
        out.summary.push(format!(
            "cell level {l}: a0{:?} = {:.10}, b0 = {:?}, max rel err a0 = {ea:.3e}, b0 = {eb:.3e}",
            xs[0], vals[0].0, vals[0].1
        ));
        rows.push(CellRow { level: l, err_a0: ea, err_b0: eb, a0: vals[0].0, b0: vals[0].1 });
    }
    let last = rows.last().expect("levels validated non-empty");
    for (name, e) in [("a0", last.err_a0), ("b0", last.err_b0)] {
        if e.is_finite() && e > cell.tol {
            out.failures.push(format!("{name}: relative error {e:.3e} > {:.1e} at cell level {}", cell.tol, last.level));
        }
    }
    if rows.len() >= 2 {
        let h: Vec<f64> = rows.iter().map(|r| 0.5f64.powi(r.level as i32)).collect();
        for (name, col, min) in [
            ("a0", rows.iter().map(|r| r.err_a0).collect::<Vec<_>>(), cell.min_order_a),
            ("b0", rows.iter().map(|r| r.err_b0).collect::<Vec<_>>(), cell.min_order_b),
        ] {
            if col.iter().all(|e| e.is_finite() && *e > 0.0) {
                let order = loglog_slope(&h, &col);
                out.summary.push(format!("{name}: observed cell-mesh order {order:.3}"));
                if let Some(min) = min {
                    if !(order >= min) {
                        out.failures.push(format!("{name}: observed order {order:.3} < {min}"));
                    }
                }
            }
        }
    }
    let mut csv = String::new();
    for (k, v) in cfg.comments() {
        let _ = writeln!(csv, "# {k} = {v}");
    }
    let _ = writeln!(csv, "# sample_points = {}", xs.len());
    let _ = writeln!(csv, "example,cell_level,err_a0,err_b0");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", bp.id, r.level, num(r.err_a0), num(r.err_b0));
    }
    out.csv = csv;
    Ok((out, rows))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "nan".into()
    }
}

/// Corrector errors against fine-scale references, one pair of rows per eps.
pub fn run_corrector_study(cfg: &Config, mode: Option<ModeChoice>) -> Result<(Outcome, Vec<ErrorReport>), StudyError> {
    let cc = cfg.corrector.as_ref().ok_or_else(|| crate::config::ConfigError::Invalid {
        key: "corrector".into(),
        msg: "section missing".into(),
    })?;
    let bp = cfg.problem.build()?;
    let t = cfg.t_final()?;
    let dt_req = value(&cc.dt);
    let steps = steps_for(t, dt_req);
    let dt = t / steps as f64;
    let settings = cfg.solver.settings()?;
    let mut comments = cfg.comments();
    comments.push(("fine_level".into(), cc.fine_level.to_string()));
    comments.push(("corrector_norm".into(), "L2(D) of the curl, max over half-steps".into()));
    if (dt - dt_req).abs() > 1e-12 * dt {
        comments.push(("dt_adjusted".into(), format!("requested dt = {dt_req:.6}, used dt = T/{steps}")));
    }
    let zero_g0 = {
        let g0 = &bp.problem.g0;
        cell_points(9).iter().all(|&x| g0(x) == [0.0, 0.0])
    };
    if !zero_g0 {
        comments.push(("outside_hypotheses".into(), "g0 is not zero".into()));
    }
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let modes = mode_choice(cc.mode, mode).modes();
    for &m in &modes {
        let run = solve_two_scale(cfg, &bp, cc.level, m, dt, steps)?;
        let err = run_errors(cfg, &bp, &run)?;
        let ops = &run.ops;
        let u0r = ops.space.range_of(BlockKind::U0);
        let dmesh = ops.d_mesh();
        let mut pairs = Vec::new();
        for e in &cc.eps {
            let eps = value(e);
            let start = Instant::now();
            let fine = FineProblem::new(eps, cc.fine_level, bp.problem.a.clone(), bp.problem.b.clone())
                .map_err(|e| ConfigError::Invalid { key: "corrector.fine_level".into(), msg: e.to_string() })?;
            let (fops, ftraj) = solve_fine(&bp.problem, &fine, dt, steps, settings).map_err(solver)?;
            let cf = CorrectorField::new(ops, eps);
            let (mut with, mut without) = (0.0f64, 0.0f64);
            for k in 0..steps {
                let xh = half_step(&run.traj.states[k], &run.traj.states[k + 1]);
                let fh = half_step(&ftraj.states[k], &ftraj.states[k + 1]);
                let fc = fops.curls(&fh);
                let macro_curl = u0_curls(ops, &xh[u0r.clone()]);
                let unf = cf.unfolded_sigma(&xh);
                with = with.max(fine_curl_distance(&fops, &fc, &|x| macro_curl[dmesh.locate(x)] + cf.sigma_at(&unf, x)));
                without = without.max(fine_curl_distance(&fops, &fc, &|x| macro_curl[dmesh.locate(x)]));
            }
            let secs = start.elapsed().as_secs_f64();
            out.summary.push(format!(
                "{} eps={eps}: corrector {with:.4e}, no corrector {without:.4e} ({secs:.1}s)",
                m.name()
            ));
            for (suffix, v) in [("", with), ("/nocorr", without)] {
                rows.push(ErrorReport {
                    example: bp.id.clone(),
                    mode: format!("{}@eps={eps}{suffix}", m.name()),
                    level: cc.level,
                    h: 0.5f64.powi(cc.level as i32),
                    dt,
                    dofs: ops.space.dim(),
                    err_u0_hcurl: err.u0_hcurl,
                    err_curlu1_l2: err.curl_u1,
                    err_dt_u0: err.dt_u0,
                    energy_drift: run.traj.energy_drift(),
                    corrector_err: Some(v),
                    wall_time_s: wall(cfg, secs + run.seconds),
                });
            }
            pairs.push((eps, with, without));
        }
        if cc.check {
            for &(eps, w, wo) in &pairs {
                if !(w < wo) {
                    out.failures.push(format!("{} eps={eps}: corrector {w:.4e} does not beat {wo:.4e}", m.name()));
                }
            }
            let mut sorted = pairs.clone();
            sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
            for w in sorted.windows(2) {
                if !(w[1].1 < w[0].1) {
                    out.failures.push(format!(
                        "{} corrector error does not shrink from eps={} ({:.4e}) to eps={} ({:.4e})",
                        m.name(),
                        w[0].0,
                        w[0].1,
                        w[1].0,
                        w[1].1
                    ));
                }
            }
        }
    }
    out.csv = csv_text(&comments, &rows);
    Ok((out, rows))
}

/// Fine-scale reference run with checkpoint output and restart.
pub fn run_reference(cfg: &Config) -> Result<(Outcome, Trajectory, usize), StudyError> {
    let rc = cfg.reference.as_ref().ok_or_else(|| crate::config::ConfigError::Invalid {
        key: "reference".into(),
        msg: "section missing".into(),
    })?;
    let bp = cfg.problem.build()?;
    let t = cfg.t_final()?;
    let dt_req = value(&rc.dt);
    let total = rc.steps.unwrap_or_else(|| steps_for(t, dt_req));
    let dt = t / steps_for(t, dt_req) as f64;
    let eps = value(&rc.eps);
    let fine = FineProblem::new(eps, rc.level, bp.problem.a.clone(), bp.problem.b.clone())
        .map_err(|e| ConfigError::Invalid { key: "reference.level".into(), msg: e.to_string() })?;
    let start = Instant::now();
    let fops = fine.assemble().map_err(solver)?;
    let ts = fops.stepper(dt, cfg.solver.settings()?).map_err(solver)?;
    let f = bp.problem.f.clone();
    // first global index of the returned trajectory
    let (traj, first) = match &rc.restart {
        Some(path) => {
            let cp = Checkpoint::load(path).map_err(solver)?;
            if (cp.dt - dt).abs() > 1e-14 * dt {
                return Err(ConfigError::Invalid {
                    key: "reference.restart".into(),
                    msg: format!("checkpoint dt {} differs from configured dt {dt}", cp.dt),
                }
                .into());
            }
            if cp.prev.len() != fops.dim() || cp.m == 0 || cp.m > total {
                return Err(ConfigError::Invalid {
                    key: "reference.restart".into(),
                    msg: "checkpoint does not match this run".into(),
                }
                .into());
            }
            let t0 = (cp.m - 1) as f64 * dt;
            let load = |s: f64| fops.load(&|x| f(t0 + s, x));
            (ts.run_from(cp.prev, cp.curr, &load, total - (cp.m - 1)).map_err(solver)?, cp.m - 1)
        }
        None => {
            let c0 = fops.interpolate(&*bp.problem.g0);
            let v0 = fops.interpolate(&*bp.problem.g1);
            let load = |s: f64| fops.load(&|x| f(s, x));
            (ts.run(&c0, &v0, &load, total).map_err(solver)?, 0)
        }
    };
    let n = traj.states.len();
    if let Some(path) = &rc.checkpoint {
        let cp = Checkpoint { m: first + n - 1, dt, prev: traj.states[n - 2].clone(), curr: traj.states[n - 1].clone() };
        cp.save(path).map_err(solver)?;
    }
    let mut csv = String::new();
    for (k, v) in cfg.comments() {
        let _ = writeln!(csv, "# {k} = {v}");
    }
    let _ = writeln!(csv, "# eps = {eps}\n# level = {}\n# dofs = {}", rc.level, fops.dim());
    // work is accumulated from the first step of this run
    let _ = writeln!(csv, "# first_step = {first}");
    let _ = writeln!(csv, "m,t,energy,work");
    for (k, (e, w)) in traj.energies.iter().zip(&traj.work).enumerate() {
        let m = first + k;
        let _ = writeln!(csv, "{},{},{},{}", m, num((m as f64 + 0.5) * dt), num(*e), num(*w));
    }
    let out = Outcome {
        csv,
        summary: vec![format!(
            "reference eps={eps} level={} dofs={} steps {}..{} energy drift {:.3e} ({:.1}s)",
            rc.level,
            fops.dim(),
            first,
            first + n - 1,
            traj.energy_drift(),
            start.elapsed().as_secs_f64()
        )],
        failures: Vec::new(),
    };
    Ok((out, traj, first))
}

