//! Implicit second-order time stepping for `G X'' + K X = F`.
//!
//! With `X_{m,1/4} = (X_{m+1} + 2 X_m + X_{m-1}) / 4` the scheme reads
//! `G (X_{m+1} - 2 X_m + X_{m-1}) / dt^2 + K X_{m,1/4} = F_{m,1/4}`. It conserves
//! `E_{m+1/2} = |X_{m+1} - X_m|_G^2 / dt^2 + |(X_{m+1} + X_m) / 2|_K^2` exactly when
//! `F = 0`, and in general
//! `E_{m+1/2} - E_{m-1/2} = <F_{m,1/4}, X_{m+1} - X_{m-1}>`.
//!
//! `G` is singular on the `sigma` rows; those unknowns are fixed by the
//! constraint rows of `K` and are initialized consistently.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::linalg::{self, dot, pcg, CgInfo, SolveError, SpdSolver};
use crate::tensor::{BlockJacobi, BlockKind, BlockOperator};

#[derive(Debug, Error)]
pub enum StepError {
    #[error("time step must be positive and finite (got {0})")]
    BadTimeStep(f64),
    #[error("load vector has length {got}, expected {want}")]
    LoadLength { got: usize, want: usize },
    #[error("solver failure at step {step}: {source}")]
    Solve { step: usize, source: SolveError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    /// Block-Jacobi preconditioned CG.
    Cg,
    /// Dense Cholesky of the assembled operator; only sensible for tiny spaces.
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub kind: SolverKind,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { kind: SolverKind::Cg, tol: 1e-11, max_iter: 5000 }
    }
}

/// An SPD operator together with its solver.
struct Solver {
    op: BlockOperator,
    precond: Option<BlockJacobi>,
    dense: Option<SpdSolver>,
    settings: SolverSettings,
}

impl Solver {
    fn new(op: BlockOperator, settings: SolverSettings) -> Result<Self, SolveError> {
        let (precond, dense) = match settings.kind {
            SolverKind::Cg => (Some(BlockJacobi::new(&op)?), None),
            SolverKind::Dense => (None, Some(SpdSolver::dense(&op.to_dense())?)),
        };
        Ok(Solver { op, precond, dense, settings })
    }

    fn solve(&self, b: &[f64], x: &mut [f64]) -> Result<CgInfo, SolveError> {
        if let Some(d) = &self.dense {
            x.copy_from_slice(b);
            d.solve_in_place(x);
            return Ok(CgInfo { iterations: 0, residual: 0.0 });
        }
        let p = self.precond.as_ref().unwrap();
        pcg(
            &|v, out| self.op.apply_into(v, out),
            &|r, z| p.apply_into(r, z),
            b,
            x,
            self.settings.tol,
            self.settings.max_iter,
        )
    }
}

/// Positions of the three unknown groups in the global vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub c0: std::ops::Range<usize>,
    pub sigma: std::ops::Range<usize>,
    pub frak: std::ops::Range<usize>,
    pub c0_blocks: Vec<usize>,
    pub sigma_blocks: Vec<usize>,
    pub frak_blocks: Vec<usize>,
    pub dim: usize,
}

impl Layout {
    pub fn of(op: &BlockOperator) -> Layout {
        let ids = |k| -> Vec<usize> { (0..op.blocks.len()).filter(|&i| op.blocks[i].kind == k).collect() };
        let range = |ids: &[usize]| match (ids.first(), ids.last()) {
            (Some(&a), Some(&b)) => op.blocks[a].offset..op.blocks[b].range().end,
            _ => 0..0,
        };
        let (c, s, f) = (ids(BlockKind::U0), ids(BlockKind::Sigma), ids(BlockKind::Frak));
        Layout {
            c0: range(&c),
            sigma: range(&s),
            frak: range(&f),
            c0_blocks: c,
            sigma_blocks: s,
            frak_blocks: f,
            dim: op.dim(),
        }
    }
}

/// Everything recorded while marching.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    /// `X_0, ..., X_M`.
    pub states: Vec<Vec<f64>>,
    /// `E_{m+1/2}` for `m = 0..M-1`.
    pub energies: Vec<f64>,
    /// Cumulative load work `sum_{j=1}^{m} <F_{j,1/4}, X_{j+1} - X_{j-1}>`, aligned with `energies`.
    pub work: Vec<f64>,
    pub cg_iterations: Vec<usize>,
}

impl Trajectory {
    /// Largest deviation from the discrete energy balance, relative to the
    /// largest energy.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energies.first().copied().unwrap_or(0.0);
        let scale = self.energies.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        self.energies
            .iter()
            .zip(&self.work)
            .map(|(e, w)| (e - e0 - w).abs())
            .fold(0.0, f64::max)
            / scale
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt
    }
}

pub struct TimeStepper {
    pub gram: BlockOperator,
    pub stiff: BlockOperator,
    pub dt: f64,
    pub layout: Layout,
    system: Solver,
    settings: SolverSettings,
}

impl TimeStepper {
    pub fn new(gram: &BlockOperator, stiff: &BlockOperator, dt: f64, settings: SolverSettings) -> Result<Self, StepError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(StepError::BadTimeStep(dt));
        }
        let system = BlockOperator::combine(&[(1.0 / (dt * dt), gram), (0.25, stiff)]);
        let system = Solver::new(system, settings).map_err(|source| StepError::Solve { step: 0, source })?;
        Ok(TimeStepper {
            gram: gram.clone(),
            stiff: stiff.clone(),
            dt,
            layout: Layout::of(gram),
            system,
            settings,
        })
    }

    /// `S(dt) = G / dt^2 + K / 4`.
    pub fn system_matrix(&self) -> &BlockOperator {
        &self.system.op
    }

    fn sub_solve(&self, op: &BlockOperator, ids: &[usize], rhs: &[f64], step: usize) -> Result<Vec<f64>, StepError> {
        let sub = op.restrict(ids);
        let mut x = vec![0.0; sub.dim()];
        if sub.dim() == 0 {
            return Ok(x);
        }
        let s = Solver::new(sub, self.settings).map_err(|source| StepError::Solve { step, source })?;
        s.solve(rhs, &mut x).map_err(|source| StepError::Solve { step, source })?;
        Ok(x)
    }

    fn gather(&self, v: &[f64], ids: &[usize]) -> Vec<f64> {
        ids.iter().flat_map(|&i| v[self.gram.blocks[i].range()].iter().copied()).collect()
    }

    fn scatter(&self, src: &[f64], ids: &[usize], dst: &mut [f64]) {
        let mut k = 0;
        for &i in ids {
            let r = self.gram.blocks[i].range();
            let n = r.len();
            dst[r].copy_from_slice(&src[k..k + n]);
            k += n;
        }
    }

    /// Replace the sigma part of `x` by the minimizer `-M^{-1} P^T C0`.
    pub fn project_sigma(&self, x: &mut [f64], step: usize) -> Result<(), StepError> {
        let lay = &self.layout;
        if lay.sigma.is_empty() {
            return Ok(());
        }
        let mut c = vec![0.0; lay.dim];
        c[lay.c0.clone()].copy_from_slice(&x[lay.c0.clone()]);
        let kc = self.stiff.apply(&c);
        let rhs: Vec<f64> = self.gather(&kc, &lay.sigma_blocks).iter().map(|v| -v).collect();
        let s = self.sub_solve(&self.stiff, &lay.sigma_blocks, &rhs, step)?;
        self.scatter(&s, &lay.sigma_blocks, x);
        Ok(())
    }

    /// `X_0 = (c0, sigma(c0), 0)` and `X_1 = X_0 + dt V_0 + dt^2 / 2 A_0` with the
    /// acceleration from `G A_0 = F(0) - K X_0` on the u0 and frak rows.
    pub fn initial_data(&self, c0: &[f64], v0: &[f64], load0: &[f64]) -> Result<(Vec<f64>, Vec<f64>), StepError> {
        let lay = &self.layout;
        if load0.len() != lay.dim {
            return Err(StepError::LoadLength { got: load0.len(), want: lay.dim });
        }
        let mut x0 = vec![0.0; lay.dim];
        x0[lay.c0.clone()].copy_from_slice(c0);
        self.project_sigma(&mut x0, 0)?;
        let kx = self.stiff.apply(&x0);
        let resid: Vec<f64> = load0.iter().zip(&kx).map(|(f, k)| f - k).collect();
        let mut ids = lay.c0_blocks.clone();
        ids.extend(&lay.frak_blocks);
        let rhs = self.gather(&resid, &ids);
        let acc = self.sub_solve(&self.gram, &ids, &rhs, 0)?;
        let mut accel = vec![0.0; lay.dim];
        self.scatter(&acc, &ids, &mut accel);
        let mut x1 = x0.clone();
        for (i, v) in lay.c0.clone().zip(v0) {
            x1[i] += self.dt * v;
        }
        for i in lay.c0.clone().chain(lay.frak.clone()) {
            x1[i] += 0.5 * self.dt * self.dt * accel[i];
        }
        self.project_sigma(&mut x1, 1)?;
        Ok((x0, x1))
    }

    /// `X_{m+1}` from `X_m`, `X_{m-1}` and the averaged load `F_{m,1/4}`.
    pub fn step(&self, prev: &[f64], curr: &[f64], load: &[f64], step: usize) -> Result<(Vec<f64>, CgInfo), StepError> {
        let n = self.layout.dim;
        if load.len() != n {
            return Err(StepError::LoadLength { got: load.len(), want: n });
        }
        let dt2 = self.dt * self.dt;
        let a: Vec<f64> = (0..n).map(|i| 2.0 / dt2 * curr[i] - prev[i] / dt2).collect();
        let k: Vec<f64> = (0..n).map(|i| -0.5 * curr[i] - 0.25 * prev[i]).collect();
        let ga = self.gram.apply(&a);
        let kk = self.stiff.apply(&k);
        let rhs: Vec<f64> = (0..n).map(|i| load[i] + ga[i] + kk[i]).collect();
        let mut x: Vec<f64> = (0..n).map(|i| 2.0 * curr[i] - prev[i]).collect();
        let info = self.system.solve(&rhs, &mut x).map_err(|source| StepError::Solve { step, source })?;
        Ok((x, info))
    }

    /// `E_{m+1/2}` for the pair `(X_m, X_{m+1})`.
    pub fn energy(&self, xm: &[f64], xp: &[f64]) -> f64 {
        let d: Vec<f64> = xp.iter().zip(xm).map(|(a, b)| a - b).collect();
        let s: Vec<f64> = xp.iter().zip(xm).map(|(a, b)| 0.5 * (a + b)).collect();
        dot(&self.gram.apply(&d), &d) / (self.dt * self.dt) + dot(&self.stiff.apply(&s), &s)
    }

    /// March `steps` steps from the given first two levels. `load(t)` returns
    /// the full-length load vector at time t.
    pub fn run_from(
        &self,
        x0: Vec<f64>,
        x1: Vec<f64>,
        load: &dyn Fn(f64) -> Vec<f64>,
        steps: usize,
    ) -> Result<Trajectory, StepError> {
        let dt = self.dt;
        let mut states = vec![x0, x1];
        let mut energies = vec![self.energy(&states[0], &states[1])];
        let mut work = vec![0.0];
        let mut its = Vec::new();
        let mut f_prev = load(0.0);
        let mut f_curr = load(dt);
        for m in 1..steps {
            let f_next = load((m + 1) as f64 * dt);
            let favg: Vec<f64> = (0..f_curr.len()).map(|i| 0.25 * f_next[i] + 0.5 * f_curr[i] + 0.25 * f_prev[i]).collect();
            let (x, info) = self.step(&states[m - 1], &states[m], &favg, m)?;
            let dx: Vec<f64> = x.iter().zip(&states[m - 1]).map(|(a, b)| a - b).collect();
            let w = work.last().unwrap() + dot(&favg, &dx);
            energies.push(self.energy(&states[m], &x));
            work.push(w);
            its.push(info.iterations);
            states.push(x);
            f_prev = f_curr;
            f_curr = f_next;
        }
        Ok(Trajectory { dt, states, energies, work, cg_iterations: its })
    }

    /// Initial data from `(c0, v0)` and march to `steps * dt`.
    pub fn run(&self, c0: &[f64], v0: &[f64], load: &dyn Fn(f64) -> Vec<f64>, steps: usize) -> Result<Trajectory, StepError> {
        let (x0, x1) = self.initial_data(c0, v0, &load(0.0))?;
        self.run_from(x0, x1, load, steps)
    }

    /// Embed a u0-only load into a full-length vector.
    pub fn embed_c0(&self, c0_load: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.layout.dim];
        v[self.layout.c0.clone()].copy_from_slice(c0_load);
        v
    }
}

/// Restart state: the step index, the step size and the last two levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub m: usize,
    pub dt: f64,
    pub prev: Vec<f64>,
    pub curr: Vec<f64>,
}

const CHECKPOINT_HEADER: &str = "mstmax-checkpoint 1";

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_HEADER}");
        let _ = writeln!(s, "m {}", self.m);
        let _ = writeln!(s, "dt {:e}", self.dt);
        let _ = writeln!(s, "n {}", self.curr.len());
        for v in self.prev.iter().chain(&self.curr) {
            let _ = writeln!(s, "{v:e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StepError> {
        let bad = |m: &str| StepError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad("missing or unsupported header"));
        }
        let mut field = |key: &str| -> Result<String, StepError> {
            let l = lines.next().ok_or_else(|| bad("truncated header"))?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected `{key}`")))
        };
        let m = field("m")?.parse().map_err(|_| bad("bad step index"))?;
        let dt = field("dt")?.parse().map_err(|_| bad("bad dt"))?;
        let n: usize = field("n")?.parse().map_err(|_| bad("bad length"))?;
        let vals: Vec<f64> = lines
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(&format!("bad value `{l}`"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 2 * n {
            return Err(bad("wrong number of values"));
        }
        Ok(Checkpoint { m, dt, prev: vals[..n].to_vec(), curr: vals[n..].to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<(), StepError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StepError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Relative difference helper for tests and reports.
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    linalg::norm(&d) / linalg::norm(b).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{scalar_fn, Coefficient, SeparableField, SeparableTerm};
    use crate::linalg::csr_from_triplets;
    use crate::tensor::{assemble_blocks, AssemblyOptions, BlockInfo, KronTerm, Mode, TwoScaleSpace};

    fn tight() -> SolverSettings {
        SolverSettings { tol: 1e-13, ..SolverSettings::default() }
    }

    /// `u'' + w^2 u = 0` coupled to a constrained unknown `s` with `G = 0`.
    fn oscillator(w: f64) -> (BlockOperator, BlockOperator) {
        let blocks = vec![
            BlockInfo { kind: BlockKind::U0, macro_level: 0, micro_level: 0, dim_x: 1, dim_y: 1, offset: 0 },
            BlockInfo { kind: BlockKind::Sigma, macro_level: 0, micro_level: 0, dim_x: 1, dim_y: 1, offset: 1 },
        ];
        let one = || csr_from_triplets(1, 1, &[(0, 0, 1.0)]);
        let s = |v: f64| csr_from_triplets(1, 1, &[(0, 0, v)]);
        let mut g = BlockOperator::zero(blocks.clone());
        g.push(0, 0, KronTerm::new(one(), one()));
        g.push(1, 1, KronTerm::new(s(0.0), one()));
        // K = [[2 w^2, w^2], [w^2, w^2]]; eliminating s leaves w^2
        let mut k = BlockOperator::zero(blocks);
        k.push(0, 0, KronTerm::new(s(2.0 * w * w), one()));
        k.push_symmetric(0, 1, KronTerm::new(s(w * w), one()));
        k.push(1, 1, KronTerm::new(s(w * w), one()));
        (g, k)
    }

    #[test]
    fn scalar_oscillator_is_second_order() {
        let w = 3.0;
        let (g, k) = oscillator(w);
        let t_end = 2.0;
        let mut errs = Vec::new();
        for steps in [50usize, 100, 200, 400] {
            let dt = t_end / steps as f64;
            let ts = TimeStepper::new(&g, &k, dt, SolverSettings { kind: SolverKind::Dense, ..tight() }).unwrap();
            let tr = ts.run(&[1.0], &[0.0], &|_| vec![0.0; 2], steps).unwrap();
            let u = tr.states[steps][0];
            errs.push((u - (w * t_end).cos()).abs());
            // the constrained unknown follows u exactly
            assert!((tr.states[steps][1] + u).abs() < 1e-12);
        }
        for p in errs.windows(2) {
            let rate = (p[0] / p[1]).log2();
            assert!((rate - 2.0).abs() < 0.1, "rate {rate}, errors {errs:?}");
        }
    }

    fn small_problem() -> (BlockOperator, BlockOperator, Vec<f64>) {
        let a = Coefficient::Separable(SeparableField {
            terms: vec![SeparableTerm {
                x: scalar_fn(|x| 1.0 + 0.3 * x[1]),
                y: scalar_fn(|y| 1.0 + (2.0 * std::f64::consts::PI * y[1]).sin().powi(2)),
            }],
        });
        let b = Coefficient::Separable(SeparableField {
            terms: vec![SeparableTerm {
                x: scalar_fn(|x| 1.0 + 0.5 * x[0]),
                y: scalar_fn(|y| 1.5 + (2.0 * std::f64::consts::PI * y[0]).cos()),
            }],
        });
        let space = TwoScaleSpace::new(2, Mode::Sparse);
        let ops = assemble_blocks(&space, &a, &b, AssemblyOptions::default()).unwrap();
        let n0 = space.range_of(BlockKind::U0).len();
        let c0: Vec<f64> = (0..n0).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        (ops.gram, ops.stiff, c0)
    }

    #[test]
    fn unforced_energy_is_conserved() {
        let (g, k, c0) = small_problem();
        let ts = TimeStepper::new(&g, &k, 0.01, tight()).unwrap();
        let v0 = vec![0.0; c0.len()];
        let tr = ts.run(&c0, &v0, &|_| vec![0.0; ts.layout.dim], 100).unwrap();
        assert!(tr.energy_drift() < 1e-10, "drift {:e}", tr.energy_drift());
    }

    #[test]
    fn system_matrix_is_positive_and_scales_with_dt() {
        use rand::{Rng, SeedableRng};
        let (g, k, _) = small_problem();
        let dt = 0.05;
        let ts = TimeStepper::new(&g, &k, dt, tight()).unwrap();
        let s = ts.system_matrix();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: Vec<f64> = (0..s.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
            let sv = dot(&s.apply(&v), &v);
            assert!(sv > 0.0);
            let want = dot(&g.apply(&v), &v) / (dt * dt) + 0.25 * dot(&k.apply(&v), &v);
            assert!((sv - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn one_step_returns_only_initial_levels() {
        let (g, k, c0) = small_problem();
        let ts = TimeStepper::new(&g, &k, 0.1, tight()).unwrap();
        let tr = ts.run(&c0, &c0, &|_| vec![0.0; ts.layout.dim], 1).unwrap();
        assert_eq!(tr.states.len(), 2);
        assert_eq!(tr.energies.len(), 1);
        assert!(tr.cg_iterations.is_empty());
        assert_eq!(&tr.states[0][ts.layout.c0.clone()], &c0[..]);
    }

    #[test]
    fn forced_energy_balance_holds() {
        let (g, k, c0) = small_problem();
        let ts = TimeStepper::new(&g, &k, 0.02, tight()).unwrap();
        let n = ts.layout.dim;
        let r = ts.layout.c0.clone();
        let load = move |t: f64| {
            let mut v = vec![0.0; n];
            for (j, i) in r.clone().enumerate() {
                v[i] = (t + j as f64).sin();
            }
            v
        };
        let tr = ts.run(&c0, &c0, &load, 60).unwrap();
        assert!(tr.energy_drift() < 1e-10, "drift {:e}", tr.energy_drift());
        assert!(tr.work.last().unwrap().abs() > 1e-3);
    }

    #[test]
    fn reversing_time_recovers_the_initial_state() {
        let (g, k, c0) = small_problem();
        let ts = TimeStepper::new(&g, &k, 0.05, tight()).unwrap();
        let zero = |_: f64| vec![0.0; ts.layout.dim];
        let steps = 20;
        let fwd = ts.run(&c0, &vec![0.0; c0.len()], &zero, steps).unwrap();
        let back = ts.run_from(fwd.states[steps].clone(), fwd.states[steps - 1].clone(), &zero, steps).unwrap();
        let d = relative_difference(&back.states[steps], &fwd.states[0]);
        assert!(d < 1e-9, "reversal error {d:e}");
    }

    #[test]
    fn checkpoint_restart_reproduces_the_trajectory() {
        let (g, k, c0) = small_problem();
        let ts = TimeStepper::new(&g, &k, 0.05, tight()).unwrap();
        let zero = |_: f64| vec![0.0; ts.layout.dim];
        let full = ts.run(&c0, &vec![0.0; c0.len()], &zero, 10).unwrap();
        let cp = Checkpoint { m: 5, dt: ts.dt, prev: full.states[4].clone(), curr: full.states[5].clone() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cp.txt");
        cp.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, cp);
        let rest = ts.run_from(back.prev, back.curr, &zero, 6).unwrap();
        assert!(relative_difference(&rest.states[6], &full.states[10]) < 1e-12);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_text("hello").is_err());
        assert!(Checkpoint::from_text("mstmax-checkpoint 1\nm 1\ndt 0.1\nn 2\n1\n2\n3\n").is_err());
    }

    #[test]
    fn invalid_time_step_is_rejected() {
        let (g, k) = oscillator(1.0);
        assert!(matches!(TimeStepper::new(&g, &k, 0.0, tight()), Err(StepError::BadTimeStep(_))));
        assert!(matches!(TimeStepper::new(&g, &k, f64::NAN, tight()), Err(StepError::BadTimeStep(_))));
    }
}
