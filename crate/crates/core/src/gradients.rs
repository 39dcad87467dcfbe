//! Forward evaluation of the full objective and its adjoint gradient.
//!
//! For a loss `L(v)` the adjoint `w` solves the KKT system with right-hand
//! side `[dL/dv_free; 0]`; then `dL/dtheta_c = -2 w_e^T (dK_e/dtheta_c) v_e`
//! with `w` extended by zero on Dirichlet DOFs and `v` carrying the full
//! field. Every term is element-local.

use std::sync::Arc;

use serde::Serialize;

use crate::assembly::{
    assemble_values, DirichletSet, ElementOperators, StokesSystem, SystemPattern,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::Grid;
use crate::linalg::{contract, Mat3, ZERO3};
use crate::material::{
    build_tensors, cell_partials, DesignField, MaterialParams, MaterialTensors, ALPHA, EPS, RHO,
};
use crate::objective::{
    anisotropic_reg, directional_reg, functional_loss, volume_constraints, FrozenStats,
    ObjectiveWeights, VolumeReport,
};
use crate::solver::{FlowState, SolverContext};
use crate::task::{Problem, TaskSpec};

/// `x_e^T (dK_e / dtheta) y_e` for every cell and design variable, laid out
/// as `[rho, eps, alpha_0 (, alpha_1)]` per cell.
pub fn design_sensitivity(
    grid: &Grid,
    ops: &ElementOperators,
    theta: &DesignField,
    hyper: &MaterialParams,
    x: &[f64],
    y: &[f64],
    exec: Exec,
) -> Vec<[f64; 4]> {
    let d = grid.dim();
    let nc = grid.n_corners();
    let nl = grid.n_local_dofs();
    let w = grid.cell_volume();
    let flux = ops.flux();
    exec.map(grid.n_cells(), |cell| {
        let mut dofs = [0usize; 24];
        grid.cell_dofs_into(cell, &mut dofs[..nl]);
        let xe: Vec<f64> = dofs[..nl].iter().map(|&k| x[k]).collect();
        let ye: Vec<f64> = dofs[..nl].iter().map(|&k| y[k]).collect();
        if xe.iter().all(|&v| v == 0.0) || ye.iter().all(|&v| v == 0.0) {
            return [0.0; 4];
        }
        // G_jk = sum_i sum_ab x_ai S^{jk}_ab y_bi
        let mut g: Mat3 = ZERO3;
        for j in 0..d {
            for k in 0..d {
                let s = ops.stiffness(j, k);
                let mut acc = 0.0;
                for a in 0..nc {
                    for b in 0..nc {
                        let sab = s[a * nc + b];
                        if sab == 0.0 {
                            continue;
                        }
                        for i in 0..d {
                            acc += xe[a * d + i] * sab * ye[b * d + i];
                        }
                    }
                }
                g[j][k] = acc;
            }
        }
        let fx: f64 = flux.iter().zip(&xe).map(|(f, v)| f * v).sum();
        let fy: f64 = flux.iter().zip(&ye).map(|(f, v)| f * v).sum();
        let phi = fx * fy / w;
        let mut fr: Mat3 = ZERO3;
        for a in 0..nc {
            for i in 0..d {
                for k in 0..d {
                    fr[i][k] += xe[a * d + i] * ye[a * d + k];
                }
            }
        }
        let fr = crate::linalg::scale(w / nc as f64, &fr);
        let p = cell_partials(
            d,
            theta.rho[cell],
            theta.eps[cell],
            theta.angles(cell),
            hyper,
        );
        let mut out = [0.0; 4];
        for m in 0..p.n_vars {
            out[m] =
                hyper.mu * contract(&p.dkm[m], &g) + p.dlambda[m] * phi + contract(&p.dkf[m], &fr);
        }
        out
    })
}

/// Adjoint solve against the factorization held by `ctx` for `system`.
/// Returns `(w_free, r)`.
pub fn adjoint_solve(
    ctx: &SolverContext,
    system: &StokesSystem,
    dl_dv_free: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if dl_dv_free.len() != system.n_free() {
        return Err(Error::Domain(format!(
            "adjoint seed has {} entries, system has {} free DOFs",
            dl_dv_free.len(),
            system.n_free()
        )));
    }
    ctx.adjoint(system, dl_dv_free)
}

/// Per-cell derivatives of a scalar with respect to the design variables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientBundle {
    pub d_rho: Vec<f64>,
    pub d_eps: Vec<f64>,
    pub d_alpha: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(theta: &DesignField) -> Self {
        GradientBundle {
            d_rho: vec![0.0; theta.n_cells()],
            d_eps: vec![0.0; theta.n_cells()],
            d_alpha: vec![0.0; theta.alpha.len()],
        }
    }

    fn add_sensitivity(&mut self, sens: &[[f64; 4]], scale: f64, n_angles: usize) {
        for (c, s) in sens.iter().enumerate() {
            self.d_rho[c] += scale * s[RHO];
            self.d_eps[c] += scale * s[EPS];
            for k in 0..n_angles {
                self.d_alpha[c * n_angles + k] += scale * s[ALPHA + k];
            }
        }
    }

    pub fn get(&self, var: DesignVar, n_angles: usize) -> f64 {
        match var {
            DesignVar::Rho(c) => self.d_rho[c],
            DesignVar::Eps(c) => self.d_eps[c],
            DesignVar::Alpha(c, k) => self.d_alpha[c * n_angles + k],
        }
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveReport {
    pub l_f: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub total: f64,
    pub v_iso: f64,
    pub v_all: f64,
    pub g_iso: f64,
    pub g_all: f64,
}

/// Multipliers turning the configured weights into the weights actually used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegScales {
    pub c: f64,
    pub d: f64,
    pub a: f64,
}

impl Default for RegScales {
    fn default() -> Self {
        RegScales {
            c: 1.0,
            d: 1.0,
            a: 1.0,
        }
    }
}

/// Result of evaluating the pipeline at one design.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ObjectiveReport,
    pub gradient: Option<GradientBundle>,
    pub volume: VolumeReport,
    pub state: FlowState,
    pub compliance_state: Option<FlowState>,
}

struct CachedSolve {
    pattern: Arc<SystemPattern>,
    ctx: SolverContext,
}

impl CachedSolve {
    fn new(grid: &Grid, dirichlet: &DirichletSet, use_blocks: bool) -> Result<Self> {
        let pattern = SystemPattern::new(grid, dirichlet, use_blocks)?;
        let ctx = SolverContext::new(Arc::clone(&pattern))?;
        Ok(CachedSolve { pattern, ctx })
    }

    fn solve(
        &mut self,
        tensors: &MaterialTensors,
        mu: f64,
        exec: Exec,
    ) -> Result<(StokesSystem, FlowState)> {
        let sys = assemble_values(&self.pattern, tensors, mu, exec)?;
        let state = self.ctx.solve(&sys)?;
        Ok((sys, state))
    }
}

/// Simulation plus objective for one problem, with symbolic analyses cached
/// for the main and the target-augmented Dirichlet sets.
pub struct Evaluator {
    pub problem: Problem,
    pub weights: ObjectiveWeights,
    pub scales: RegScales,
    pub exec: Exec,
    main: CachedSolve,
    augmented: Option<CachedSolve>,
    face_weights: Vec<f64>,
}

impl Evaluator {
    pub fn new(problem: Problem, weights: ObjectiveWeights, exec: Exec) -> Result<Self> {
        let main = CachedSolve::new(&problem.grid, &problem.dirichlet, problem.use_blocks)?;
        let augmented = if weights.w_c > 0.0 && !problem.targets.is_empty() {
            let aug = problem.augmented_dirichlet()?;
            Some(CachedSolve::new(&problem.grid, &aug, problem.use_blocks)?)
        } else {
            None
        };
        let mut face_weights = vec![0.0; problem.grid.n_dofs()];
        let d = problem.grid.dim();
        for p in &problem.outlets {
            for (&n, &w) in p.nodes.iter().zip(&p.weights) {
                for i in 0..d {
                    face_weights[n * d + i] = w;
                }
            }
        }
        Ok(Evaluator {
            problem,
            weights,
            scales: RegScales::default(),
            exec,
            main,
            augmented,
            face_weights,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.problem.grid
    }

    pub fn freeze(&self, theta: &DesignField) -> FrozenStats {
        FrozenStats::compute(
            theta,
            &self.problem.grid,
            self.weights.eps0,
            self.weights.rho0,
            self.exec,
        )
    }

    /// Effective weights `(w_c, w_d, w_a)` after scaling.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        (
            self.weights.w_c * self.scales.c,
            self.weights.w_d * self.scales.d,
            self.weights.w_a * self.scales.a,
        )
    }

    /// Fix the regularizer scales from the losses at `theta` (normally the
    /// initial design). Terms that vanish there are scaled against the cell
    /// count instead.
    pub fn calibrate(&mut self, theta: &DesignField) -> Result<RegScales> {
        if !self.weights.normalize {
            self.scales = RegScales::default();
            return Ok(self.scales);
        }
        let frozen = self.freeze(theta);
        self.scales = RegScales {
            c: 0.0,
            d: 0.0,
            a: 0.0,
        };
        let e = self.evaluate(theta, &frozen, false)?;
        let n = theta.n_cells() as f64;
        let lf = e.report.l_f;
        let ratio = |l: f64, floor: f64| if lf > 0.0 { lf / l.max(floor) } else { 1.0 };
        self.scales = RegScales {
            c: if e.report.l_c > 0.0 {
                ratio(e.report.l_c, 0.0)
            } else {
                1.0
            },
            d: ratio(e.report.l_d, n),
            a: ratio(e.report.l_a, n),
        };
        Ok(self.scales)
    }

    /// Forward simulation on the main Dirichlet set.
    pub fn simulate(&mut self, theta: &DesignField) -> Result<FlowState> {
        let tensors = build_tensors(theta, &self.problem.hyper, self.exec)?;
        Ok(self
            .main
            .solve(&tensors, self.problem.hyper.mu, self.exec)?
            .1)
    }

    /// Objective, volume constraints and, if requested, the gradient of the total.
    pub fn evaluate(
        &mut self,
        theta: &DesignField,
        frozen: &FrozenStats,
        with_gradient: bool,
    ) -> Result<Evaluation> {
        let grid = self.problem.grid.clone();
        if theta.dim != grid.dim() {
            return Err(Error::Domain(format!(
                "{}D design on a {}D grid",
                theta.dim,
                grid.dim()
            )));
        }
        theta.validate(grid.n_cells())?;
        let hyper = self.problem.hyper;
        let exec = self.exec;
        let tensors = build_tensors(theta, &hyper, exec)?;
        let (wc, wd, wa) = self.effective_weights();

        let (sys, state) = self.main.solve(&tensors, hyper.mu, exec)?;
        let fw = &self.face_weights;
        let weight_fn = |dof: usize| fw[dof];
        let weight: Option<&dyn Fn(usize) -> f64> = if self.weights.face_weighted {
            Some(&weight_fn)
        } else {
            None
        };
        let (l_f, dlf_dv) = functional_loss(
            &state.v,
            &self.problem.targets,
            &self.problem.dirichlet,
            weight,
        )?;

        let mut gradient = with_gradient.then(|| GradientBundle::zeros(theta));
        let na = theta.n_angles();
        if let Some(gb) = gradient.as_mut() {
            let seed = sys.dofs().restrict(&dlf_dv);
            if seed.iter().any(|&x| x != 0.0) {
                let (w, _) = adjoint_solve(&self.main.ctx, &sys, &seed)?;
                let w_full = sys.dofs().expand_homogeneous(&w);
                let sens = design_sensitivity(
                    &grid,
                    &self.main.pattern.ops,
                    theta,
                    &hyper,
                    &w_full,
                    &state.v,
                    exec,
                );
                gb.add_sensitivity(&sens, -2.0, na);
            }
        }

        let mut l_c = 0.0;
        let mut compliance_state = None;
        if let Some(aug) = self.augmented.as_mut() {
            let (csys, cstate) = aug.solve(&tensors, hyper.mu, exec)?;
            l_c = csys.energy(&cstate.v_free) + csys.e0;
            if let Some(gb) = gradient.as_mut().filter(|_| wc > 0.0) {
                // explicit part v^T dK v plus the adjoint of dE/dv_free = 2 K v - b
                let mut seed = csys.k_mul(&cstate.v_free);
                seed.iter_mut()
                    .zip(&csys.b)
                    .for_each(|(s, b)| *s = 2.0 * *s - b);
                let mut x = cstate.v.clone();
                if !seed.is_empty() {
                    let (w, _) = adjoint_solve(&aug.ctx, &csys, &seed)?;
                    let w_full = csys.dofs().expand_homogeneous(&w);
                    x.iter_mut().zip(&w_full).for_each(|(a, b)| *a -= 2.0 * b);
                }
                let sens =
                    design_sensitivity(&grid, &aug.pattern.ops, theta, &hyper, &x, &cstate.v, exec);
                gb.add_sensitivity(&sens, wc, na);
            }
            compliance_state = Some(cstate);
        }

        let (l_d, dld_dalpha) = directional_reg(theta, frozen);
        let (l_a, dla_deps, dla_drho) = anisotropic_reg(theta, frozen);
        if let Some(gb) = gradient.as_mut() {
            for (g, d) in gb.d_alpha.iter_mut().zip(&dld_dalpha) {
                *g += wd * d;
            }
            for c in 0..theta.n_cells() {
                gb.d_eps[c] += wa * dla_deps[c];
                gb.d_rho[c] += wa * dla_drho[c];
            }
        }
        let volume = volume_constraints(theta, &self.weights);
        let report = ObjectiveReport {
            l_f,
            l_c,
            l_d,
            l_a,
            total: l_f + wc * l_c + wd * l_d + wa * l_a,
            v_iso: volume.v_iso,
            v_all: volume.v_all,
            g_iso: volume.g_iso,
            g_all: volume.g_all,
        };
        Ok(Evaluation {
            report,
            gradient,
            volume,
            state,
            compliance_state,
        })
    }

    /// Total objective only.
    pub fn total(&mut self, theta: &DesignField, frozen: &FrozenStats) -> Result<f64> {
        Ok(self.evaluate(theta, frozen, false)?.report.total)
    }
}

/// Total objective gradient at `theta` with statistics frozen at `theta`.
pub fn total_gradient(eval: &mut Evaluator, theta: &DesignField) -> Result<GradientBundle> {
    let frozen = eval.freeze(theta);
    Ok(eval
        .evaluate(theta, &frozen, true)?
        .gradient
        .expect("requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DesignVar {
    Rho(usize),
    Eps(usize),
    Alpha(usize, usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct FdEntry {
    pub var: DesignVar,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub step: f64,
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Relative error above which a component is flagged.
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute agreement that passes regardless of the relative error.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Compare analytic and central-difference derivatives of the total objective
/// for the given components. Frozen statistics are taken at `theta` and held
/// fixed; `rho` and `eps` are first moved at least `step` inside `[0, 1]`.
pub fn fd_check(
    eval: &mut Evaluator,
    theta: &DesignField,
    components: &[DesignVar],
    step: f64,
) -> Result<FdReport> {
    fd_check_with(eval, theta, components, step, |_, _| {})
}

/// Like [`fd_check`], with a hook that may tamper with the analytic gradient
/// (negative controls).
pub fn fd_check_with(
    eval: &mut Evaluator,
    theta: &DesignField,
    components: &[DesignVar],
    step: f64,
    tamper: impl Fn(&DesignField, &mut GradientBundle),
) -> Result<FdReport> {
    let mut th = theta.clone();
    for c in 0..th.n_cells() {
        th.rho[c] = th.rho[c].clamp(step, 1.0 - step);
        th.eps_upper[c] = 1.0;
        th.eps[c] = th.eps[c].clamp(step, 1.0 - step);
    }
    let frozen = eval.freeze(&th);
    let mut grad = eval
        .evaluate(&th, &frozen, true)?
        .gradient
        .expect("requested");
    tamper(&th, &mut grad);
    let na = th.n_angles();
    let mut entries = Vec::with_capacity(components.len());
    for &var in components {
        let mut plus = th.clone();
        let mut minus = th.clone();
        {
            let (p, m) = match var {
                DesignVar::Rho(c) => (&mut plus.rho[c], &mut minus.rho[c]),
                DesignVar::Eps(c) => (&mut plus.eps[c], &mut minus.eps[c]),
                DesignVar::Alpha(c, k) => {
                    (&mut plus.alpha[c * na + k], &mut minus.alpha[c * na + k])
                }
            };
            *p += step;
            *m -= step;
        }
        let fp = eval.total(&plus, &frozen)?;
        let fm = eval.total(&minus, &frozen)?;
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = grad.get(var, na);
        let diff = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        let rel_error = if denom > 0.0 { diff / denom } else { 0.0 };
        entries.push(FdEntry {
            var,
            analytic,
            numeric,
            rel_error,
            pass: rel_error < FD_REL_TOL || diff < FD_ABS_FLOOR,
        });
    }
    let max_rel_error = entries
        .iter()
        .filter(|e| (e.analytic - e.numeric).abs() >= FD_ABS_FLOOR)
        .fold(0.0f64, |m, e| m.max(e.rel_error));
    let pass = entries.iter().all(|e| e.pass);
    Ok(FdReport {
        step,
        entries,
        max_rel_error,
        pass,
    })
}

/// `count` distinct random components of each variable kind.
pub fn sample_components(
    theta: &DesignField,
    count: usize,
    rng: &mut impl rand::Rng,
) -> Vec<DesignVar> {
    use rand::seq::index::sample;
    let n = theta.n_cells();
    let na = theta.n_angles();
    let take = count.min(n);
    let mut out = Vec::with_capacity(3 * take);
    out.extend(sample(rng, n, take).into_iter().map(DesignVar::Rho));
    out.extend(sample(rng, n, take).into_iter().map(DesignVar::Eps));
    let ta = count.min(n * na);
    out.extend(
        sample(rng, n * na, ta)
            .into_iter()
            .map(|i| DesignVar::Alpha(i / na, i % na)),
    );
    out
}

/// Random design strictly inside the box: `rho, eps` in `[0.1, 0.9]`,
/// angles in `[-3, 3]`.
pub fn random_interior_design(dim: usize, n_cells: usize, rng: &mut impl rand::Rng) -> DesignField {
    let na = dim - 1;
    DesignField {
        dim,
        rho: (0..n_cells).map(|_| rng.random_range(0.1..0.9)).collect(),
        eps: (0..n_cells).map(|_| rng.random_range(0.1..0.9)).collect(),
        alpha: (0..n_cells * na)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect(),
        eps_upper: vec![1.0; n_cells],
    }
}

/// Finite-difference check of the task's objective at a seeded random
/// interior design, `samples` components per variable kind.
pub fn gradcheck(
    task: &TaskSpec,
    samples: usize,
    step: f64,
    seed: u64,
    exec: Exec,
) -> Result<FdReport> {
    use rand::SeedableRng;
    let problem = task.build_problem()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let theta = random_interior_design(problem.grid.dim(), problem.grid.n_cells(), &mut rng);
    let mut eval = Evaluator::new(problem, task.objective.clone(), exec)?;
    eval.calibrate(&theta)?;
    let comps = sample_components(&theta, samples, &mut rng);
    fd_check(&mut eval, &theta, &comps, step)
}
