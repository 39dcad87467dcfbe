//! The design loop: MMA over the stacked variables `(rho, eps, alpha)` with
//! the two volume constraints and the per-iteration isotropy bound.

use std::f64::consts::PI;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::exec::Exec;
use crate::gradients::{Evaluator, RegScales};
use crate::grid::Grid;
use crate::material::DesignField;
use crate::mma::{mma_step, MmaInput, MmaSettings, MmaState};
use crate::objective::{dynamic_eps_bound, FrozenStats};
use crate::task::TaskSpec;

/// Scaled volume violation tolerated for a design to count as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Scalars logged once per iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub l_f: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub total: f64,
    pub v_iso: f64,
    pub v_all: f64,
    pub g_iso: f64,
    pub g_all: f64,
    /// Largest change of any variable in the step that followed this evaluation.
    pub max_change: f64,
}

impl IterationRecord {
    pub const HEADER: [&'static str; 11] = [
        "iteration",
        "l_f",
        "l_c",
        "l_d",
        "l_a",
        "total",
        "v_iso",
        "v_all",
        "g_iso",
        "g_all",
        "max_change",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.l_f,
            self.l_c,
            self.l_d,
            self.l_a,
            self.total,
            self.v_iso,
            self.v_all,
            self.g_iso,
            self.g_all,
            self.max_change,
        ]
    }

    /// Both volume constraints hold within `FEASIBILITY_TOL` per cell.
    pub fn feasible(&self, n_cells: usize) -> bool {
        let n = n_cells as f64;
        self.g_iso / n <= FEASIBILITY_TOL && self.g_all / n <= FEASIBILITY_TOL
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizationHistory {
    pub records: Vec<IterationRecord>,
    /// Designs evaluated at each record (kept when requested).
    pub snapshots: Vec<DesignField>,
    pub best_iteration: Option<usize>,
    pub best: Option<DesignField>,
    pub scales: Option<RegScales>,
}

impl OptimizationHistory {
    pub fn best_record(&self) -> Option<&IterationRecord> {
        self.best_iteration.map(|i| &self.records[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub iterations: usize,
    pub perturb: f64,
    pub seed: u64,
    pub isotropic: bool,
    pub move_limit: f64,
    pub keep_snapshots: bool,
    pub exec: Exec,
}

impl OptimizeOptions {
    pub fn from_task(task: &TaskSpec) -> Self {
        OptimizeOptions {
            iterations: task.optimizer.iterations,
            perturb: task.optimizer.perturb,
            seed: task.optimizer.seed,
            isotropic: task.optimizer.isotropic,
            move_limit: task.optimizer.move_limit,
            keep_snapshots: false,
            exec: Exec::default(),
        }
    }
}

/// Initial design from the task, with optional `U(-k, k)` noise on `rho` and `alpha`.
pub fn initial_design(task: &TaskSpec, grid: &Grid, perturb: f64, seed: u64) -> DesignField {
    let rho0 = task.init.rho.unwrap_or(task.objective.v_max);
    let mut theta = DesignField::uniform(
        grid.dim(),
        grid.n_cells(),
        rho0,
        task.init.eps,
        task.init.alpha,
    );
    if perturb > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in theta.rho.iter_mut() {
            *r = (*r + rng.random_range(-perturb..perturb)).clamp(0.0, 1.0);
        }
        for a in theta.alpha.iter_mut() {
            *a = (*a + rng.random_range(-perturb..perturb)).clamp(-PI, PI);
        }
    }
    theta
}

fn pack(theta: &DesignField) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 * theta.n_cells() + theta.alpha.len());
    x.extend_from_slice(&theta.rho);
    x.extend_from_slice(&theta.eps);
    x.extend_from_slice(&theta.alpha);
    x
}

fn unpack(x: &[f64], theta: &mut DesignField) {
    let n = theta.n_cells();
    theta.rho.copy_from_slice(&x[..n]);
    theta.eps.copy_from_slice(&x[n..2 * n]);
    theta.alpha.copy_from_slice(&x[2 * n..]);
}

/// Run the design loop from the task's initial design.
pub fn optimize(
    task: &TaskSpec,
    opts: &OptimizeOptions,
) -> Result<(DesignField, OptimizationHistory)> {
    optimize_with(task, opts, |_| {})
}

/// As [`optimize`], calling `on_record` after every logged iteration so
/// callers can persist progress before a later failure.
pub fn optimize_with(
    task: &TaskSpec,
    opts: &OptimizeOptions,
    mut on_record: impl FnMut(&IterationRecord),
) -> Result<(DesignField, OptimizationHistory)> {
    let problem = task.build_problem()?;
    let grid = problem.grid.clone();
    let mut theta = initial_design(task, &grid, opts.perturb, opts.seed);
    let mut eval = Evaluator::new(problem, task.objective.clone(), opts.exec)?;
    let n = grid.n_cells();
    let na = grid.n_angles();
    let nvar = 2 * n + n * na;

    let mut hist = OptimizationHistory {
        scales: Some(eval.calibrate(&theta)?),
        ..Default::default()
    };
    let settings = MmaSettings {
        move_limit: opts.move_limit,
        ..MmaSettings::default()
    };
    let mut state = MmaState::new(nvar);
    let mut range = vec![1.0; nvar];
    range[2 * n..].iter_mut().for_each(|r| *r = 2.0 * PI);
    let mut f_scale = None;
    let mut best_key: Option<(bool, f64, f64)> = None;

    for it in 0..=opts.iterations {
        // isotropy bound from the local fluidity spread; eps is clipped to it
        // before evaluation so every logged design satisfies it
        let spread_stats = FrozenStats::compute(
            &theta,
            &grid,
            task.objective.eps0,
            task.objective.rho0,
            opts.exec,
        );
        if opts.isotropic {
            theta.eps_upper = vec![1.0; n];
        } else {
            theta.eps_upper = dynamic_eps_bound(&spread_stats);
            for c in 0..n {
                theta.eps[c] = theta.eps[c].min(theta.eps_upper[c]);
            }
        }
        let frozen = eval.freeze(&theta);
        let last = it == opts.iterations;
        let e = eval.evaluate(&theta, &frozen, !last)?;
        let r = &e.report;
        let mut record = IterationRecord {
            iteration: it,
            l_f: r.l_f,
            l_c: r.l_c,
            l_d: r.l_d,
            l_a: r.l_a,
            total: r.total,
            v_iso: r.v_iso,
            v_all: r.v_all,
            g_iso: r.g_iso,
            g_all: r.g_all,
            max_change: 0.0,
        };
        let feasible = record.feasible(n);
        let violation = (r.g_iso.max(r.g_all) / n as f64).max(0.0);
        // feasible designs first, then lower L_f; infeasible ones by violation
        let key = (feasible, if feasible { r.l_f } else { violation }, r.l_f);
        let better = match best_key {
            None => true,
            Some((bf, bv, _)) => (feasible && !bf) || (feasible == bf && key.1 < bv),
        };
        if better {
            best_key = Some(key);
            hist.best_iteration = Some(it);
            hist.best = Some(theta.clone());
        }
        if opts.keep_snapshots {
            hist.snapshots.push(theta.clone());
        }

        if !last {
            let grad = e.gradient.as_ref().expect("requested");
            let fs = *f_scale.get_or_insert_with(|| 10.0 / r.total.abs().max(1e-12));
            let x = pack(&theta);
            let mut df0 = pack(&DesignField {
                dim: theta.dim,
                rho: grad.d_rho.clone(),
                eps: grad.d_eps.clone(),
                alpha: grad.d_alpha.clone(),
                eps_upper: Vec::new(),
            });
            df0.iter_mut().for_each(|g| *g *= fs);
            let inv_n = 1.0 / n as f64;
            let g = [r.g_iso * inv_n, r.g_all * inv_n];
            let mut dg_iso = vec![0.0; nvar];
            let mut dg_all = vec![0.0; nvar];
            for c in 0..n {
                dg_iso[c] = e.volume.dg_iso_drho[c] * inv_n;
                dg_iso[n + c] = e.volume.dg_iso_deps[c] * inv_n;
                dg_all[c] = e.volume.dg_all_drho[c] * inv_n;
            }
            let mut xmin = vec![0.0; nvar];
            let mut xmax = vec![1.0; nvar];
            xmax[n..2 * n].copy_from_slice(&theta.eps_upper);
            for j in 2 * n..nvar {
                xmin[j] = -PI;
                xmax[j] = PI;
            }
            if opts.isotropic {
                xmin[n..].copy_from_slice(&x[n..]);
                xmax[n..].copy_from_slice(&x[n..]);
            }
            let step = mma_step(
                &MmaInput {
                    x: &x,
                    df0: &df0,
                    g: &g,
                    dg: &[dg_iso, dg_all],
                    xmin: &xmin,
                    xmax: &xmax,
                    range: &range,
                },
                &settings,
                &mut state,
            )?;
            record.max_change = step.max_change;
            unpack(&step.x, &mut theta);
        }
        if it % 10 == 0 || last {
            info!(
                "iter {it:4}  L_f {:.6e}  total {:.6e}  V_iso/n {:.4}  V_all/n {:.4}  change {:.3e}",
                record.l_f,
                record.total,
                record.v_iso / n as f64,
                record.v_all / n as f64,
                record.max_change
            );
        }
        on_record(&record);
        hist.records.push(record);
    }
    let best = hist.best.clone().expect("at least one iteration");
    Ok((best, hist))
}

/// Re-evaluate the objective at a stored design (statistics frozen at that design).
pub fn replay(
    task: &TaskSpec,
    theta: &DesignField,
    scales: RegScales,
    exec: Exec,
) -> Result<IterationRecord> {
    let problem = task.build_problem()?;
    let mut eval = Evaluator::new(problem, task.objective.clone(), exec)?;
    eval.scales = scales;
    let frozen = eval.freeze(theta);
    let r = eval.evaluate(theta, &frozen, false)?.report;
    Ok(IterationRecord {
        iteration: 0,
        l_f: r.l_f,
        l_c: r.l_c,
        l_d: r.l_d,
        l_a: r.l_a,
        total: r.total,
        v_iso: r.v_iso,
        v_all: r.v_all,
        g_iso: r.g_iso,
        g_all: r.g_all,
        max_change: 0.0,
    })
}
