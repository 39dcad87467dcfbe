//! Scripted desk-scale studies. Each one builds its tasks, runs them, writes
//! fields and logs when given an output directory, and returns a [`Verdict`].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::assembly::{assemble_values, SystemPattern};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::Grid;
use crate::linalg;
use crate::material::{build_tensors, DesignField, MaterialTensors};
use crate::optimizer::{optimize_with, OptimizeOptions};
use crate::output::{
    connects, fluid_mask, fluidity_mask, write_vtk, HistoryWriter, Verdict, VtkFormat,
};
use crate::solver::{block_net_flux, FlowState, SolverContext};
use crate::task::{Problem, TaskSpec};

/// Registered experiment names.
pub const EXPERIMENTS: [&str; 5] = [
    "block-divergence",
    "slanted-pipe",
    "refine-convergence",
    "block-size",
    "init-sensitivity",
];

/// `key=value` settings that replace an experiment's defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    values: BTreeMap<String, String>,
}

impl Overrides {
    pub fn parse<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut errs = Vec::new();
        for item in items {
            let item = item.as_ref();
            match item.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => {
                    if values
                        .insert(k.trim().to_string(), v.trim().to_string())
                        .is_some()
                    {
                        errs.push(format!("override {k:?} given twice"));
                    }
                }
                _ => errs.push(format!("override {item:?} is not of the form key=value")),
            }
        }
        if errs.is_empty() {
            Ok(Overrides { values })
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        let errs: Vec<String> = self
            .values
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .map(|k| format!("unknown override {k:?}; accepted: {}", allowed.join(", ")))
            .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("override {key}={v:?} does not parse"))),
        }
    }

    fn list<T: std::str::FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|_| {
                    Error::config(format!(
                        "override {key}={v:?} is not a comma-separated list"
                    ))
                }),
        }
    }
}

/// Where artifacts go, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    dir: Option<PathBuf>,
    pub format: VtkFormat,
}

impl Artifacts {
    pub fn none() -> Self {
        Artifacts::default()
    }

    pub fn in_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Artifacts {
            dir: Some(dir),
            format: VtkFormat::Ascii,
        })
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn fields(
        &self,
        name: &str,
        problem: &Problem,
        theta: &DesignField,
        v: Option<&[f64]>,
        task: &TaskSpec,
    ) -> Result<()> {
        if let Some(p) = self.path(name) {
            write_vtk(
                &p,
                &problem.grid,
                v,
                theta,
                &problem.hyper,
                task.objective.eps0,
                task.objective.rho0,
                self.format,
            )?;
        }
        Ok(())
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        if let Some(p) = self.path(name) {
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Run a registered experiment.
pub fn run_experiment(
    name: &str,
    overrides: &Overrides,
    artifacts: &Artifacts,
    exec: Exec,
) -> Result<Verdict> {
    let t0 = Instant::now();
    let mut verdict = match name {
        "block-divergence" => block_divergence(overrides, artifacts)?,
        "slanted-pipe" => slanted_pipe(overrides, artifacts)?,
        "refine-convergence" => refine_convergence(overrides, artifacts)?,
        "block-size" => block_size(overrides, artifacts, exec)?,
        "init-sensitivity" => init_sensitivity(overrides, artifacts, exec)?,
        _ => {
            return Err(Error::config(format!(
                "unknown experiment {name:?}; available: {}",
                EXPERIMENTS.join(", ")
            )))
        }
    };
    verdict.seconds = t0.elapsed().as_secs_f64();
    if let Some(p) = artifacts.path("verdict.json") {
        verdict.write(&p)?;
    }
    Ok(verdict)
}

/// Solve one design, optionally editing the material tensors first.
fn solve_design(
    problem: &Problem,
    theta: &DesignField,
    use_blocks: bool,
    edit: impl Fn(&mut MaterialTensors),
) -> Result<FlowState> {
    let mut tensors = build_tensors(theta, &problem.hyper, Exec::default())?;
    edit(&mut tensors);
    let pattern = SystemPattern::new(&problem.grid, &problem.dirichlet, use_blocks)?;
    let system = assemble_values(&pattern, &tensors, problem.hyper.mu, Exec::default())?;
    let state = SolverContext::new(pattern)?.solve(&system)?;
    if !state.residuals.ok() {
        return Err(Error::Solver(format!(
            "residuals out of tolerance: {:?}",
            state.residuals
        )));
    }
    Ok(state)
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}

fn task_header(name: &str, cells: &[usize], block_size: usize) -> String {
    format!(
        "name = \"{name}\"\n\n[grid]\ndim = {}\ncells = {:?}\nblock_size = {block_size}\n\n",
        cells.len(),
        cells
    )
}

fn patch(
    id: &str,
    face: &str,
    role: &str,
    center: f64,
    extent: f64,
    key: &str,
    vel: &[f64],
) -> String {
    format!(
        "[[patch]]\nid = \"{id}\"\nface = \"{face}\"\nrole = \"{role}\"\ncenter = [{center}]\nextent = [{extent}]\n{key} = {}\n\n",
        fmt_list(vel)
    )
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cell_center(grid: &Grid, c: usize) -> [f64; 3] {
    grid.cell_center(c)
}

// ---------------------------------------------------------------------------
// slanted pipe

/// Material model used for one run of the slanted-pipe study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorChoice {
    pub aniso_km: bool,
    pub aniso_kf: bool,
}

impl TensorChoice {
    pub fn label(self) -> String {
        format!(
            "km-{}_kf-{}",
            if self.aniso_km { "aniso" } else { "iso" },
            if self.aniso_kf { "aniso" } else { "iso" }
        )
    }

    /// Replace the anisotropic tensors by their isotropic counterparts:
    /// `Km = I` and `Kf = kf(eps rho) I`.
    pub fn apply(self, theta: &DesignField, problem: &Problem, t: &mut MaterialTensors) {
        let d = theta.dim;
        let id = linalg::identity(d);
        for (c, m) in t.cells.iter_mut().enumerate() {
            if !self.aniso_km {
                m.km = id;
            }
            if !self.aniso_kf {
                let (k, _) = problem.hyper.kf_interp(theta.eps[c] * theta.rho[c]);
                m.kf = linalg::scale(k, &id);
            }
        }
    }
}

/// Straight channel at `slope`, entering the left face centred at `y_left`
/// with vertical half-width `half`. Cells whose centre lies within `band`
/// cells (perpendicular distance) of a wall line are anisotropic with the
/// wall normal; cells between the walls are fluid, the rest solid.
pub fn slanted_pipe_design(
    grid: &Grid,
    slope: f64,
    y_left: f64,
    half: f64,
    band: f64,
) -> DesignField {
    let n = grid.n_cells();
    let h = grid.h();
    let phi = slope.atan();
    let cos = phi.cos();
    let mut theta = DesignField::uniform(2, n, 0.0, 1.0, 0.0);
    for c in 0..n {
        let [x, y, _] = cell_center(grid, c);
        let off = y - (y_left + slope * x);
        let wall_dist = (off.abs() - half).abs() * cos;
        if wall_dist < band * h {
            theta.rho[c] = 1.0;
            theta.eps[c] = 0.0;
            theta.alpha[c] = phi + 0.5 * PI;
        } else if off.abs() < half {
            theta.rho[c] = 1.0;
        }
    }
    theta
}

fn slanted_pipe(ov: &Overrides, art: &Artifacts) -> Result<Verdict> {
    ov.check_keys(&[
        "cells",
        "slope",
        "y_left",
        "half_width",
        "block_size",
        "use_blocks",
        "wall_band",
        "kf_max",
        "lambda_max",
    ])?;
    let n: usize = ov.parsed("cells", 20)?;
    let slope: f64 = ov.parsed("slope", 0.45)?;
    let y_left: f64 = ov.parsed("y_left", 0.275)?;
    let half: f64 = ov.parsed("half_width", 0.15)?;
    let bs: usize = ov.parsed("block_size", 8)?;
    let norm = (1.0 + slope * slope).sqrt();
    let dir = [1.0 / norm, slope / norm];

    let mut toml = task_header("slanted-pipe", &[n, n], bs);
    toml += &patch("in", "x-", "inlet", y_left, 2.0 * half, "velocity", &dir);
    // default: exactly the cells a wall line passes through
    let phi = slope.atan();
    let band: f64 = ov.parsed("wall_band", 0.5 * (phi.cos() + phi.sin()))?;
    let y_right = y_left + slope;
    if y_right + half < 1.0 {
        toml += &patch("out", "x+", "outlet", y_right, 2.0 * half, "target", &dir);
    } else {
        // the pipe leaves through the top face
        let x_top = (1.0 - y_left) / slope;
        toml += &patch(
            "out",
            "y+",
            "outlet",
            x_top,
            2.0 * half / slope,
            "target",
            &dir,
        );
    }
    let mut task = TaskSpec::from_toml_str(&toml)?;
    task.material.kf_max = ov.parsed("kf_max", task.material.kf_max)?;
    task.material.lambda_max = ov.parsed("lambda_max", task.material.lambda_max)?;
    task.grid.use_blocks = ov.parsed("use_blocks", true)?;
    let problem = task.build_problem()?;
    let theta = slanted_pipe_design(&problem.grid, slope, y_left, half, band);

    let mut verdict = Verdict::new("slanted-pipe");
    let outlet = &problem.outlets[0];
    let mut profiles = String::from("variant,node,x,y,vx,vy,speed\n");
    for choice in
        [(true, true), (false, true), (true, false), (false, false)].map(|(a, b)| TensorChoice {
            aniso_km: a,
            aniso_kf: b,
        })
    {
        let state = solve_design(&problem, &theta, problem.use_blocks, |t| {
            choice.apply(&theta, &problem, t)
        })?;
        let mut dev: f64 = 0.0;
        let mut dev_core: f64 = 0.0;
        let g = &problem.grid;
        let pure = |node: usize| {
            let nc = g.node_coords(node);
            (0..4).all(|k| {
                let (dx, dy) = (k & 1, k >> 1);
                if nc[0] < dx || nc[1] < dy || nc[0] - dx >= n || nc[1] - dy >= n {
                    return true;
                }
                let c = g.cell_index(&[nc[0] - dx, nc[1] - dy]);
                theta.rho[c] == 1.0 && theta.eps[c] == 1.0
            })
        };
        for &node in &outlet.nodes {
            let [x, y, _] = problem.grid.node_position(node);
            if (y - y_left - slope * x).abs() >= half - 1e-9 {
                continue;
            }
            let (vx, vy) = (state.v[2 * node], state.v[2 * node + 1]);
            let speed = vx.hypot(vy);
            dev = dev.max((speed - 1.0).abs());
            if pure(node) {
                dev_core = dev_core.max((speed - 1.0).abs());
            }
            profiles += &format!(
                "{},{node},{x},{y},{vx:?},{vy:?},{speed:?}\n",
                choice.label()
            );
        }
        let label = choice.label();
        info!("slanted pipe {label}: max outlet speed deviation {dev:.4}");
        verdict.metric(&format!("core_deviation_{label}"), dev_core);
        verdict.metric(&format!("deviation_{label}"), dev);
        if choice.aniso_km && choice.aniso_kf {
            verdict.check(
                label.clone(),
                dev < 0.05,
                format!("outlet speed deviation {dev:.4} (want < 0.05)"),
            );
        } else {
            verdict.check(
                label.clone(),
                dev > 0.20,
                format!("outlet speed deviation {dev:.4} (want > 0.20)"),
            );
        }
        art.fields(
            &format!("{label}.vtk"),
            &problem,
            &theta,
            Some(&state.v),
            &task,
        )?;
    }
    art.text("outlet_profiles.csv", &profiles)?;
    Ok(verdict)
}

/// Two straight horizontal channels of half-width `half` centred at
/// `centers`, fluid inside and solid elsewhere.
pub fn channel_design(grid: &Grid, centers: &[f64], half: f64) -> DesignField {
    let n = grid.n_cells();
    let mut theta = DesignField::uniform(grid.dim(), n, 0.0, 1.0, 0.0);
    for c in 0..n {
        let y = cell_center(grid, c)[1];
        if centers.iter().any(|&m| (y - m).abs() < half) {
            theta.rho[c] = 1.0;
        }
    }
    theta
}

fn block_divergence(ov: &Overrides, art: &Artifacts) -> Result<Verdict> {
    ov.check_keys(&[
        "cells",
        "block_size",
        "kf_max",
        "lambda_max",
        "design",
        "half_width",
    ])?;
    let n: usize = ov.parsed("cells", 30)?;
    let bs: usize = ov.parsed("block_size", 8)?;
    let design: String = ov.parsed("design", "fluid".to_string())?;
    let half: f64 = ov.parsed("half_width", 0.1)?;
    let centers = [0.25, 0.75];
    let width = 1.0 / 6.0;

    let mut toml = task_header("block-divergence", &[n, n], bs);
    for (i, &m) in centers.iter().enumerate() {
        toml += &patch(
            &format!("in{i}"),
            "x-",
            "inlet",
            m,
            width,
            "velocity",
            &[1.0, 0.0],
        );
        toml += &patch(
            &format!("out{i}"),
            "x+",
            "outlet",
            m,
            width,
            "target",
            &[1.0, 0.0],
        );
    }
    toml += "[material]\nkf_max = 1000.0\nlambda_max = 100.0\n";
    let mut task = TaskSpec::from_toml_str(&toml)?;
    task.material.kf_max = ov.parsed("kf_max", task.material.kf_max)?;
    task.material.lambda_max = ov.parsed("lambda_max", task.material.lambda_max)?;
    let grid = task.build_grid()?;
    let theta = match design.as_str() {
        "fluid" => DesignField::uniform(2, grid.n_cells(), 1.0, 1.0, 0.0),
        "channels" => channel_design(&grid, &centers, half),
        other => {
            return Err(Error::config(format!(
                "unknown design {other:?}; use fluid or channels"
            )))
        }
    };

    let mut verdict = Verdict::new("block-divergence");
    verdict.metric("design", &design);
    for use_blocks in [false, true] {
        task.grid.use_blocks = use_blocks;
        let problem = task.build_problem()?;
        let state = solve_design(&problem, &theta, use_blocks, |_| {})?;
        let (qin, qout) = (problem.influx(&state.v), problem.outflux(&state.v));
        let ratio = qout / qin;
        let worst_block = block_net_flux(&problem.grid, &state.v)
            .iter()
            .fold(0.0f64, |m, f| m.max(f.abs()));
        let tag = if use_blocks { "blocks" } else { "no_blocks" };
        info!("block divergence {tag}: influx {qin:.6} outflux {qout:.6} ratio {ratio:.6}");
        verdict.metric(&format!("influx_{tag}"), qin);
        verdict.metric(&format!("outflux_{tag}"), qout);
        verdict.metric(&format!("ratio_{tag}"), ratio);
        verdict.metric(&format!("max_block_flux_{tag}"), worst_block);
        if use_blocks {
            verdict.check(
                tag,
                (ratio - 1.0).abs() <= 1e-6,
                format!("outflux/influx {ratio:.9} (want 1 ± 1e-6)"),
            );
        } else {
            verdict.check(
                tag,
                (0.5..=0.9).contains(&ratio),
                format!("outflux/influx {ratio:.4} (want in [0.50, 0.90])"),
            );
        }
        art.fields(
            &format!("{tag}.vtk"),
            &problem,
            &theta,
            Some(&state.v),
            &task,
        )?;
    }
    Ok(verdict)
}

const AMPLIFIER: &str = include_str!("../../../tasks/amplifier2d.toml");
const PIPE: &str = include_str!("../../../tasks/pipe2d.toml");

/// Funnel from the inlet opening to the outlet opening, fluid inside and
/// solid outside. Defined by geometry only, so it is the same shape at
/// every resolution up to the staircase.
pub fn funnel_design(grid: &Grid, inlet: (f64, f64), outlet: (f64, f64)) -> DesignField {
    let n = grid.n_cells();
    let mut theta = DesignField::uniform(2, n, 0.0, 1.0, 0.0);
    for c in 0..n {
        let [x, y, _] = cell_center(grid, c);
        let mid = inlet.0 + (outlet.0 - inlet.0) * x;
        let half = 0.5 * (inlet.1 + (outlet.1 - inlet.1) * x);
        if (y - mid).abs() < half {
            theta.rho[c] = 1.0;
        }
    }
    theta
}

/// Bilinear interpolation of a nodal 2D field from `coarse` onto the nodes
/// of `fine`. Both grids cover the unit box.
pub fn prolongate(coarse: &Grid, v: &[f64], fine: &Grid) -> Vec<f64> {
    let nc = coarse.cells_per_axis()[0];
    let mut out = vec![0.0; fine.n_dofs()];
    for node in 0..fine.n_nodes() {
        let [x, y, _] = fine.node_position(node);
        let (sx, sy) = (x * nc as f64, y * nc as f64);
        let i = (sx.floor() as usize).min(nc - 1);
        let j = (sy.floor() as usize).min(nc - 1);
        let (tx, ty) = (sx - i as f64, sy - j as f64);
        for (di, dj, w) in [
            (0, 0, (1.0 - tx) * (1.0 - ty)),
            (1, 0, tx * (1.0 - ty)),
            (0, 1, (1.0 - tx) * ty),
            (1, 1, tx * ty),
        ] {
            let src = coarse.node_index(&[i + di, j + dj]);
            for k in 0..2 {
                out[2 * node + k] += w * v[2 * src + k];
            }
        }
    }
    out
}

fn refine_convergence(ov: &Overrides, art: &Artifacts) -> Result<Verdict> {
    ov.check_keys(&["resolutions", "reference", "design", "use_blocks"])?;
    let levels: Vec<usize> = ov.list("resolutions", &[32, 64, 128])?;
    let reference: usize = ov.parsed("reference", 256)?;
    let design: String = ov.parsed("design", "funnel".to_string())?;
    let use_blocks: bool = ov.parsed("use_blocks", true)?;
    if let Some(&bad) = levels
        .iter()
        .find(|&&n| n == 0 || !reference.is_multiple_of(n))
    {
        return Err(Error::config(format!(
            "resolution {bad} does not divide the reference {reference}"
        )));
    }
    let base = TaskSpec::from_toml_str(AMPLIFIER)?;
    let run = |n: usize| -> Result<(Problem, FlowState, DesignField, TaskSpec)> {
        let mut task = base.at_resolution(n);
        task.grid.use_blocks = use_blocks;
        let problem = task.build_problem()?;
        let theta = match design.as_str() {
            "fluid" => DesignField::uniform(2, problem.grid.n_cells(), 1.0, 1.0, 0.0),
            "funnel" => funnel_design(&problem.grid, (0.5, 0.5), (0.5, 0.3)),
            other => {
                return Err(Error::config(format!(
                    "unknown design {other:?}; use fluid or funnel"
                )))
            }
        };
        let state = solve_design(&problem, &theta, use_blocks, |_| {})?;
        Ok((problem, state, theta, task))
    };

    let (ref_problem, ref_state, ref_theta, ref_task) = run(reference)?;
    let ref_norm = l2(&ref_state.v);
    art.fields(
        &format!("n{reference}.vtk"),
        &ref_problem,
        &ref_theta,
        Some(&ref_state.v),
        &ref_task,
    )?;
    let mut verdict = Verdict::new("refine-convergence");
    verdict.metric("design", &design);
    let mut table = String::from("resolution,relative_l2_error\n");
    let mut errors = Vec::new();
    for &n in &levels {
        let (problem, state, theta, task) = run(n)?;
        let up = prolongate(&problem.grid, &state.v, &ref_problem.grid);
        let diff: Vec<f64> = up.iter().zip(&ref_state.v).map(|(a, b)| a - b).collect();
        let err = l2(&diff) / ref_norm;
        info!("refinement N={n}: relative L2 error {err:.3e}");
        table += &format!("{n},{err:?}\n");
        verdict.metric(&format!("error_n{n}"), err);
        art.fields(
            &format!("n{n}.vtk"),
            &problem,
            &theta,
            Some(&state.v),
            &task,
        )?;
        errors.push(err);
    }
    art.text("errors.csv", &table)?;
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let listed: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
    verdict.check(
        "monotone",
        monotone,
        format!("relative L2 errors {}", listed.join(" > ")),
    );
    Ok(verdict)
}

/// Outcome of one optimization run, judged against the end-to-end targets.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub initial_l_f: f64,
    pub final_l_f: f64,
    pub best_iteration: usize,
    pub g_iso: f64,
    pub g_all: f64,
    pub n_cells: usize,
    /// Inlet reaches outlet through cells with `rho > 0.5`.
    pub connected: bool,
    /// Same through isotropic fluid only (`eps rho > 0.5`).
    pub connected_iso: bool,
}

impl RunSummary {
    pub fn ratio(&self) -> f64 {
        self.final_l_f / self.initial_l_f
    }

    pub fn volumes_ok(&self) -> bool {
        let tol = 1e-6 * self.n_cells as f64;
        self.g_iso <= tol && self.g_all <= tol
    }

    /// `L_f` down to 10% of its start, volumes held, and a fluid path
    /// from inlet to outlet.
    pub fn pass(&self) -> bool {
        self.ratio() <= 0.1 && self.volumes_ok() && self.connected
    }

    pub fn describe(&self) -> String {
        format!(
            "L_f {:.4e} -> {:.4e} ({:.2}% at iteration {}), g_iso {:.3e}, g_all {:.3e}, connected {} (isotropic only {})",
            self.initial_l_f,
            self.final_l_f,
            100.0 * self.ratio(),
            self.best_iteration,
            self.g_iso,
            self.g_all,
            self.connected,
            self.connected_iso
        )
    }
}

/// Optimize `task`, streaming the loss history to `csv` when given, and
/// summarize the returned design.
pub fn optimize_and_judge(
    task: &TaskSpec,
    opts: &OptimizeOptions,
    csv: Option<&Path>,
) -> Result<(DesignField, RunSummary)> {
    let mut writer = csv.map(HistoryWriter::create).transpose()?;
    let mut write_err = None;
    let (theta, hist) = optimize_with(task, opts, |r| {
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.append(r) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let problem = task.build_problem()?;
    let best = hist
        .best_record()
        .ok_or_else(|| Error::Solver("optimizer produced no records".into()))?;
    let inlet: Vec<usize> = problem
        .inlets
        .iter()
        .flat_map(|p| p.nodes.iter().copied())
        .collect();
    let outlet: Vec<usize> = problem
        .outlets
        .iter()
        .flat_map(|p| p.nodes.iter().copied())
        .collect();
    let summary = RunSummary {
        initial_l_f: hist.records[0].l_f,
        final_l_f: best.l_f,
        best_iteration: best.iteration,
        g_iso: best.g_iso,
        g_all: best.g_all,
        n_cells: problem.grid.n_cells(),
        connected: connects(&problem.grid, &fluidity_mask(&theta, 0.5), &inlet, &outlet),
        connected_iso: connects(&problem.grid, &fluid_mask(&theta, 0.5), &inlet, &outlet),
    };
    Ok((theta, summary))
}

fn block_size(ov: &Overrides, art: &Artifacts, exec: Exec) -> Result<Verdict> {
    ov.check_keys(&["sizes", "iterations", "cells"])?;
    let sizes: Vec<usize> = ov.list("sizes", &[4, 8, 16])?;
    let mut base = TaskSpec::from_toml_str(PIPE)?;
    let cells: usize = ov.parsed("cells", base.grid.cells[0])?;
    base = base.at_resolution(cells);
    base.optimizer.iterations = ov.parsed("iterations", base.optimizer.iterations)?;

    let mut verdict = Verdict::new("block-size");
    let mut finals = Vec::new();
    for &bs in &sizes {
        let mut task = base.clone();
        task.grid.block_size = Some(bs);
        let mut opts = OptimizeOptions::from_task(&task);
        opts.exec = exec;
        let csv = art.path(&format!("history_b{bs}.csv"));
        let (theta, summary) = optimize_and_judge(&task, &opts, csv.as_deref())?;
        info!("block size {bs}: {}", summary.describe());
        verdict.metric(&format!("final_l_f_b{bs}"), summary.final_l_f);
        verdict.metric(&format!("initial_l_f_b{bs}"), summary.initial_l_f);
        verdict.check(format!("block_{bs}"), summary.pass(), summary.describe());
        let problem = task.build_problem()?;
        let state = solve_design(&problem, &theta, problem.use_blocks, |_| {})?;
        art.fields(
            &format!("design_b{bs}.vtk"),
            &problem,
            &theta,
            Some(&state.v),
            &task,
        )?;
        finals.push(summary.final_l_f);
    }
    let lo = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finals.iter().cloned().fold(0.0, f64::max);
    verdict.check(
        "spread",
        hi <= 2.0 * lo,
        format!(
            "final L_f range [{lo:.4e}, {hi:.4e}], ratio {:.3} (want <= 2)",
            hi / lo
        ),
    );
    Ok(verdict)
}

fn init_sensitivity(ov: &Overrides, art: &Artifacts, exec: Exec) -> Result<Verdict> {
    ov.check_keys(&["noise", "iterations", "cells", "seed"])?;
    let noise: Vec<f64> = ov.list("noise", &[0.001, 0.01, 0.09])?;
    let mut base = TaskSpec::from_toml_str(AMPLIFIER)?;
    let cells: usize = ov.parsed("cells", base.grid.cells[0])?;
    base = base.at_resolution(cells);
    base.optimizer.iterations = ov.parsed("iterations", base.optimizer.iterations)?;
    let seed: u64 = ov.parsed("seed", base.optimizer.seed)?;

    let mut verdict = Verdict::new("init-sensitivity");
    let mut finals = Vec::new();
    for &k in &noise {
        let mut opts = OptimizeOptions::from_task(&base);
        opts.perturb = k;
        opts.seed = seed;
        opts.exec = exec;
        let csv = art.path(&format!("history_k{k}.csv"));
        let (theta, summary) = optimize_and_judge(&base, &opts, csv.as_deref())?;
        info!("perturbation {k}: {}", summary.describe());
        verdict.metric(&format!("final_l_f_k{k}"), summary.final_l_f);
        verdict.metric(&format!("connected_k{k}"), summary.connected);
        verdict.check(format!("k_{k}"), summary.pass(), summary.describe());
        let problem = base.build_problem()?;
        art.fields(&format!("design_k{k}.vtk"), &problem, &theta, None, &base)?;
        finals.push(summary.final_l_f);
    }
    let lo = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finals.iter().cloned().fold(0.0, f64::max);
    verdict.metric("final_l_f_spread", hi / lo);
    Ok(verdict)
}
