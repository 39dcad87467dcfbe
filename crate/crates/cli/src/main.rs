//! `anisoflow` command-line driver.
//!
//! Exit codes: 0 all checks pass, 1 a check failed, 2 bad configuration or
//! arguments, 3 solver failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anisoflow::experiments::{optimize_and_judge, run_experiment, Artifacts, Overrides};
use anisoflow::gradients::gradcheck;
use anisoflow::optimizer::{initial_design, OptimizeOptions};
use anisoflow::output::{write_vtk, Verdict, VtkFormat};
use anisoflow::solver::{block_net_flux, simulate};
use anisoflow::task::{load_task, TaskSpec};
use anisoflow::{Error, Exec, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Debug, Parser)]
#[command(
    name = "anisoflow",
    version,
    about = "Anisotropic Stokes flow simulation and fluidic topology optimization"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Run every kernel on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Write VTK files in binary instead of ASCII.
    #[arg(long, global = true)]
    binary: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TaskArgs {
    /// Task file (TOML).
    #[arg(long)]
    task: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the flow for the task's initial design.
    Simulate {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        out: PathBuf,
        /// Cells along the longest axis.
        #[arg(long)]
        resolution: Option<usize>,
        /// Drop the block-divergence constraints.
        #[arg(long)]
        no_blocks: bool,
        #[arg(long)]
        block_size: Option<usize>,
    },
    /// Run the design loop.
    Optimize {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        /// Optimize fluidity only, with isotropic material everywhere.
        #[arg(long)]
        isotropic: bool,
        /// Half-width of the uniform noise on the initial design.
        #[arg(long)]
        perturb: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare adjoint gradients with central differences at a random design.
    Gradcheck {
        #[command(flatten)]
        task: TaskArgs,
        /// Components sampled per variable kind.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a scripted study and report pass/fail.
    Experiment {
        /// One of: block-divergence, slanted-pipe, refine-convergence, block-size, init-sensitivity.
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value` settings replacing the study's defaults.
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let format = if cli.binary {
        VtkFormat::Binary
    } else {
        VtkFormat::Ascii
    };
    let verdict = match &cli.command {
        Command::Simulate {
            task,
            out,
            resolution,
            no_blocks,
            block_size,
        } => {
            let mut spec = load_task(&task.task)?;
            if let Some(n) = resolution {
                spec = spec.at_resolution(*n);
            }
            if *no_blocks {
                spec.grid.use_blocks = false;
            }
            if block_size.is_some() {
                spec.grid.block_size = *block_size;
            }
            run_simulate(&spec, out, format)?
        }
        Command::Optimize {
            task,
            out,
            iters,
            isotropic,
            perturb,
            seed,
        } => {
            let spec = load_task(&task.task)?;
            let mut opts = OptimizeOptions::from_task(&spec);
            opts.exec = exec;
            opts.iterations = iters.unwrap_or(opts.iterations);
            opts.isotropic |= *isotropic;
            opts.perturb = perturb.unwrap_or(opts.perturb);
            opts.seed = seed.unwrap_or(opts.seed);
            run_optimize(&spec, &opts, out, format)?
        }
        Command::Gradcheck {
            task,
            samples,
            step,
            seed,
        } => {
            let spec = load_task(&task.task)?;
            let report = gradcheck(
                &spec,
                *samples,
                *step,
                seed.unwrap_or(spec.optimizer.seed),
                exec,
            )?;
            for e in &report.entries {
                println!(
                    "{:<16} analytic {:>14.6e}  numeric {:>14.6e}  rel {:.2e}  {}",
                    format!("{:?}", e.var),
                    e.analytic,
                    e.numeric,
                    e.rel_error,
                    if e.pass { "ok" } else { "MISMATCH" }
                );
            }
            println!(
                "{} components, max relative error {:.3e}: {}",
                report.entries.len(),
                report.max_rel_error,
                if report.pass { "PASS" } else { "FAIL" }
            );
            return Ok(report.pass);
        }
        Command::Experiment {
            name,
            out,
            overrides,
        } => {
            let ov = Overrides::parse(overrides)?;
            let mut art = match out {
                Some(dir) => Artifacts::in_dir(dir)?,
                None => Artifacts::none(),
            };
            art.format = format;
            run_experiment(name, &ov, &art, exec)?
        }
    };
    for c in &verdict.checks {
        println!(
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!(
        "{} {} ({:.2}s)",
        verdict.experiment,
        if verdict.pass { "PASS" } else { "FAIL" },
        verdict.seconds
    );
    Ok(verdict.pass)
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn run_simulate(spec: &TaskSpec, out: &Path, format: VtkFormat) -> Result<Verdict> {
    let t0 = std::time::Instant::now();
    create_dir(out)?;
    let problem = spec.build_problem()?;
    let theta = initial_design(spec, &problem.grid, 0.0, spec.optimizer.seed);
    let state = simulate(&theta, &problem, None)?;
    write_vtk(
        &out.join("flow.vtk"),
        &problem.grid,
        Some(&state.v),
        &theta,
        &problem.hyper,
        spec.objective.eps0,
        spec.objective.rho0,
        format,
    )?;
    let (qin, qout) = (problem.influx(&state.v), problem.outflux(&state.v));
    let worst = block_net_flux(&problem.grid, &state.v)
        .into_iter()
        .fold(0.0f64, |m, f| m.max(f.abs()));
    info!("influx {qin:.6e}, outflux {qout:.6e}");

    let mut v = Verdict::new("simulate");
    v.metric("influx", qin);
    v.metric("outflux", qout);
    v.metric("max_block_flux", worst);
    v.metric("primal_residual", state.residuals.primal);
    v.metric("constraint_residual", state.residuals.constraint);
    v.check(
        "residuals",
        state.residuals.ok(),
        format!("{:?}", state.residuals),
    );
    if problem.use_blocks {
        v.check(
            "block_flux",
            worst <= 1e-8,
            format!("max |block net flux| {worst:.3e} (want <= 1e-8)"),
        );
    }
    v.seconds = t0.elapsed().as_secs_f64();
    v.write(&out.join("verdict.json"))?;
    Ok(v)
}

fn run_optimize(
    spec: &TaskSpec,
    opts: &OptimizeOptions,
    out: &Path,
    format: VtkFormat,
) -> Result<Verdict> {
    let t0 = std::time::Instant::now();
    create_dir(out)?;
    let (theta, summary) = optimize_and_judge(spec, opts, Some(&out.join("history.csv")))?;
    let problem = spec.build_problem()?;
    let state = simulate(&theta, &problem, None)?;
    write_vtk(
        &out.join("design.vtk"),
        &problem.grid,
        Some(&state.v),
        &theta,
        &problem.hyper,
        spec.objective.eps0,
        spec.objective.rho0,
        format,
    )?;
    let mut v = Verdict::new("optimize");
    v.metric("initial_l_f", summary.initial_l_f);
    v.metric("final_l_f", summary.final_l_f);
    v.metric("best_iteration", summary.best_iteration);
    v.metric("connected", summary.connected);
    v.metric("influx", problem.influx(&state.v));
    v.metric("outflux", problem.outflux(&state.v));
    v.check("volumes", summary.volumes_ok(), summary.describe());
    v.seconds = t0.elapsed().as_secs_f64();
    v.write(&out.join("verdict.json"))?;
    Ok(v)
}
