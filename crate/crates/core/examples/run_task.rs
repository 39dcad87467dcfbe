//! Run the design loop on a task file and print the loss trajectory.
//!
//! `cargo run --release --example run_task -- tasks/pipe2d.toml 50`

use anisoflow::optimizer::{optimize_with, OptimizeOptions};
use anisoflow::task::load_task;

fn main() -> anisoflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("task path");
    let task = load_task(&path)?;
    let mut opts = OptimizeOptions::from_task(&task);
    if let Some(k) = args.next() {
        opts.iterations = k.parse().expect("iteration count");
    }
    let t = std::time::Instant::now();
    let (_, hist) = optimize_with(&task, &opts, |r| {
        println!(
            "{:4} l_f {:.4e} l_c {:.4e} l_d {:.4e} l_a {:.4e} total {:.4e} g_iso {:.3e} g_all {:.3e} dx {:.3e}",
            r.iteration, r.l_f, r.l_c, r.l_d, r.l_a, r.total, r.g_iso, r.g_all, r.max_change
        )
    })?;
    let b = hist.best_record().unwrap();
    println!(
        "best iter {} l_f {:.4e} ({:.1}s)",
        b.iteration,
        b.l_f,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
