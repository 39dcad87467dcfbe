use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"

[grid]
dim = 2
cells = [12, 12]
block_size = 4

[[patch]]
id = "in"
face = "x-"
role = "inlet"
extent = [0.5]
velocity = [1.0, 0.0]

[[patch]]
id = "out"
face = "x+"
role = "outlet"
extent = [0.5]
target = [1.0, 0.0]

[objective]
v_max = 0.5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anisoflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_task(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_fields_and_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let task = small_task(tmp.path());
    let out = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        "--task",
        &task,
        "--out",
        out.to_str().unwrap(),
        "--binary",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let vtk = std::fs::read(out.join("flow.vtk")).unwrap();
    assert!(vtk.starts_with(b"# vtk DataFile Version"));
    assert!(String::from_utf8_lossy(&vtk).contains("BINARY"));
    let verdict = std::fs::read_to_string(out.join("verdict.json")).unwrap();
    assert!(verdict.contains("\"pass\": true"));
}

#[test]
fn simulate_flags_change_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let task = small_task(tmp.path());
    let out = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        "--task",
        &task,
        "--out",
        out.to_str().unwrap(),
        "--resolution",
        "8",
        "--no-blocks",
    ]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(!stdout.contains("block_flux"), "{stdout}");
    let vtk = std::fs::read_to_string(out.join("flow.vtk")).unwrap();
    assert!(vtk.contains("DIMENSIONS 9 9 1"), "resolution not applied");
}

#[test]
fn optimize_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let task = small_task(tmp.path());
    let mut csvs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("opt{k}"));
        let o = run(&[
            "optimize",
            "--task",
            &task,
            "--out",
            out.to_str().unwrap(),
            "--iters",
            "3",
            "--perturb",
            "0.01",
            "--seed",
            "4",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("design.vtk").exists());
        csvs.push(std::fs::read(out.join("history.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    assert_eq!(text.lines().count(), 5, "header plus iterations 0..=3");
    assert!(text.starts_with("iteration,l_f,"));
}

#[test]
fn isotropic_optimization_keeps_eps_at_one() {
    let tmp = tempfile::tempdir().unwrap();
    let task = small_task(tmp.path());
    let out = tmp.path().join("iso");
    let o = run(&[
        "optimize",
        "--task",
        &task,
        "--out",
        out.to_str().unwrap(),
        "--iters",
        "2",
        "--isotropic",
    ]);
    assert_eq!(code(&o), 0);
    let vtk = std::fs::read_to_string(out.join("design.vtk")).unwrap();
    let eps: Vec<f64> = vtk
        .split("SCALARS eps")
        .nth(1)
        .unwrap()
        .lines()
        .skip(2)
        .take(144)
        .map(|l| l.trim().parse().unwrap())
        .collect();
    assert!(eps.iter().all(|&e| e == 1.0));
}

#[test]
fn gradcheck_passes_on_a_small_task() {
    let tmp = tempfile::tempdir().unwrap();
    let task = small_task(tmp.path());
    let o = run(&["gradcheck", "--task", &task, "--samples", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 components"));
}

#[test]
fn experiment_reports_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bd");
    let o = run(&[
        "experiment",
        "block-divergence",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(out.join("verdict.json").exists());
    assert!(out.join("blocks.vtk").exists());

    // a stiff divergence penalty conserves flux even without blocks, so the
    // lossy-baseline check fails
    let o = run(&["experiment", "block-divergence", "lambda_max=1e7"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL no_blocks"));
}

#[test]
fn configuration_errors_exit_with_2() {
    for args in [
        vec!["experiment", "no-such-study"],
        vec!["experiment", "block-divergence", "bogus=1"],
        vec!["experiment", "block-divergence", "not-a-pair"],
        vec![
            "simulate",
            "--task",
            "/nonexistent/task.toml",
            "--out",
            "/tmp/x",
        ],
        vec!["frobnicate"],
    ] {
        let o = run(&args);
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn invalid_task_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(
        &p,
        SMALL
            .replace("v_max = 0.5", "v_max = 1.5")
            .replace("extent = [0.5]\nvelocity", "extent = [3.0]\nvelocity"),
    )
    .unwrap();
    let o = run(&[
        "simulate",
        "--task",
        p.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("v_max") && err.contains("patch \"in\""),
        "{err}"
    );
}
