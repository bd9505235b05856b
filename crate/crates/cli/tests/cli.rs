use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distill-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn sample_writes_headed_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.csv");
    let o = run(&["sample", "--steps", "6", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[0].starts_with("step,t,x_bar_0"));
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
}

#[test]
fn invert_accepts_explicit_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inv.csv");
    let o = run(&[
        "invert", "--x0", "0.1,0,0,0,0,0,0,-0.3", "--steps", "5", "--t-target", "0.5", "--gamma-inv", "-2",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 7);
}

#[test]
fn residuals_has_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res.csv");
    let o = run(&[
        "residuals", "--samples", "8", "--t-points", "3", "--strategies", "random-resampled,ddim-inversion",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 5);
    assert_eq!(lines.count(), 6);
    assert!(dir.path().join("res_raw.csv").exists());
    assert!(dir.path().join("manifest.txt").exists());
}

#[test]
fn equivalence_passes_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["equivalence", "--trajectories", "4", "--seed", "9", "--out", d.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["equivalence.csv", "cached_kappa.csv", "manifest.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn failing_hard_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // a tolerance no finite-difference check can satisfy
    let o = run(&["ode-check", "--tolerance", "1e-30", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL [hard] ode_identity"));
}

#[test]
fn unknown_keys_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "experiment = \"ode-check\"\nseed = 1\nbogus = 3\n[ode]\nstepz = 3\n[model]\ncolour = 1\n",
    );
    let o = run(&["suite", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    for key in ["`bogus`", "`ode.stepz`", "`model.colour`"] {
        assert!(err.contains(key), "missing {key} in {err}");
    }
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let ode = write(dir.path(), "ode.toml", "experiment = \"ode-check\"\nseed = 1\n");
    // wrong experiment for the subcommand
    assert_eq!(code(&run(&["equivalence", "--config", &ode])), 2);
    // missing seed
    let noseed = write(dir.path(), "noseed.toml", "experiment = \"ode-check\"\n");
    assert_eq!(code(&run(&["suite", "--config", &noseed])), 2);
    // invalid value
    let bad = write(dir.path(), "neg.toml", "experiment = \"ode-check\"\nseed = 1\n[ode]\nfd_step = -1.0\n");
    assert_eq!(code(&run(&["suite", "--config", &bad])), 2);
    assert_eq!(code(&run(&["suite", "--name", "no-such-experiment"])), 2);
    assert_eq!(code(&run(&["suite"])), 2);
    assert_eq!(code(&run(&["distill", "--mode", "nonsense"])), 2);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "eq.toml",
        "experiment = \"equivalence\"\nseed = 5\n[equivalence]\ntrajectories = 3\nsteps = 4\n",
    );
    let out = dir.path().join("out");
    let o = run(&["equivalence", "--config", &cfg, "--trajectories", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("over 2 trajectories"));
}

#[test]
fn distill_writes_run_and_canvas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(&["distill", "--iters", "20", "--mode", "sds", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_csv = fs::read_to_string(out.join("run.csv")).unwrap();
    assert_eq!(run_csv.lines().count(), 21);
    assert!(out.join("canvas.pgm").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("final_error="));
}
