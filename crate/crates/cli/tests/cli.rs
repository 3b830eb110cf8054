use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cislunar"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cislunar")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// A small Lyapunov catalog, its model and a one-revolution scenario.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let r = root.to_str().unwrap();
        let out = run(&["families", "generate", "--tag", "l1-lyapunov", "--count", "40", "--out-dir", r]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = run(&[
            "model", "fit", "--catalog", &format!("{r}/l1-lyapunov.json"), "--parts", "2", "--samples", "100",
            "--out-dir", r,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        write_config(&root.join("scenario.json"), "");
        Fixture { _dir: dir, root }
    })
}

fn write_config(path: &Path, extra: &str) {
    let text = format!(
        r#"{{
  "catalog": "l1-lyapunov.json",
  "model": "l1-lyapunov.model.json",
  "member": 10,
  "revolutions": 1,
  "seed": 3,
  "controller": {{"np": 2, "nc": 1, "mode": "fixed_chi"{extra}}},
  "sweep": {{"np": [1, 2], "nc": [1]}},
  "montecarlo": {{"runs": 2, "dispersion": 1e-4, "workers": 1}}
}}"#
    );
    std::fs::write(path, text).unwrap();
}

fn in_fixture(sub: &[&str], out_dir: &Path) -> Output {
    let f = fixture();
    let cfg = f.root.join("scenario.json");
    let mut args: Vec<&str> = sub.to_vec();
    args.extend(["--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    run(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_single_member() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.json");
    let out = run(&["families", "generate", "--tag", "l2-lyapunov", "--count", "1", "--out", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let cat = json(&path);
    assert_eq!(cat["members"].as_array().unwrap().len(), 1);
    assert_eq!(cat["tag"]["point"], "L2");
}

#[test]
fn fit_reports_holdout_and_writes_residuals() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("res.csv");
    let out = run(&[
        "model", "fit", "--catalog", f.root.join("l1-lyapunov.json").to_str().unwrap(),
        "--parts", "2", "--samples", "100", "--holdout", "0.2",
        "--residuals", csv.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("holdout"), "{text}");
    assert!(dir.path().join("l1-lyapunov.model.json").exists());
    assert!(std::fs::read_to_string(csv).unwrap().lines().count() > 1);
}

#[test]
fn simulate_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&in_fixture(&["simulate"], a.path())), 0);
    assert_eq!(code(&in_fixture(&["simulate"], b.path())), 0);
    let read = |d: &Path| std::fs::read(d.join("trajectory.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert!(a.path().join("timing.csv").exists());
    let m = json(&a.path().join("metrics.json"));
    assert_eq!(m["mode"], "fixed_chi");
    assert!(m["total_dv"].as_f64().unwrap() > 0.0);

    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&in_fixture(&["simulate", "--seed", "9"], c.path())), 0);
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn compare_writes_one_block_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&in_fixture(&["compare"], dir.path())), 0);
    let v = json(&dir.path().join("compare.json"));
    let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["fixed_chi", "fixed_orbit", "variable_chi"]);
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&in_fixture(&["sweep"], dir.path())), 0);
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let over = tempfile::tempdir().unwrap();
    assert_eq!(code(&in_fixture(&["sweep", "--np", "1", "--nc", "1"], over.path())), 0);
    let text = std::fs::read_to_string(over.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn montecarlo_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = in_fixture(&["montecarlo"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("montecarlo.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("montecarlo_hist.csv").exists());
    assert_eq!(json(&dir.path().join("montecarlo.json"))["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();

    assert_eq!(code(&run(&["simulate", "--out-dir", d])), 1);
    assert_eq!(code(&run(&["families", "generate", "--tag", "l3-halo", "--out-dir", d])), 1);
    assert_eq!(code(&run(&["families", "generate", "--tag", "l1-halo", "--count", "0", "--out-dir", d])), 1);
    assert_eq!(code(&run(&["model", "fit", "--catalog", "/nonexistent.json", "--out-dir", d])), 1);

    let bad = f.root.join("bad.json");
    write_config(&bad, r#", "horizon": 3"#);
    let out = run(&["simulate", "--config", bad.to_str().unwrap(), "--out-dir", d]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("controller.horizon"));

    let cfg = f.root.join("scenario.json");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--mu", "0.02", "--out-dir", d]);
    assert_eq!(code(&out), 1);
}

#[test]
fn infeasible_fit_exits_with_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "model", "fit", "--catalog", f.root.join("l1-lyapunov.json").to_str().unwrap(),
        "--parts", "20", "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}
