use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = "\
[model]
d_x = 4
r_ratio = 2

[method]
method = \"ekf-chain\"
n = 3
j = 3

[experiment]
steps = 12
replications = 2
seed = 9
spinup = 0.5
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nested-msf"))
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env_remove("NESTED_MSF_THREADS")
        .output()
        .unwrap()
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut runs: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    runs.sort();
    for r in runs.iter().filter(|p| p.is_dir()) {
        let mut files: Vec<_> = fs::read_dir(r)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        for f in files
            .iter()
            .filter(|f| f.extension().is_some_and(|e| e == "csv"))
        {
            out.push((
                f.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(f).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn csvs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    fs::write(&cfg, SMOKE).unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "3", "0"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = run(&[
            "--threads",
            threads,
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(csvs(&out));
    }
    assert_eq!(outputs[0].len(), 8);
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);

    let o = run(&["evaluate", "--out", tmp.path().join("t1").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn threads_fall_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    fs::write(&cfg, SMOKE).unwrap();
    let out = tmp.path().join("env");
    let o = bin()
        .env("NESTED_MSF_THREADS", "2")
        .args([
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"threads\": 2"), "{manifest}");
    assert!(out.join("run_001/obs.csv").exists());
}

#[test]
fn bad_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "[method]\nn = 4\nwidth = 3\n").unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("width") && err.contains("line 3"), "{err}");

    fs::write(&cfg, "[experiment]\nreplications = 0\n").unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("experiment.replications"));
}

#[test]
fn selftest_succeeds() {
    let o = run(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn total_collapse_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("collapse.cfg");
    let text = SMOKE.replace(
        "j = 3\n",
        "j = 3\njitter_scale = 1e9\nboundary = \"reject\"\n",
    );
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("c");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("filter collapse"));
}
