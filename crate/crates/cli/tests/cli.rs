use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/data")
        .join(file)
}

fn bsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsem"))
        .args(args)
        .env_remove("BSEM_RUN_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A short one-factor fit shared by the subcommand tests.
fn small_fit(dir: &Path) -> PathBuf {
    let model = dir.join("visual.lav");
    std::fs::write(&model, "visual =~ x1 + x2 + x3\n").unwrap();
    let out = dir.join("run");
    let o = bsem(&[
        "fit",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data("holzinger_swineford.csv").to_str().unwrap(),
        "--adapt",
        "200",
        "--burnin",
        "500",
        "--sample",
        "500",
        "--ppp-replicates",
        "50",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        o.status.success(),
        "fit failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    assert!(text.contains("Latent Variables"), "{text}");
    assert!(text.contains("visual =~"), "{text}");
    out
}

#[test]
fn fit_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = small_fit(tmp.path());
    for f in [
        "config.json",
        "partable.csv",
        "summary.json",
        "summary.txt",
        "fitmeasures.json",
        "convergence.json",
        "data.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    for c in 1..=3 {
        let draws = std::fs::read_to_string(run.join(format!("draws_chain{c}.csv"))).unwrap();
        let mut lines = draws.lines();
        assert!(lines.next().unwrap().contains("visual=~x2"));
        assert_eq!(lines.count(), 500);
    }
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["sampler"]["seed"], 3);
}

#[test]
fn subcommands_read_a_stored_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = small_fit(tmp.path());
    let r = run.to_str().unwrap();

    let o = bsem(&["summary", r]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("Variances"));

    let o = bsem(&["fitmeasures", r]);
    assert!(o.status.success());
    let fm = stdout(&o);
    for key in ["npar", "ppp", "dic", "waic", "looic", "margloglik"] {
        assert!(fm.contains(key), "{key} missing from\n{fm}");
    }
    let recomputed = bsem(&["fitmeasures", r, "--recompute"]);
    assert!(recomputed.status.success());
    assert_eq!(stdout(&recomputed), fm);

    let o = bsem(&["inspect", r, "psrf"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("visual=~x2"));
    let o = bsem(&["inspect", r, "inits"]);
    assert_eq!(stdout(&o).matches("chain").count(), 3);

    let plots = tmp.path().join("plots");
    let o = bsem(&[
        "plot",
        r,
        "--what",
        "trace",
        "--params",
        "1:2",
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(plots.join("trace_1.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(plots.join("trace_2.svg").exists());
}

#[test]
fn run_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = small_fit(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_bsem"))
        .args(["inspect", "neff"])
        .env("BSEM_RUN_DIR", &run)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("x1~~x1"));
}

#[test]
fn syntax_error_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("bad.lav");
    std::fs::write(&model, "visual =~ x1 + \n").unwrap();
    let o = bsem(&[
        "fit",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data("holzinger_swineford.csv").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn unknown_variable_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m.lav");
    std::fs::write(&model, "f =~ x1 + x2 + nope\n").unwrap();
    let o = bsem(&[
        "fit",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data("holzinger_swineford.csv").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}
