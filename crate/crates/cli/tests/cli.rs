use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sbi_core::pipeline::RunConfig;

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/ball_throw.json");

fn engine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbi-engine"))
        .args(args)
        .env("SBI_ENGINE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn run_pipeline(out: &Path) -> Output {
    engine(&["--config", CONFIG, "pipeline", "--out-dir", out.to_str().unwrap()])
}

#[test]
fn help_lists_every_config_field() {
    let o = engine(&["pipeline", "--help"]);
    assert!(o.status.success());
    let help = text(&o);
    for (path, _) in RunConfig::field_paths() {
        assert!(help.contains(&path), "--help misses {path}");
    }
}

#[test]
fn bundled_pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = run_pipeline(&a);
    assert_eq!(first.status.code(), Some(0), "{}", text(&first));
    let second = run_pipeline(&b);
    assert_eq!(second.status.code(), Some(0), "{}", text(&second));
    let files = [
        "config.json",
        "dataset.csv",
        "posterior.model",
        "posterior.model.report.txt",
        "samples.csv",
        "summary.txt",
        "diagnostics/ppc.txt",
        "diagnostics/sbc.txt",
        "diagnostics/coverage.txt",
        "diagnostics/tarp.txt",
        "diagnostics/misspec.txt",
        "analysis/moments.txt",
        "analysis/conditional.txt",
        "analysis/map.txt",
        "analysis/decision.txt",
        "analysis/corner.txt",
    ];
    let digest = RunConfig::load(Path::new(CONFIG)).unwrap().digest();
    for f in files {
        let body = std::fs::read(a.join(f)).unwrap_or_else(|_| panic!("missing {f}"));
        assert!(body.starts_with(format!("# config_digest {digest}").as_bytes()), "{f}");
        if f != "config.json" {
            assert_eq!(body, std::fs::read(b.join(f)).unwrap(), "{f} differs between runs");
        }
    }
}

#[test]
fn impossible_prior_fails_before_simulating() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = engine(&[
        "--config",
        CONFIG,
        "--set",
        r#"prior={"kind":"box_uniform","lower":[90.0],"upper":[0.0]}"#,
        "pipeline",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("invalid configuration"), "{}", text(&o));
    assert!(!out.join("dataset.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let o = engine(&["--config", CONFIG, "--set", "train.momentum=0.9", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("unknown field"));
}

#[test]
fn standalone_stages_match_pipeline_handoffs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| -> PathBuf { dir.path().join(f) };
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let fast = ["--set", "diagnostics={}", "--set", "analysis.moments=false"];
    let with = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = ["--config", CONFIG].iter().map(|a| a.to_string()).collect();
        v.extend(fast.iter().map(|a| a.to_string()));
        v.extend(extra.iter().map(|a| a.to_string()));
        v
    };
    let call = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = engine(&refs);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        o
    };
    call(with(&["simulate", "--out", &s(&p("data.csv"))]));
    call(with(&["train", "--data", &s(&p("data.csv")), "--out", &s(&p("post.model"))]));
    call(with(&[
        "sample",
        "--posterior",
        &s(&p("post.model")),
        "--out",
        &s(&p("samples.csv")),
    ]));
    call(with(&["pipeline", "--out-dir", &s(&p("run"))]));
    for (a, b) in [
        ("data.csv", "run/dataset.csv"),
        ("post.model", "run/posterior.model"),
        ("samples.csv", "run/samples.csv"),
    ] {
        assert!(
            std::fs::read(p(a)).unwrap() == std::fs::read(p(b)).unwrap(),
            "{a} differs from {b}"
        );
    }

    let o = call(with(&[
        "analyze",
        "--what",
        "corner",
        "--posterior",
        &s(&p("post.model")),
        "--samples",
        &s(&p("samples.csv")),
        "--out-dir",
        &s(&p("an")),
    ]));
    assert!(text(&o).contains("corner.txt"));
    let o = call(with(&[
        "diagnose",
        "--check",
        "ppc",
        "--posterior",
        &s(&p("post.model")),
        "--samples",
        &s(&p("samples.csv")),
        "--out-dir",
        &s(&p("diag")),
    ]));
    assert!(text(&o).starts_with("ppc\tPASS"), "{}", text(&o));
}

#[test]
fn out_of_distribution_observation_fails_misspec_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let o = engine(&[
        "simulate",
        "--simulator",
        "ball_throw",
        "--n",
        "1000",
        "--seed",
        "4",
        "--out",
        &d("data.csv"),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let o = engine(&[
        "train",
        "--data",
        &d("data.csv"),
        "--out",
        &d("post.model"),
        "--max-epochs",
        "5",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let o = engine(&[
        "diagnose",
        "--check",
        "misspec",
        "--posterior",
        &d("post.model"),
        "--data",
        &d("data.csv"),
        "--observation",
        "25",
        "--out-dir",
        &d("diag"),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).starts_with("misspec\tFAIL"));
}
