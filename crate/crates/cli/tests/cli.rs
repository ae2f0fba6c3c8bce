use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[design]
n = 3
osr = 8.0

[training]
periods = 8192

[calibration]
taps = 64

[analysis]
nfft = 4096
segments = 2

[adaptive_taps]
enabled = false

[montecarlo]
trials = 6
workers = 1
"#;

fn qcbadc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcbadc"))
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn design_document_holds_the_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = qcbadc(&["design", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("design.json"));
    let f = |k: &str| doc[k].as_f64().unwrap();
    let omega_b = std::f64::consts::PI / 8.0;
    assert_eq!(doc["n"], 6);
    assert!((f("beta") - 0.5).abs() < 1e-15);
    assert!((f("omega_b") - omega_b).abs() < 1e-15);
    assert!((f("alpha") + omega_b * omega_b / 2.0).abs() < 1e-15);
    assert!((f("omega_n") - std::f64::consts::PI / 4.0).abs() < 1e-15);
    assert!((f("f_test") - (0.125 - omega_b / (8.0 * std::f64::consts::PI))).abs() < 1e-15);
    let a = doc["a"].as_array().unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a[6][0].as_f64().unwrap(), f("omega_n"));
    let back: qcbadc::pipeline::DesignDocument = serde_json::from_value(doc.clone()).unwrap();
    assert_eq!(serde_json::to_value(&back).unwrap(), doc);
    let prov = json(&out.join("provenance.json"));
    assert_eq!(prov["command"], "design");
    assert_eq!(prov["config"]["design"]["n"], 6);
}

#[test]
fn invalid_osr_exits_with_validation_code() {
    let o = qcbadc(&["design", "--osr", "0.5", "-o", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = qcbadc(&[
        "design",
        "--set",
        "design.orderr=4",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[desing]\nn = 4\n").unwrap();
    let o = qcbadc(&["design", "-c", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn set_and_flags_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("o");
    let o = qcbadc(&[
        "design",
        "-c",
        &cfg,
        "--set",
        "design.n=5",
        "--set",
        "design.n=7",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(json(&out.join("design.json"))["n"], 7);
    let o = qcbadc(&[
        "design",
        "-c",
        &cfg,
        "--set",
        "design.n=7",
        "--order",
        "4",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(json(&out.join("design.json"))["n"], 4);
}

#[test]
fn coeff_sweep_first_row_is_the_zero_notch_limit() {
    let dir = tempfile::tempdir().unwrap();
    let o = qcbadc(&[
        "coeff-sweep",
        "--points",
        "64",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("coefficients.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "fpT,kappa,bar_kappa,tilde_kappa,bar_tilde_kappa"
    );
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row, vec![0.0, 0.5, 0.0, -2.0, 0.0]);
    assert_eq!(text.lines().count(), 65);
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = qcbadc(&["run", "-c", &cfg, "-o", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in [
        "trace.qcbt",
        "filter.qcbf",
        "estimate.csv",
        "spectrum.csv",
        "report.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let trace =
        qcbadc::sim::ControlTrace::read_packed(std::fs::File::open(a.join("trace.qcbt")).unwrap())
            .unwrap();
    assert_eq!(trace.channels(), 6);
    let report = json(&a.join("report.json"));
    assert!(report["snr_db"].as_f64().unwrap() > 30.0);
}

#[test]
fn montecarlo_resumes_from_a_torn_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("mc");
    let o = qcbadc(&["montecarlo", "-c", &cfg, "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("unstable: 0"));
    let full = std::fs::read(out.join("mc.csv")).unwrap();

    let ck = std::fs::read_to_string(out.join("checkpoint.jsonl")).unwrap();
    let lines: Vec<&str> = ck.lines().collect();
    assert_eq!(lines.len(), 6);
    let torn = format!(
        "{}\n{}\n{}",
        lines[0],
        lines[1],
        &lines[2][..lines[2].len() / 2]
    );
    std::fs::write(out.join("checkpoint.jsonl"), torn).unwrap();
    std::fs::remove_file(out.join("mc.csv")).unwrap();

    let o = qcbadc(&["montecarlo", "-c", &cfg, "-o", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("resuming: 2 trial(s)"));
    assert_eq!(std::fs::read(out.join("mc.csv")).unwrap(), full);
    assert_eq!(
        std::fs::read_to_string(out.join("checkpoint.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    // A different perturbation invalidates the checkpoint.
    let o = qcbadc(&[
        "montecarlo",
        "-c",
        &cfg,
        "--set",
        "montecarlo.p=0.05",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stdout).contains("resuming"));
    for name in [
        "hist_snr.csv",
        "hist_fhat.csv",
        "report.json",
        "provenance.json",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn selftest_passes() {
    let o = qcbadc(&["selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}
