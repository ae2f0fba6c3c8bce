use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use num_complex::Complex64;
use qcbadc::analysis::{psd, Window};
use qcbadc::control::synthesize_control;
use qcbadc::estimator::FirEstimator;
use qcbadc::montecarlo::{read_checkpoint, run_mc_resumable, write_checkpoint_line, Histogram};
use qcbadc::pipeline::{self, nominal_design, PipelineResult};
use qcbadc::sim::{simulate_frontend, ControlTrace, InputSignal, SimConfig};
use qcbadc::system::{design_lowpass, quadrature_transform, DesignSpec};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::CliError;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::other)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn provenance(cfg: &ExperimentConfig, command: &str, seed: u64) -> serde_json::Value {
    json!({
        "tool": "qcbadc",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config": cfg,
    })
}

fn prepare<'a>(cfg: &'a ExperimentConfig, command: &str, seed: u64) -> Result<&'a Path, CliError> {
    let dir = cfg.output.as_path();
    fs::create_dir_all(dir)?;
    write_json(dir, "provenance.json", &provenance(cfg, command, seed))?;
    Ok(dir)
}

fn f_hat(r: &PipelineResult) -> Option<f64> {
    r.f_hat_n.as_ref().ok().copied()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.12e}"))
}

pub fn design(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let doc = nominal_design(&spec)?.document();
    let op = pipeline::operating_point(&spec, &cfg.pipeline()?)?;
    let dir = prepare(cfg, "design", cfg.training.seed)?;
    write_json(dir, "design.json", &doc)?;
    println!(
        "N = {}, OSR = {}, fs = {} Hz, f_n = {} Hz",
        doc.n, doc.osr, doc.fs, doc.f_n
    );
    println!("beta = {:.9e}, alpha = {:.9e}", doc.beta, doc.alpha);
    println!(
        "omega_B = {:.9e} rad/s, omega_n = {:.9e} rad/s",
        doc.omega_b, doc.omega_n
    );
    let c = &doc.control;
    println!("kappa = ({:.9e}, {:.9e}) 1/s", c.kappa_phi, c.kbar_phi);
    println!(
        "kappa_tilde = ({:.9e}, {:.9e})",
        c.ktilde_phi, c.kbar_tilde_phi
    );
    println!(
        "f_test = {:.9e} Hz (analysis tone {:.9e} Hz)",
        doc.f_test, op.f_test
    );
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    f_n: f64,
    center: f64,
    bandwidth: f64,
    f_test: f64,
    snr_db: f64,
    signal_power: f64,
    noise_power: f64,
    band: (f64, f64),
    f_hat_n: Option<f64>,
    f_hat_error: Option<String>,
    taps: usize,
    tap_history: &'a [(usize, f64)],
    solver_iterations: usize,
    solver_residual: f64,
    ridge: f64,
    max_state: f64,
}

fn report<'a>(spec: &DesignSpec, r: &'a PipelineResult) -> RunReport<'a> {
    RunReport {
        f_n: spec.f_notch,
        center: r.operating.center,
        bandwidth: r.operating.bandwidth,
        f_test: r.operating.f_test,
        snr_db: r.snr.snr_db,
        signal_power: r.snr.signal_power,
        noise_power: r.snr.noise_power,
        band: r.snr.band,
        f_hat_n: f_hat(r),
        f_hat_error: r.f_hat_n.as_ref().err().map(|e| e.to_string()),
        taps: r.taps,
        tap_history: &r.tap_history,
        solver_iterations: r.solve.iterations,
        solver_residual: r.solve.residual,
        ridge: r.solve.lambda,
        max_state: r.max_state,
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let pipe = cfg.pipeline()?;
    let dir = prepare(cfg, "run", cfg.training.seed)?;
    let r = pipeline::run(&spec, &pipe)?;

    write_json(dir, "design.json", &nominal_design(&spec)?.document())?;
    let mut w = create(dir, "trace.qcbt")?;
    r.test_trace.write_packed(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "filter.qcbf")?;
    r.filter.write_binary(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "filter.csv")?;
    r.filter.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "estimate.csv")?;
    writeln!(w, "k,u_hat,ubar_hat")?;
    for (k, z) in r.estimate.iter().enumerate() {
        writeln!(w, "{k},{:e},{:e}", z.re, z.im)?;
    }
    w.flush()?;
    let mut w = create(dir, "spectrum.csv")?;
    r.spectrum.write_csv(&mut w, false)?;
    w.flush()?;
    let mut w = create(dir, "spectrum_positive.csv")?;
    r.spectrum.write_csv(&mut w, true)?;
    w.flush()?;
    write_json(dir, "report.json", &report(&spec, &r))?;

    println!("f_test = {:.9e} Hz", r.operating.f_test);
    println!(
        "SNR = {:.2} dB ({} taps, {} solver iterations)",
        r.snr.snr_db, r.taps, r.solve.iterations
    );
    match &r.f_hat_n {
        Ok(f) => println!(
            "f_hat_n = {f:.9e} Hz ({:+.3}% from f_n)",
            100.0 * (f / spec.f_notch - 1.0)
        ),
        Err(e) => println!("f_hat_n: none ({e})"),
    }
    Ok(())
}

pub fn sweep_notch(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pipe = cfg.pipeline()?;
    let notches = cfg.notches_hz();
    let dir = prepare(cfg, "sweep-notch", cfg.training.seed)?;
    let mut table = create(dir, "sweep.csv")?;
    writeln!(table, "f_notch,snr_db,f_hat_n,taps")?;
    for (i, &f) in notches.iter().enumerate() {
        let spec = cfg.spec_at(Some(f))?;
        let mut p = pipe.clone();
        // A configured test tone belongs to the configured notch only.
        p.test.frequency = None;
        let r = pipeline::run(&spec, &p)?;
        writeln!(
            table,
            "{f:.12e},{:.6},{},{}",
            r.snr.snr_db,
            fmt_opt(f_hat(&r)),
            r.taps
        )?;
        let mut w = create(dir, &format!("spectrum_{i}.csv"))?;
        r.spectrum.write_csv(&mut w, false)?;
        w.flush()?;
        println!(
            "f_n = {f:.6e} Hz: SNR = {:.2} dB, f_hat_n = {}",
            r.snr.snr_db,
            f_hat(&r).map_or("none".to_string(), |v| format!("{v:.6e} Hz"))
        );
    }
    table.flush()?;
    Ok(())
}

pub fn coeff_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let c = &cfg.coeff;
    let t = 1.0 / cfg.fs();
    let beta = c.beta_t / t;
    let dir = prepare(cfg, "coeff-sweep", 0)?;
    let mut w = create(dir, "coefficients.csv")?;
    writeln!(w, "fpT,kappa,bar_kappa,tilde_kappa,bar_tilde_kappa")?;
    for i in 0..c.points {
        let fpt = 0.5 * i as f64 / c.points as f64;
        let k = synthesize_control(
            beta,
            2.0 * PI * fpt / t,
            t,
            c.phi_kappa,
            cfg.design.tau_dc * t,
        )?;
        writeln!(
            w,
            "{fpt:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            k.kappa_phi, k.kbar_phi, k.ktilde_phi, k.kbar_tilde_phi
        )?;
    }
    w.flush()?;
    println!(
        "{} rows written to {}",
        c.points,
        dir.join("coefficients.csv").display()
    );
    Ok(())
}

/// The parts of the config that decide trial results; a checkpoint is reused only when
/// these match.
fn mc_identity(cfg: &ExperimentConfig) -> serde_json::Value {
    let mut c = cfg.clone();
    c.montecarlo.workers = None;
    c.montecarlo.trials = 0;
    c.montecarlo.snr_bins = Default::default();
    c.montecarlo.notch_bins = Default::default();
    serde_json::to_value(c).unwrap_or_default()
}

pub fn montecarlo(cfg: &ExperimentConfig, fresh: bool) -> Result<(), CliError> {
    let spec = cfg.spec()?;
    let mc = cfg.mc()?;
    let dir = cfg.output.as_path();
    fs::create_dir_all(dir)?;
    let checkpoint = dir.join("checkpoint.jsonl");
    let prov_path = dir.join("provenance.json");

    let resumable = !fresh
        && checkpoint.exists()
        && fs::read_to_string(&prov_path)
            .ok()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .and_then(|v| serde_json::from_value::<ExperimentConfig>(v["config"].clone()).ok())
            .is_some_and(|old| mc_identity(&old) == mc_identity(cfg));
    let done = if resumable {
        read_checkpoint(BufReader::new(File::open(&checkpoint)?))?
    } else {
        Vec::new()
    };
    // Rewrite the checkpoint so a torn final line cannot corrupt later appends.
    {
        let mut w = create(dir, "checkpoint.jsonl")?;
        for t in &done {
            write_checkpoint_line(&mut w, t)?;
        }
        w.flush()?;
    }
    write_json(
        dir,
        "provenance.json",
        &provenance(cfg, "montecarlo", mc.perturbation.seed),
    )?;
    if !done.is_empty() {
        println!("resuming: {} trial(s) from checkpoint", done.len());
    }

    let sink = Mutex::new(OpenOptions::new().append(true).open(&checkpoint)?);
    let failed = Mutex::new(None::<std::io::Error>);
    let report = run_mc_resumable(&spec, &mc, &done, |t| {
        let mut f = sink.lock().unwrap();
        if let Err(e) = write_checkpoint_line(&mut *f, t) {
            failed.lock().unwrap().get_or_insert(e);
        }
    })?;
    if let Some(e) = failed.into_inner().unwrap() {
        return Err(e.into());
    }

    let mut w = create(dir, "mc.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let (lo, hi, width) = cfg.montecarlo.snr_bins;
    let mut w = create(dir, "hist_snr.csv")?;
    Histogram::new(&report.snr_deltas(), lo, hi, width)?.write_csv(&mut w)?;
    w.flush()?;
    let (lo, hi, width) = cfg.montecarlo.notch_bins;
    let mut w = create(dir, "hist_fhat.csv")?;
    Histogram::new(&report.notch_ratios(), lo, hi, width)?.write_csv(&mut w)?;
    w.flush()?;
    write_json(dir, "report.json", &report)?;

    println!(
        "nominal SNR = {:.2} dB ({} taps)",
        report.nominal_snr_db, report.taps
    );
    println!("trials: {}", report.trials.len());
    println!("unstable: {}", report.unstable);
    if let Some((a, b)) = report.snr_range {
        println!("SNR - nominal in [{a:.2}, {b:.2}] dB");
    }
    if let Some((a, b)) = report.f_hat_range {
        println!(
            "f_hat_n / f_n - 1 in [{:+.3}%, {:+.3}%]",
            100.0 * a,
            100.0 * b
        );
    }
    println!(
        "within [-3, +1] dB: {:.1}%",
        100.0 * report.fraction_snr_within(-3.0, 1.0)
    );
    println!(
        "notch within 6%: {:.1}%",
        100.0 * report.fraction_notch_within(0.06)
    );
    Ok(())
}

type Check = (&'static str, fn() -> Result<(), String>);

fn check_control_forms() -> Result<(), String> {
    for i in 1..=10 {
        let bt = 0.05 * i as f64;
        for j in 0..10 {
            let wt = 2.0 * PI * j as f64 / 10.0;
            for p in 0..8 {
                let phi = -PI + 2.0 * PI * p as f64 / 8.0;
                for d in 0..4 {
                    let tau = 0.25 * d as f64;
                    let c = synthesize_control(bt, wt, 1.0, phi, tau).map_err(|e| e.to_string())?;
                    let g = if wt == 0.0 {
                        bt
                    } else {
                        bt * wt / (2.0 * (wt / 2.0).sin())
                    };
                    let theta = wt * (0.5 + tau) - phi;
                    let errs = [
                        c.kappa_phi.hypot(c.kbar_phi) - g.abs(),
                        c.ktilde_phi.hypot(c.kbar_tilde_phi) - 1.0 / bt,
                        c.ktilde_phi * theta.sin() - c.kbar_tilde_phi * theta.cos(),
                        c.kappa_phi * phi.sin() - c.kbar_phi * phi.cos(),
                    ];
                    if errs
                        .iter()
                        .any(|e| e.abs() > 1e-12 * (1.0 + g.abs() + 1.0 / bt))
                    {
                        return Err(format!(
                            "betaT={bt} omega_nT={wt} phi={phi} tau={tau}: {errs:?}"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_zero_notch() -> Result<(), String> {
    let c = synthesize_control(0.5, 0.0, 1.0, 0.0, 0.0).map_err(|e| e.to_string())?;
    let got = (c.kappa_phi, c.kbar_phi, c.ktilde_phi, c.kbar_tilde_phi);
    if got != (0.5, 0.0, -2.0, 0.0) {
        return Err(format!("{got:?}"));
    }
    Ok(())
}

fn check_eigen_shift() -> Result<(), String> {
    for n in 1..=8 {
        let spec = DesignSpec::new(n, 8.0, 1.0, 0.125);
        let lp = design_lowpass(&spec).map_err(|e| e.to_string())?;
        let wn = spec.omega_n();
        let q = quadrature_transform(&lp, wn).map_err(|e| e.to_string())?;
        let mut got: Vec<(f64, f64)> = q.eigenvalues().iter().map(|z| (z.re, z.im)).collect();
        if got.len() != 2 * n {
            return Err(format!("N={n}: eigenvalues did not converge"));
        }
        let r = 2.0 * (lp.alpha * lp.beta).abs().sqrt();
        let mut want: Vec<(f64, f64)> = (1..=n)
            .flat_map(|k| {
                let im = r * (k as f64 * PI / (n + 1) as f64).cos();
                [(0.0, im + wn), (0.0, im - wn)]
            })
            .collect();
        let key = |a: &(f64, f64), b: &(f64, f64)| a.1.total_cmp(&b.1);
        got.sort_by(key);
        want.sort_by(key);
        let scale = r + wn;
        for (g, w) in got.iter().zip(&want) {
            if (g.0 - w.0).abs() > 1e-9 * scale || (g.1 - w.1).abs() > 1e-9 * scale {
                return Err(format!("N={n}: {g:?} vs {w:?}"));
            }
        }
    }
    Ok(())
}

fn check_parseval() -> Result<(), String> {
    let nfft = 1024;
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let x: Vec<_> = (0..nfft).map(|_| Complex64::new(next(), next())).collect();
    let s = psd(&x, nfft, Window::Rectangular, 1.0).map_err(|e| e.to_string())?;
    let energy: f64 = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / nfft as f64;
    let err = (s.total_power() - energy).abs() / energy;
    if err > 1e-9 {
        return Err(format!("relative error {err:e}"));
    }
    Ok(())
}

fn short_trace() -> Result<ControlTrace, String> {
    let spec = DesignSpec::new(4, 8.0, 1.0, 0.125);
    let f = nominal_design(&spec)
        .map_err(|e| e.to_string())?
        .frontend(pipeline::Topology::Quadrature);
    let input = InputSignal::quadrature_tone(0.5, spec.test_frequency(), 0.0);
    let out =
        simulate_frontend(&f, &input, &SimConfig::with_periods(2048)).map_err(|e| e.to_string())?;
    if !out.stable {
        return Err("nominal N=4 design unstable".into());
    }
    Ok(out.trace)
}

fn check_determinism() -> Result<(), String> {
    let (a, b) = (short_trace()?, short_trace()?);
    if a != b {
        return Err("two identical runs differ".into());
    }
    Ok(())
}

fn check_formats() -> Result<(), String> {
    let trace = short_trace()?;
    let mut buf = Vec::new();
    trace.write_packed(&mut buf).map_err(|e| e.to_string())?;
    if ControlTrace::read_packed(buf.as_slice()).map_err(|e| e.to_string())? != trace {
        return Err("packed trace round trip".into());
    }
    let mut f = FirEstimator::zeros(3, 8);
    for (i, v) in f.h.iter_mut().enumerate() {
        *v = (i as f64).sin() / 3.0;
    }
    let mut buf = Vec::new();
    f.write_binary(&mut buf).map_err(|e| e.to_string())?;
    if FirEstimator::read_binary(buf.as_slice()).map_err(|e| e.to_string())? != f {
        return Err("filter bank round trip".into());
    }
    Ok(())
}

pub fn selftest() -> Result<(), CliError> {
    let checks: [Check; 6] = [
        ("control coefficient closed forms", check_control_forms),
        ("zero-notch control endpoints", check_zero_notch),
        ("quadrature eigenvalue shift", check_eigen_shift),
        ("periodogram Parseval", check_parseval),
        ("simulation determinism", check_determinism),
        ("trace and filter formats", check_formats),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::SelfTest(failed));
    }
    Ok(())
}
