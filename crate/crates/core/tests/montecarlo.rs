use qcbadc::montecarlo::{perturb, run_mc, run_mc_resumable, McConfig, PerturbationSpec};
use qcbadc::pipeline::{nominal_design, PipelineConfig, Topology};
use qcbadc::system::DesignSpec;
use std::sync::Mutex;

fn spec() -> DesignSpec {
    DesignSpec::new(3, 8.0, 1.0, 0.125)
}

fn small(trials: usize, p: f64) -> McConfig {
    let mut pipeline = PipelineConfig::default();
    pipeline.calibration.taps = 64;
    pipeline.adaptive_taps.enabled = false;
    pipeline.training.periods = 1 << 13;
    pipeline.analysis.nfft = 1 << 12;
    pipeline.analysis.segments = 2;
    McConfig {
        trials,
        perturbation: PerturbationSpec { p, seed: 77 },
        workers: Some(1),
        pipeline,
    }
}

#[test]
fn zero_width_trials_equal_nominal() {
    let r = run_mc(&spec(), &small(4, 0.0)).unwrap();
    assert_eq!(r.unstable, 0);
    for t in &r.trials {
        assert_eq!(t.snr_db, Some(r.nominal_snr_db));
        assert_eq!(t.f_hat_n, r.nominal_f_hat_n);
    }
    assert_eq!(r.snr_range, Some((0.0, 0.0)));
    let (lo, hi) = r.f_hat_range.unwrap();
    assert_eq!(lo, hi);
}

#[test]
fn batch_is_independent_of_workers_and_resumable() {
    let one = run_mc(&spec(), &small(6, 0.1)).unwrap();
    let two = run_mc(
        &spec(),
        &McConfig {
            workers: Some(3),
            ..small(6, 0.1)
        },
    )
    .unwrap();
    assert_eq!(one, two);

    let seen = Mutex::new(Vec::new());
    let partial = run_mc_resumable(&spec(), &small(3, 0.1), &[], |t| {
        seen.lock().unwrap().push(t.clone())
    })
    .unwrap();
    assert_eq!(seen.lock().unwrap().len(), 3);
    let calls = Mutex::new(0);
    let resumed = run_mc_resumable(&spec(), &small(6, 0.1), &partial.trials, |_| {
        *calls.lock().unwrap() += 1
    })
    .unwrap();
    assert_eq!(*calls.lock().unwrap(), 3);
    assert_eq!(resumed, one);
}

#[test]
fn perturbed_beta_is_uniform() {
    let nominal = nominal_design(&spec())
        .unwrap()
        .frontend(Topology::Quadrature);
    // B holds beta once per branch; take the first.
    let beta = nominal.b[(0, 0)];
    let s = PerturbationSpec { p: 0.1, seed: 5 };
    let draws: Vec<f64> = (0..10_000)
        .map(|i| perturb(&nominal, &s, i).frontend.b[(0, 0)] / beta)
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let min = draws.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    assert!((min - 0.9).abs() < 0.01 * 0.9 && min >= 0.9, "{min}");
    assert!((max - 1.1).abs() < 0.01 * 1.1 && max <= 1.1, "{max}");
}

fn median_abs_delta(p: f64) -> f64 {
    let r = run_mc(&spec(), &small(64, p)).unwrap();
    let mut d: Vec<f64> = r.snr_deltas().iter().map(|v| v.abs()).collect();
    // Unstable trials count as the largest possible deviation.
    d.extend(std::iter::repeat_n(f64::INFINITY, r.unstable));
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

#[test]
fn wider_perturbation_spreads_snr_more() {
    let (narrow, wide) = (median_abs_delta(0.02), median_abs_delta(0.10));
    assert!(wide >= narrow, "{wide} < {narrow}");
}

#[test]
fn lowpass_batch_runs() {
    let mut cfg = small(4, 0.1);
    cfg.pipeline.topology = Topology::Lowpass;
    let r = run_mc(&spec(), &cfg).unwrap();
    assert_eq!(r.trials.len(), 4);
    assert!(r
        .trials
        .iter()
        .all(|t| t.stable == t.snr_db.is_some() || t.error.is_some()));
}
