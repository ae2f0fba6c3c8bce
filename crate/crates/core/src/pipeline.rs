//! End-to-end conversion experiment: design, simulate a training run, calibrate the
//! estimator, simulate a test run, reconstruct and measure.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    estimate_notch, psd, snr_in_band, NotchConfig, NotchMethod, SnrReport, Spectrum, Window,
};
use crate::control::{synthesize_control, ControlCoefficients};
use crate::error::{Error, Result};
use crate::estimator::{calibrate_from, estimate, CalibrationConfig, FirEstimator, SolveStats};
use crate::frontend::{rows, AnalogFrontend};
use crate::sim::{simulate_frontend, ControlTrace, InputKind, InputSignal, SimConfig};
use crate::system::{
    design_lowpass, quadrature_transform, DesignSpec, LowpassLeapfrog, QuadratureSystem,
};

/// Which system converts the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// The quadrature band-pass around `f_notch`, complex input.
    #[default]
    Quadrature,
    /// The real low-pass building block (the notch is ignored), real input.
    Lowpass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestSignalConfig {
    /// Amplitude relative to `v_fs`.
    pub amplitude: f64,
    /// Hz; defaults to the design's test frequency.
    pub frequency: Option<f64>,
    pub phase: f64,
    /// Move the tone to the nearest FFT bin centre.
    pub snap_to_bin: bool,
}

impl Default for TestSignalConfig {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            frequency: None,
            phase: 0.0,
            snap_to_bin: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Training run length; raised automatically to the calibration minimum.
    pub periods: usize,
    /// Number of tones spread across the band; by default enough for a spacing of at most
    /// `fs / (2 Kh)`.
    pub tones: Option<usize>,
    /// Envelope peak relative to `v_fs`.
    pub peak: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            periods: 1 << 16,
            tones: None,
            peak: 0.9,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub nfft: usize,
    /// PSD segments averaged in the test run.
    pub segments: usize,
    pub window: Window,
    /// Signal guard bins per side.
    pub guard: usize,
    /// SNR band width in Hz; defaults to `fs / OSR`, i.e. the low-pass band `+-omega_b/2pi`
    /// moved to the notch.
    pub bandwidth: Option<f64>,
    pub notch_method: NotchMethod,
    /// Running-mean width for the smoothed-minimum notch search; defaults to half the band
    /// in bins.
    pub notch_smoothing_bins: Option<usize>,
    pub notch_fit_half_width: usize,
    pub notch_min_depth_db: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            nfft: 1 << 14,
            segments: 4,
            window: Window::Hann,
            guard: 3,
            bandwidth: None,
            notch_method: NotchMethod::Symmetry,
            notch_smoothing_bins: None,
            notch_fit_half_width: 8,
            notch_min_depth_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveTaps {
    pub enabled: bool,
    /// Stop once doubling the taps moves the SNR by less than this.
    pub tolerance_db: f64,
    pub max_taps: usize,
}

impl Default for AdaptiveTaps {
    fn default() -> Self {
        Self {
            enabled: true,
            tolerance_db: 0.5,
            max_taps: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub topology: Topology,
    pub test: TestSignalConfig,
    pub training: TrainingConfig,
    /// Integration settings shared by both runs; `periods` is derived and ignored.
    pub sim: SimConfig,
    pub calibration: CalibrationConfig,
    pub analysis: AnalysisConfig,
    pub adaptive_taps: AdaptiveTaps,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Quadrature,
            test: TestSignalConfig::default(),
            training: TrainingConfig::default(),
            sim: SimConfig::default(),
            calibration: CalibrationConfig::default(),
            analysis: AnalysisConfig::default(),
            adaptive_taps: AdaptiveTaps::default(),
        }
    }
}

/// Nominal analog system and controls for a design.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalDesign {
    pub spec: DesignSpec,
    pub lowpass: LowpassLeapfrog,
    pub quadrature: QuadratureSystem,
    pub control: ControlCoefficients,
    /// Controls of the low-pass building block (`omega_n = 0`, `phi = 0`).
    pub lowpass_control: ControlCoefficients,
}

pub fn nominal_design(spec: &DesignSpec) -> Result<NominalDesign> {
    let lowpass = design_lowpass(spec)?;
    if !lowpass.superposition_ok() {
        return Err(Error::Synthesis("2 beta T exceeds 1".into()));
    }
    let quadrature = quadrature_transform(&lowpass, spec.omega_n())?;
    let control = synthesize_control(
        lowpass.beta,
        spec.omega_n(),
        lowpass.t,
        spec.phi_kappa,
        spec.tau_dc,
    )?;
    let lowpass_control = synthesize_control(lowpass.beta, 0.0, lowpass.t, 0.0, spec.tau_dc)?;
    Ok(NominalDesign {
        spec: *spec,
        lowpass,
        quadrature,
        control,
        lowpass_control,
    })
}

impl NominalDesign {
    pub fn frontend(&self, topology: Topology) -> AnalogFrontend {
        match topology {
            Topology::Quadrature => AnalogFrontend::quadrature(&self.quadrature, &self.control),
            Topology::Lowpass => AnalogFrontend::lowpass(&self.lowpass, &self.lowpass_control),
        }
    }
}

/// Full parametrization of a design, as written by the `design` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignDocument {
    pub n: usize,
    pub osr: f64,
    pub fs: f64,
    #[serde(rename = "fn")]
    pub f_n: f64,
    pub beta: f64,
    pub alpha: f64,
    pub omega_b: f64,
    pub omega_n: f64,
    pub v_fs: f64,
    /// Resolved test tone `f_n - omega_b / (8 pi)` before bin snapping, Hz.
    pub f_test: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub control: ControlCoefficients,
}

impl NominalDesign {
    pub fn document(&self) -> DesignDocument {
        DesignDocument {
            n: self.spec.n,
            osr: self.spec.osr,
            fs: self.spec.fs,
            f_n: self.spec.f_notch,
            beta: self.lowpass.beta,
            alpha: self.lowpass.alpha,
            omega_b: self.lowpass.omega_b,
            omega_n: self.quadrature.omega_n,
            v_fs: self.spec.v_fs,
            f_test: self.spec.test_frequency(),
            a: rows(&self.quadrature.a),
            b: rows(&self.quadrature.b),
            control: self.control,
        }
    }
}

/// Where the band and test tone sit for a given design, topology and analysis setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Operating {
    pub center: f64,
    pub bandwidth: f64,
    pub f_test: f64,
}

pub fn operating_point(spec: &DesignSpec, cfg: &PipelineConfig) -> Result<Operating> {
    let center = match cfg.topology {
        Topology::Quadrature => spec.f_notch,
        Topology::Lowpass => 0.0,
    };
    let bandwidth = cfg.analysis.bandwidth.unwrap_or(spec.fs / spec.osr);
    let nominal = match cfg.topology {
        Topology::Quadrature => spec.test_frequency(),
        Topology::Lowpass => spec.bandwidth_hz() / 4.0,
    };
    let mut f_test = cfg.test.frequency.unwrap_or(nominal);
    if cfg.test.snap_to_bin {
        let df = spec.fs / cfg.analysis.nfft as f64;
        f_test = (f_test / df).round() * df;
    }
    if !((center - bandwidth / 2.0)..=(center + bandwidth / 2.0)).contains(&f_test) {
        return Err(Error::InvalidConfig(format!(
            "test tone {f_test} Hz is outside the conversion band"
        )));
    }
    Ok(Operating {
        center,
        bandwidth,
        f_test,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub operating: Operating,
    pub snr: SnrReport,
    /// `Err` carries why no notch was found.
    pub f_hat_n: std::result::Result<f64, Error>,
    pub taps: usize,
    pub solve: SolveStats,
    pub max_state: f64,
    pub filter: FirEstimator,
    pub test_trace: ControlTrace,
    pub estimate: Vec<Complex64>,
    pub spectrum: Spectrum,
    /// `(taps, snr_db)` for every calibration tried.
    pub tap_history: Vec<(usize, f64)>,
}

fn input_kind(topology: Topology) -> InputKind {
    match topology {
        Topology::Quadrature => InputKind::Quadrature,
        Topology::Lowpass => InputKind::InPhase,
    }
}

fn run_sim(
    frontend: &AnalogFrontend,
    input: &InputSignal,
    base: &SimConfig,
    periods: usize,
    stage: &str,
) -> Result<(ControlTrace, f64)> {
    let cfg = SimConfig {
        periods,
        ..base.clone()
    };
    let out = simulate_frontend(frontend, input, &cfg).map_err(|e| label(stage, e))?;
    if !out.stable {
        return Err(Error::Unstable {
            max_state: out.max_state_inf_norm,
        });
    }
    Ok((out.trace, out.max_state_inf_norm))
}

fn label(stage: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(m) => Error::InvalidConfig(format!("{stage}: {m}")),
        other => other,
    }
}

/// Runs the experiment on the nominal design.
pub fn run(spec: &DesignSpec, cfg: &PipelineConfig) -> Result<PipelineResult> {
    let design = nominal_design(spec)?;
    run_frontend(spec, &design.frontend(cfg.topology), cfg)
}

/// Runs the experiment on a given (possibly perturbed) frontend built for `spec`.
pub fn run_frontend(
    spec: &DesignSpec,
    frontend: &AnalogFrontend,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    run_frontend_from(spec, frontend, cfg, None)
}

/// Like [`run_frontend`], seeding the tap solver with `warm` (used when its length matches).
pub fn run_frontend_from(
    spec: &DesignSpec,
    frontend: &AnalogFrontend,
    cfg: &PipelineConfig,
    warm: Option<&FirEstimator>,
) -> Result<PipelineResult> {
    spec.validate()?;
    let op = operating_point(spec, cfg)?;
    let kind = input_kind(cfg.topology);
    let v_fs = spec.v_fs;
    let sim_base = SimConfig {
        v_fs,
        ..cfg.sim.clone()
    };
    let channels = frontend.channels();
    let max_taps = if cfg.adaptive_taps.enabled {
        cfg.adaptive_taps.max_taps.max(cfg.calibration.taps)
    } else {
        cfg.calibration.taps
    };
    let half_band = op.bandwidth / 2.0;
    let nfft = cfg.analysis.nfft;
    let used = nfft * cfg.analysis.segments.max(1);
    let test_periods = used + max_taps;
    let test_input = match kind {
        InputKind::Quadrature => {
            InputSignal::quadrature_tone(cfg.test.amplitude * v_fs, op.f_test, cfg.test.phase)
        }
        _ => InputSignal::real_tone(cfg.test.amplitude * v_fs, op.f_test, cfg.test.phase),
    };
    let (test_trace, test_max) =
        run_sim(frontend, &test_input, &sim_base, test_periods, "test run")?;

    let tones: Vec<f64> = match cfg.topology {
        Topology::Quadrature => vec![op.f_test],
        Topology::Lowpass => vec![op.f_test, -op.f_test],
    };
    let mut train_max = 0.0f64;
    let mut measure = |taps: usize| -> Result<(
        FirEstimator,
        SolveStats,
        Vec<Complex64>,
        Spectrum,
        SnrReport,
    )> {
        let train_periods = cfg.training.periods.max(4 * channels * taps);
        // Tone spacing at most fs / (2 taps) pins the filter response across the band.
        let count = cfg.training.tones.unwrap_or_else(|| {
            ((2.0 * taps as f64 * op.bandwidth / spec.fs).ceil() as usize + 1).max(16)
        });
        let training = InputSignal::multitone(
            op.center,
            half_band,
            count,
            cfg.training.peak * v_fs,
            cfg.training.seed,
            kind,
            spec.period(),
            train_periods,
        );
        let (train_trace, peak) = run_sim(
            frontend,
            &training,
            &sim_base,
            train_periods,
            "training run",
        )?;
        train_max = train_max.max(peak);
        let (u, ub) = training.samples(train_periods, spec.period());
        let reference: (Vec<f64>, Vec<f64>) = match kind {
            InputKind::Quadrature => (u, ub),
            InputKind::InPhase => (u, vec![0.0; train_periods]),
            InputKind::QuadraturePhase => (ub, vec![0.0; train_periods]),
        };
        let cal = CalibrationConfig {
            taps,
            ..cfg.calibration.clone()
        };
        let (filter, stats) =
            calibrate_from(&train_trace, (&reference.0, &reference.1), &cal, warm)?;
        // Align every tap count on the same test window.
        let skip = (max_taps - taps) / 2;
        let trace = test_trace.slice(skip..skip + used + taps);
        let est = estimate(&trace, &filter)?;
        let spectrum = psd(&est, nfft, cfg.analysis.window, spec.fs)?;
        let snr = snr_in_band(
            &spectrum,
            op.center,
            op.bandwidth,
            &tones,
            cfg.analysis.guard,
        )?;
        Ok((filter, stats, est, spectrum, snr))
    };

    let mut taps = cfg.calibration.taps;
    let mut current = measure(taps)?;
    let mut history = vec![(taps, current.4.snr_db)];
    while cfg.adaptive_taps.enabled && taps * 2 <= max_taps {
        // A longer filter the solver cannot fit ends the search like a settled one.
        let next = match measure(taps * 2) {
            Ok(next) => next,
            Err(Error::NotConverged { .. }) => break,
            Err(e) => return Err(e),
        };
        history.push((taps * 2, next.4.snr_db));
        if next.4.snr_db < current.4.snr_db + cfg.adaptive_taps.tolerance_db {
            break;
        }
        taps *= 2;
        current = next;
    }
    let (filter, solve, est, spectrum, snr) = current;

    let smoothing = cfg
        .analysis
        .notch_smoothing_bins
        .unwrap_or_else(|| ((op.bandwidth / spectrum.df()) / 2.0).round().max(1.0) as usize);
    let notch_cfg = NotchConfig {
        smoothing_bins: smoothing,
        fit_half_width: cfg.analysis.notch_fit_half_width,
        min_depth_db: cfg.analysis.notch_min_depth_db,
        method: cfg.analysis.notch_method,
        ..NotchConfig::default()
    };
    let f_hat_n = estimate_notch(
        &spectrum,
        &snr.signal_bins,
        Some((op.center - half_band, op.center + half_band)),
        &notch_cfg,
    );

    Ok(PipelineResult {
        operating: op,
        snr,
        f_hat_n,
        taps,
        solve,
        max_state: train_max.max(test_max),
        filter,
        test_trace: test_trace.slice((max_taps - taps) / 2..(max_taps - taps) / 2 + used + taps),
        estimate: est,
        spectrum,
        tap_history: history,
    })
}
