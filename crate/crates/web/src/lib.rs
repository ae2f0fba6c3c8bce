//! Browser demo: control coefficient curves, pole map and a short end-to-end PSD.
//!
//! The plain functions are usable natively; the `#[wasm_bindgen]` wrappers convert errors.

use std::f64::consts::PI;

use qcbadc::control::synthesize_control;
use qcbadc::estimator::CalibrationConfig;
use qcbadc::pipeline::{self, AdaptiveTaps, AnalysisConfig, PipelineConfig, TrainingConfig};
use qcbadc::system::{design_lowpass, quadrature_transform, DesignSpec};
use wasm_bindgen::prelude::*;

/// Rows of `fpT, kappa, bar_kappa, tilde_kappa, bar_tilde_kappa` flattened, `T = 1`.
pub fn coefficient_rows(beta_t: f64, phi_kappa: f64, points: usize) -> Result<Vec<f64>, String> {
    let mut out = Vec::with_capacity(5 * points);
    for i in 0..points {
        let fpt = 0.5 * i as f64 / points as f64;
        let c = synthesize_control(beta_t, 2.0 * PI * fpt, 1.0, phi_kappa, 0.0)
            .map_err(|e| e.to_string())?;
        out.extend([fpt, c.kappa_phi, c.kbar_phi, c.ktilde_phi, c.kbar_tilde_phi]);
    }
    Ok(out)
}

/// Poles of the low-pass prototype and of the quadrature system, in units of `fs`, as
/// interleaved `re, im` pairs: the first `2N` numbers are the prototype.
pub fn poles(n: usize, osr: f64, f_notch: f64) -> Result<Vec<f64>, String> {
    let spec = DesignSpec::new(n, osr, 1.0, f_notch);
    spec.validate().map_err(|e| e.to_string())?;
    let lp = design_lowpass(&spec).map_err(|e| e.to_string())?;
    let proto = quadrature_transform(&lp, 0.0).map_err(|e| e.to_string())?;
    let quad = quadrature_transform(&lp, spec.omega_n()).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(6 * n);
    // The prototype eigenvalues appear twice in the decoupled system; keep one copy.
    let mut lp_eigs = proto.eigenvalues();
    lp_eigs.sort_by(|a, b| a.im.total_cmp(&b.im));
    for z in lp_eigs.iter().step_by(2) {
        out.extend([z.re / (2.0 * PI), z.im / (2.0 * PI)]);
    }
    for z in quad.eigenvalues() {
        out.extend([z.re / (2.0 * PI), z.im / (2.0 * PI)]);
    }
    Ok(out)
}

/// Outcome of a short design, simulate, calibrate and estimate run.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct PsdDemo {
    snr_db: f64,
    f_hat_n: f64,
    f_test: f64,
    freqs: Vec<f64>,
    db: Vec<f64>,
}

#[wasm_bindgen]
impl PsdDemo {
    #[wasm_bindgen(getter)]
    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    /// NaN when no notch was found.
    #[wasm_bindgen(getter)]
    pub fn f_hat_n(&self) -> f64 {
        self.f_hat_n
    }

    #[wasm_bindgen(getter)]
    pub fn f_test(&self) -> f64 {
        self.f_test
    }

    #[wasm_bindgen(getter)]
    pub fn freqs(&self) -> Vec<f64> {
        self.freqs.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn db(&self) -> Vec<f64> {
        self.db.clone()
    }
}

/// Small enough to finish in about a second in the browser.
pub fn demo_config(taps: usize) -> PipelineConfig {
    PipelineConfig {
        training: TrainingConfig {
            periods: 1 << 14,
            ..TrainingConfig::default()
        },
        calibration: CalibrationConfig {
            taps,
            ..CalibrationConfig::default()
        },
        analysis: AnalysisConfig {
            nfft: 4096,
            segments: 2,
            ..AnalysisConfig::default()
        },
        adaptive_taps: AdaptiveTaps {
            enabled: false,
            ..AdaptiveTaps::default()
        },
        ..PipelineConfig::default()
    }
}

pub fn psd_demo(n: usize, osr: f64, f_notch: f64, taps: usize) -> Result<PsdDemo, String> {
    let spec = DesignSpec::new(n, osr, 1.0, f_notch);
    let r = pipeline::run(&spec, &demo_config(taps)).map_err(|e| e.to_string())?;
    Ok(PsdDemo {
        snr_db: r.snr.snr_db,
        f_hat_n: r.f_hat_n.unwrap_or(f64::NAN),
        f_test: r.operating.f_test,
        freqs: r.spectrum.frequencies(),
        db: r
            .spectrum
            .psd
            .iter()
            .map(|p| 10.0 * p.max(1e-30).log10())
            .collect(),
    })
}

#[wasm_bindgen(js_name = coefficientRows)]
pub fn coefficient_rows_js(
    beta_t: f64,
    phi_kappa: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    coefficient_rows(beta_t, phi_kappa, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = poles)]
pub fn poles_js(n: usize, osr: f64, f_notch: f64) -> Result<Vec<f64>, JsError> {
    poles(n, osr, f_notch).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = psdDemo)]
pub fn psd_demo_js(n: usize, osr: f64, f_notch: f64, taps: usize) -> Result<PsdDemo, JsError> {
    psd_demo(n, osr, f_notch, taps).map_err(|e| JsError::new(&e))
}
