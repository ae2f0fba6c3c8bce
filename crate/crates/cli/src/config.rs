//! Experiment configuration file.
//!
//! Frequencies are in units of `fs` unless the key ends in `_hz`. Values are resolved in
//! this order, later wins: built-in defaults, the config file, `--set key=value` overrides
//! in the order given, then dedicated flags.

use std::path::{Path, PathBuf};

use qcbadc::analysis::{NotchMethod, Window};
use qcbadc::estimator::CalibrationConfig;
use qcbadc::montecarlo::{McConfig, PerturbationSpec};
use qcbadc::pipeline::{
    AdaptiveTaps, AnalysisConfig, PipelineConfig, TestSignalConfig, Topology, TrainingConfig,
};
use qcbadc::sim::SimConfig;
use qcbadc::system::DesignSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSection {
    pub n: usize,
    pub osr: f64,
    pub fs_hz: f64,
    pub f_notch: Option<f64>,
    pub f_notch_hz: Option<f64>,
    pub phi_kappa: f64,
    /// Quantizer delay in control periods.
    pub tau_dc: f64,
    pub v_fs: f64,
    pub topology: Topology,
}

impl Default for DesignSection {
    fn default() -> Self {
        Self {
            n: 6,
            osr: 8.0,
            fs_hz: 1.0,
            f_notch: None,
            f_notch_hz: None,
            phi_kappa: std::f64::consts::PI / 3.0,
            tau_dc: 0.0,
            v_fs: 1.0,
            topology: Topology::Quadrature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestSection {
    /// Relative to `v_fs`.
    pub amplitude: f64,
    pub frequency: Option<f64>,
    pub frequency_hz: Option<f64>,
    pub phase: f64,
    pub snap_to_bin: bool,
}

impl Default for TestSection {
    fn default() -> Self {
        let d = TestSignalConfig::default();
        Self {
            amplitude: d.amplitude,
            frequency: None,
            frequency_hz: None,
            phase: d.phase,
            snap_to_bin: d.snap_to_bin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub nfft: usize,
    pub segments: usize,
    pub window: Window,
    pub guard: usize,
    pub bandwidth: Option<f64>,
    pub bandwidth_hz: Option<f64>,
    pub notch_method: NotchMethod,
    pub notch_smoothing_bins: Option<usize>,
    pub notch_fit_half_width: usize,
    pub notch_min_depth_db: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let d = AnalysisConfig::default();
        Self {
            nfft: d.nfft,
            segments: d.segments,
            window: d.window,
            guard: d.guard,
            bandwidth: None,
            bandwidth_hz: None,
            notch_method: d.notch_method,
            notch_smoothing_bins: d.notch_smoothing_bins,
            notch_fit_half_width: d.notch_fit_half_width,
            notch_min_depth_db: d.notch_min_depth_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub trials: usize,
    pub p: f64,
    pub seed: u64,
    pub workers: Option<usize>,
    /// Histogram of SNR relative to nominal, dB.
    pub snr_bins: (f64, f64, f64),
    /// Histogram of `f_hat_n / f_n`.
    pub notch_bins: (f64, f64, f64),
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        let p = PerturbationSpec::default();
        Self {
            trials: 256,
            p: p.p,
            seed: p.seed,
            workers: None,
            snr_bins: (-10.0, 6.0, 0.5),
            notch_bins: (0.85, 1.15, 0.01),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub notches: Vec<f64>,
    pub notches_hz: Option<Vec<f64>>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            notches: vec![0.125, 0.25, 0.375],
            notches_hz: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoeffSection {
    /// `beta T`; the reference curves use 0.5.
    pub beta_t: f64,
    pub points: usize,
    pub phi_kappa: f64,
}

impl Default for CoeffSection {
    fn default() -> Self {
        Self {
            beta_t: 0.5,
            points: 256,
            phi_kappa: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub design: DesignSection,
    pub test: TestSection,
    pub training: TrainingConfig,
    pub sim: SimConfig,
    pub calibration: CalibrationConfig,
    pub analysis: AnalysisSection,
    pub adaptive_taps: AdaptiveTaps,
    pub montecarlo: MonteCarloSection,
    pub sweep: SweepSection,
    pub coeff: CoeffSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("qcbadc-out"),
            design: DesignSection::default(),
            test: TestSection::default(),
            training: TrainingConfig::default(),
            sim: SimConfig::default(),
            calibration: CalibrationConfig::default(),
            analysis: AnalysisSection::default(),
            adaptive_taps: AdaptiveTaps::default(),
            montecarlo: MonteCarloSection::default(),
            sweep: SweepSection::default(),
            coeff: CoeffSection::default(),
        }
    }
}

fn pick(rel: Option<f64>, hz: Option<f64>, fs: f64, key: &str) -> Result<Option<f64>, CliError> {
    match (rel, hz) {
        (Some(_), Some(_)) => Err(CliError::Validation(format!(
            "give {key} or {key}_hz, not both"
        ))),
        (Some(v), None) => Ok(Some(v * fs)),
        (None, hz) => Ok(hz),
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: &str) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(format!("bad key '{path}'")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("'{k}' in '{path}' is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(value));
    Ok(())
}

impl ExperimentConfig {
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read {}: {e}", p.display()))
                })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, v)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fs(&self) -> f64 {
        self.design.fs_hz
    }

    pub fn spec(&self) -> Result<DesignSpec, CliError> {
        self.spec_at(None)
    }

    /// The design with the notch replaced by `f_notch_hz` when given.
    pub fn spec_at(&self, f_notch_hz: Option<f64>) -> Result<DesignSpec, CliError> {
        let d = &self.design;
        let fs = d.fs_hz;
        let configured = pick(d.f_notch, d.f_notch_hz, fs, "design.f_notch")?.unwrap_or(fs / 8.0);
        let mut spec = DesignSpec::new(d.n, d.osr, fs, f_notch_hz.unwrap_or(configured));
        spec.phi_kappa = d.phi_kappa;
        spec.tau_dc = d.tau_dc / fs;
        spec.v_fs = d.v_fs;
        spec.validate()?;
        Ok(spec)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let fs = self.fs();
        let a = &self.analysis;
        Ok(PipelineConfig {
            topology: self.design.topology,
            test: TestSignalConfig {
                amplitude: self.test.amplitude,
                frequency: pick(
                    self.test.frequency,
                    self.test.frequency_hz,
                    fs,
                    "test.frequency",
                )?,
                phase: self.test.phase,
                snap_to_bin: self.test.snap_to_bin,
            },
            training: self.training.clone(),
            sim: self.sim.clone(),
            calibration: self.calibration.clone(),
            analysis: AnalysisConfig {
                nfft: a.nfft,
                segments: a.segments,
                window: a.window,
                guard: a.guard,
                bandwidth: pick(a.bandwidth, a.bandwidth_hz, fs, "analysis.bandwidth")?,
                notch_method: a.notch_method,
                notch_smoothing_bins: a.notch_smoothing_bins,
                notch_fit_half_width: a.notch_fit_half_width,
                notch_min_depth_db: a.notch_min_depth_db,
            },
            adaptive_taps: self.adaptive_taps.clone(),
        })
    }

    pub fn mc(&self) -> Result<McConfig, CliError> {
        let m = &self.montecarlo;
        Ok(McConfig {
            trials: m.trials,
            perturbation: PerturbationSpec {
                p: m.p,
                seed: m.seed,
            },
            workers: m.workers,
            pipeline: self.pipeline()?,
        })
    }

    pub fn notches_hz(&self) -> Vec<f64> {
        match &self.sweep.notches_hz {
            Some(v) => v.clone(),
            None => self.sweep.notches.iter().map(|f| f * self.fs()).collect(),
        }
    }

    /// Checks every section before any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if !(self.design.fs_hz > 0.0 && self.design.fs_hz.is_finite()) {
            return bad("design.fs_hz must be positive".into());
        }
        let spec = self.spec()?;
        let pipeline = self.pipeline()?;
        self.sim.validate(2 * spec.n)?;
        let c = &self.calibration;
        if c.taps < 2
            || !c.taps.is_multiple_of(2)
            || !(c.ridge >= 0.0)
            || !(c.tolerance > 0.0)
            || c.max_iterations == 0
        {
            return bad(
                "calibration needs even taps >= 2, ridge >= 0, tolerance > 0, max_iterations >= 1"
                    .into(),
            );
        }
        let a = &self.analysis;
        if a.nfft < 16 || !a.nfft.is_power_of_two() || a.segments == 0 {
            return bad("analysis.nfft must be a power of two >= 16 and segments >= 1".into());
        }
        if self.training.periods == 0 || !(self.training.peak > 0.0 && self.training.peak <= 1.0) {
            return bad("training.periods must be >= 1 and training.peak in (0, 1]".into());
        }
        if !self.adaptive_taps.max_taps.is_multiple_of(2) {
            return bad("adaptive_taps.max_taps must be even".into());
        }
        qcbadc::pipeline::operating_point(&spec, &pipeline)?;
        self.mc()?.perturbation.validate()?;
        for (name, (lo, hi, w)) in [
            ("snr_bins", self.montecarlo.snr_bins),
            ("notch_bins", self.montecarlo.notch_bins),
        ] {
            if !(hi > lo && w > 0.0) {
                return bad(format!(
                    "montecarlo.{name} needs (lo, hi, width) with hi > lo, width > 0"
                ));
            }
        }
        for f in self.notches_hz() {
            self.spec_at(Some(f))?;
        }
        if !(self.coeff.beta_t > 0.0 && self.coeff.beta_t <= 0.5) || self.coeff.points == 0 {
            return bad("coeff.beta_t must be in (0, 0.5] and points >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_path_builds_nested_tables() {
        let mut t = toml::Table::new();
        set_path(&mut t, "design.n", "8").unwrap();
        set_path(&mut t, "design.topology", "lowpass").unwrap();
        set_path(&mut t, "sweep.notches", "[0.1, 0.2]").unwrap();
        let cfg: ExperimentConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.design.n, 8);
        assert_eq!(cfg.design.topology, Topology::Lowpass);
        assert_eq!(cfg.sweep.notches, vec![0.1, 0.2]);
    }

    #[test]
    fn frequencies_scale_with_fs() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                ("design.fs_hz".into(), "1e6".into()),
                ("design.f_notch".into(), "0.25".into()),
                ("test.frequency_hz".into(), "240000.0".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.spec().unwrap().f_notch, 250_000.0);
        assert_eq!(cfg.pipeline().unwrap().test.frequency, Some(240_000.0));
    }

    #[test]
    fn both_units_is_an_error() {
        let r = ExperimentConfig::load(
            None,
            &[
                ("design.f_notch".into(), "0.1".into()),
                ("design.f_notch_hz".into(), "0.1".into()),
            ],
        );
        assert!(matches!(r, Err(CliError::Validation(_))));
    }
}
