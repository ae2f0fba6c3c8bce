//! Component-mismatch Monte Carlo.
//!
//! Each trial scales every nonzero coefficient of the analog frontend (the `alpha`, `beta`,
//! `omega_n` entries of `A` and `B` and the four control gains of every stage) by its own
//! uniform factor in `[1 - p, 1 + p]`, recalibrates the estimator on the perturbed frontend
//! and measures it with the nominal protocol.

use std::io::{BufRead, Write};
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FirEstimator;
use crate::frontend::AnalogFrontend;
use crate::pipeline::{nominal_design, run_frontend, run_frontend_from, PipelineConfig};
use crate::system::DesignSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    /// Relative half-width of the uniform factor.
    pub p: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            p: 0.10,
            seed: 2023,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 0.0 && self.p < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "perturbation p must be in [0, 1), got {}",
                self.p
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trial `i`; depends only on the master seed and the index.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    splitmix64(splitmix64(master) ^ trial as u64)
}

/// Nonzero coefficients of a frontend in a fixed order: `A` and `B` row-major, then each
/// stage's observation and contribution matrices row-major.
fn coefficients_mut(f: &mut AnalogFrontend) -> Vec<&mut f64> {
    fn nonzero(m: &mut DMatrix<f64>) -> impl Iterator<Item = &mut f64> {
        // nalgebra is column-major; the transpose view gives row-major order.
        let (r, c) = m.shape();
        let mut cells: Vec<(usize, &mut f64)> = m
            .iter_mut()
            .enumerate()
            .map(|(i, v)| ((i % r) * c + i / r, v))
            .collect();
        cells.sort_by_key(|(k, _)| *k);
        cells.into_iter().map(|(_, v)| v).filter(|v| **v != 0.0)
    }
    let mut out: Vec<&mut f64> = Vec::new();
    out.extend(nonzero(&mut f.a));
    out.extend(nonzero(&mut f.b));
    for s in &mut f.stages {
        out.extend(nonzero(&mut s.observation));
        out.extend(nonzero(&mut s.contribution));
    }
    out
}

/// A perturbed frontend and the factors applied to its coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub frontend: AnalogFrontend,
    pub factors: Vec<f64>,
}

impl Perturbed {
    /// Perturbed coefficient values in the fixed coefficient order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut f = self.frontend.clone();
        coefficients_mut(&mut f).into_iter().map(|v| *v).collect()
    }
}

pub fn perturb(nominal: &AnalogFrontend, spec: &PerturbationSpec, trial: usize) -> Perturbed {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(spec.seed, trial));
    let mut frontend = nominal.clone();
    let factors = coefficients_mut(&mut frontend)
        .into_iter()
        .map(|v| {
            let u: f64 = rng.random();
            let factor = 1.0 + spec.p * (2.0 * u - 1.0);
            *v *= factor;
            factor
        })
        .collect();
    Perturbed { frontend, factors }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub parameters: Vec<f64>,
    pub stable: bool,
    pub snr_db: Option<f64>,
    /// Estimated notch frequency in Hz.
    pub f_hat_n: Option<f64>,
    /// Why a stable trial has no SNR or notch estimate.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub trials: usize,
    pub perturbation: PerturbationSpec,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    pub pipeline: PipelineConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 256,
            perturbation: PerturbationSpec::default(),
            workers: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub f_n: f64,
    pub taps: usize,
    pub nominal_snr_db: f64,
    pub nominal_f_hat_n: Option<f64>,
    pub trials: Vec<TrialResult>,
    pub unstable: usize,
    /// Min and max SNR relative to nominal, dB, over stable trials.
    pub snr_range: Option<(f64, f64)>,
    /// Min and max of `f_hat_n / f_n - 1` over stable trials.
    pub f_hat_range: Option<(f64, f64)>,
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

impl McReport {
    /// SNR of each stable trial relative to nominal, dB.
    pub fn snr_deltas(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter_map(|t| t.snr_db)
            .map(|s| s - self.nominal_snr_db)
            .collect()
    }

    /// `f_hat_n / f_n` of each trial with a notch estimate.
    pub fn notch_ratios(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter_map(|t| t.f_hat_n)
            .map(|f| f / self.f_n)
            .collect()
    }

    /// Fraction of all trials whose SNR lies within `[lo, hi]` dB of nominal.
    pub fn fraction_snr_within(&self, lo: f64, hi: f64) -> f64 {
        let n = self
            .snr_deltas()
            .iter()
            .filter(|d| (lo..=hi).contains(*d))
            .count();
        n as f64 / self.trials.len().max(1) as f64
    }

    /// Fraction of all trials whose notch estimate lies within `rel` of `f_n`.
    pub fn fraction_notch_within(&self, rel: f64) -> f64 {
        let n = self
            .notch_ratios()
            .iter()
            .filter(|r| (*r - 1.0).abs() <= rel)
            .count();
        n as f64 / self.trials.len().max(1) as f64
    }

    /// Columns: index, stable, snr_db, f_hat_n, seed. Missing values are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,stable,snr_db,f_hat_n,seed")?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for t in &self.trials {
            writeln!(
                w,
                "{},{},{},{},{}",
                t.trial,
                t.stable,
                opt(t.snr_db),
                opt(t.f_hat_n),
                t.seed
            )?;
        }
        Ok(())
    }
}

/// Fixed-width histogram over `[lo, hi)` with underflow and overflow counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, width: f64) -> Result<Self> {
        if !(width > 0.0 && hi > lo) {
            return Err(Error::InvalidConfig(
                "histogram needs hi > lo and width > 0".into(),
            ));
        }
        let bins = ((hi - lo) / width).round().max(1.0) as usize;
        let mut h = Self {
            lo,
            width,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        };
        for &v in values {
            let i = ((v - lo) / width).floor();
            if i < 0.0 {
                h.underflow += 1;
            } else if i as usize >= bins {
                h.overflow += 1;
            } else {
                h.counts[i as usize] += 1;
            }
        }
        Ok(h)
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.width
    }

    /// Columns: lo, hi, count; out-of-range counts use infinite edges.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "lo,hi,count")?;
        writeln!(w, "-inf,{},{}", self.edge(0), self.underflow)?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{c}", self.edge(i), self.edge(i + 1))?;
        }
        writeln!(w, "{},inf,{}", self.edge(self.counts.len()), self.overflow)
    }
}

fn trial_config(cfg: &PipelineConfig, taps: usize) -> PipelineConfig {
    let mut c = cfg.clone();
    c.calibration.taps = taps;
    c.adaptive_taps.enabled = false;
    c
}

fn run_trial(
    spec: &DesignSpec,
    nominal: &AnalogFrontend,
    warm: &FirEstimator,
    cfg: &PipelineConfig,
    p: &PerturbationSpec,
    trial: usize,
) -> TrialResult {
    let inst = perturb(nominal, p, trial);
    let mut out = TrialResult {
        trial,
        seed: trial_seed(p.seed, trial),
        parameters: inst.parameters(),
        stable: true,
        snr_db: None,
        f_hat_n: None,
        error: None,
    };
    match run_frontend_from(spec, &inst.frontend, cfg, Some(warm)) {
        Ok(r) => {
            out.snr_db = Some(r.snr.snr_db);
            match r.f_hat_n {
                Ok(f) => out.f_hat_n = Some(f),
                Err(e) => out.error = Some(e.to_string()),
            }
        }
        Err(Error::Unstable { .. } | Error::NonFiniteState { .. }) => out.stable = false,
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Runs the batch. Trials listed in `done` are reused, `on_trial` sees every newly finished
/// trial (in completion order) so callers can checkpoint.
pub fn run_mc_resumable(
    spec: &DesignSpec,
    cfg: &McConfig,
    done: &[TrialResult],
    on_trial: impl Fn(&TrialResult) + Sync,
) -> Result<McReport> {
    cfg.perturbation.validate()?;
    let design = nominal_design(spec)?;
    let nominal = design.frontend(cfg.pipeline.topology);
    // The nominal reference uses the same fixed-length protocol as the trials.
    let first = run_frontend(spec, &nominal, &cfg.pipeline)?;
    let pipeline = trial_config(&cfg.pipeline, first.taps);
    let reference = if cfg.pipeline.adaptive_taps.enabled {
        run_frontend(spec, &nominal, &pipeline)?
    } else {
        first
    };

    let sink = Mutex::new(&on_trial);
    let pending: Vec<usize> = (0..cfg.trials)
        .filter(|i| !done.iter().any(|t| t.trial == *i))
        .collect();
    let work = || -> Vec<TrialResult> {
        pending
            .par_iter()
            .map(|&i| {
                let r = run_trial(
                    spec,
                    &nominal,
                    &reference.filter,
                    &pipeline,
                    &cfg.perturbation,
                    i,
                );
                (sink.lock().unwrap())(&r);
                r
            })
            .collect()
    };
    let fresh = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    };

    let mut trials: Vec<TrialResult> = done
        .iter()
        .filter(|t| t.trial < cfg.trials)
        .cloned()
        .chain(fresh)
        .collect();
    trials.sort_by_key(|t| t.trial);
    trials.dedup_by_key(|t| t.trial);

    let nominal_snr_db = reference.snr.snr_db;
    let snr_range = range(
        trials
            .iter()
            .filter_map(|t| t.snr_db)
            .map(|s| s - nominal_snr_db),
    );
    let f_hat_range = range(
        trials
            .iter()
            .filter_map(|t| t.f_hat_n)
            .map(|f| f / spec.f_notch - 1.0),
    );
    Ok(McReport {
        f_n: spec.f_notch,
        taps: reference.taps,
        nominal_snr_db,
        nominal_f_hat_n: reference.f_hat_n.ok(),
        unstable: trials.iter().filter(|t| !t.stable).count(),
        trials,
        snr_range,
        f_hat_range,
    })
}

pub fn run_mc(spec: &DesignSpec, cfg: &McConfig) -> Result<McReport> {
    run_mc_resumable(spec, cfg, &[], |_| {})
}

/// Appends one JSON line per trial.
pub fn write_checkpoint_line<W: Write>(mut w: W, t: &TrialResult) -> std::io::Result<()> {
    let line = serde_json::to_string(t).map_err(std::io::Error::other)?;
    writeln!(w, "{line}")?;
    w.flush()
}

/// Reads completed trials, ignoring a torn final line.
pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Vec<TrialResult>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(t) => out.push(t),
            Err(_) => break,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Topology;

    fn nominal() -> AnalogFrontend {
        let spec = DesignSpec::new(3, 8.0, 1.0, 0.125);
        nominal_design(&spec)
            .unwrap()
            .frontend(Topology::Quadrature)
    }

    #[test]
    fn zero_width_is_identity() {
        let f = nominal();
        let p = perturb(&f, &PerturbationSpec { p: 0.0, seed: 1 }, 7);
        assert_eq!(p.frontend, f);
        assert!(p.factors.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_per_trial() {
        let f = nominal();
        let s = PerturbationSpec::default();
        assert_eq!(perturb(&f, &s, 3), perturb(&f, &s, 3));
        assert_ne!(perturb(&f, &s, 3).factors, perturb(&f, &s, 4).factors);
    }

    #[test]
    fn every_coefficient_is_drawn() {
        // N=3 quadrature: A has 2 * 4 leapfrog entries plus 6 rotation entries, B has 2, and
        // each of the 3 stages has 4 observation and 4 contribution gains.
        let f = nominal();
        let p = perturb(&f, &PerturbationSpec::default(), 0);
        assert_eq!(p.factors.len(), 8 + 6 + 2 + 3 * 8);
        assert!(p.factors.iter().all(|v| (0.9..=1.1).contains(v)));
    }

    #[test]
    fn zero_pattern_is_preserved() {
        let f = nominal();
        let p = perturb(&f, &PerturbationSpec { p: 0.5, seed: 9 }, 0);
        for (x, y) in f.a.iter().zip(p.frontend.a.iter()) {
            assert_eq!(*x == 0.0, *y == 0.0);
        }
    }

    #[test]
    fn histogram_counts() {
        let h = Histogram::new(&[-1.0, 0.0, 0.4, 0.5, 0.99, 1.0, 7.0], 0.0, 1.0, 0.5).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!((h.underflow, h.overflow), (1, 2));
    }

    #[test]
    fn checkpoint_round_trip_skips_torn_line() {
        let t = TrialResult {
            trial: 2,
            seed: 5,
            parameters: vec![0.1, -0.25],
            stable: true,
            snr_db: Some(71.5),
            f_hat_n: None,
            error: Some("no notch".into()),
        };
        let mut buf = Vec::new();
        write_checkpoint_line(&mut buf, &t).unwrap();
        buf.extend_from_slice(b"{\"trial\":3,\"se");
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, vec![t]);
    }
}
