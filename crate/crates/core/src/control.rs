//! Local quadrature digital control.
//!
//! Each stage `l` observes its state pair through a scaled rotation, quantizes both
//! components to +-1 at the clock edge and feeds back a second scaled rotation of the
//! decisions, held constant over one control period (NRZ).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Below this `|omega_n T|` the factor `omega_n / (2 sin(omega_n T / 2))` uses its limit.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCoefficients {
    /// Control contribution gains [1/s].
    pub kappa_phi: f64,
    pub kbar_phi: f64,
    /// Observation gains (unitless).
    pub ktilde_phi: f64,
    pub kbar_tilde_phi: f64,
    pub phi_kappa: f64,
    /// Control period [s].
    pub t: f64,
    pub tau_dc: f64,
}

impl ControlCoefficients {
    /// `sqrt(kappa^2 + kbar^2)`.
    pub fn contribution_gain(&self) -> f64 {
        self.kappa_phi.hypot(self.kbar_phi)
    }

    pub fn observation_gain(&self) -> f64 {
        self.ktilde_phi.hypot(self.kbar_tilde_phi)
    }

    /// Row-major `[[ktilde, -kbar_tilde], [kbar_tilde, ktilde]]`.
    pub fn observation_matrix(&self) -> [[f64; 2]; 2] {
        [
            [self.ktilde_phi, -self.kbar_tilde_phi],
            [self.kbar_tilde_phi, self.ktilde_phi],
        ]
    }

    /// Row-major `[[kappa, -kbar], [kbar, kappa]]`.
    pub fn contribution_matrix(&self) -> [[f64; 2]; 2] {
        [
            [self.kappa_phi, -self.kbar_phi],
            [self.kbar_phi, self.kappa_phi],
        ]
    }
}

/// `beta T omega_n / (2 sin(omega_n T / 2))`, continuous at `omega_n = 0` where it equals `beta`.
fn matched_gain(beta: f64, omega_n: f64, t: f64) -> f64 {
    let x = omega_n * t;
    if x.abs() < SMALL_ANGLE {
        beta
    } else {
        beta * x / (2.0 * (x / 2.0).sin())
    }
}

pub fn synthesize_control(
    beta: f64,
    omega_n: f64,
    t: f64,
    phi_kappa: f64,
    tau_dc: f64,
) -> Result<ControlCoefficients> {
    let bt = beta * t;
    if !(bt.is_finite() && bt > 0.0) {
        return Err(Error::Synthesis(format!(
            "beta*T must be positive, got {bt}"
        )));
    }
    let wt = omega_n * t;
    if !(wt.is_finite() && (0.0..2.0 * PI).contains(&wt)) {
        return Err(Error::Synthesis(format!(
            "omega_n*T must lie in [0, 2pi), got {wt}"
        )));
    }
    if !(tau_dc >= 0.0 && tau_dc.is_finite()) {
        return Err(Error::Synthesis(format!(
            "tau_dc must be >= 0, got {tau_dc}"
        )));
    }
    let gain = matched_gain(beta, omega_n, t);
    let theta = omega_n * (t / 2.0 + tau_dc) - phi_kappa;
    Ok(ControlCoefficients {
        kappa_phi: gain * phi_kappa.cos(),
        kbar_phi: gain * phi_kappa.sin(),
        ktilde_phi: -theta.cos() / bt,
        kbar_tilde_phi: -theta.sin() / bt,
        phi_kappa,
        t,
        tau_dc,
    })
}

/// Worst-case input and control superposition stays bounded iff `2 beta T <= 1`.
pub fn check_superposition(beta: f64, t: f64) -> bool {
    2.0 * beta * t <= 1.0
}

pub fn control_observation(x: (f64, f64), c: &ControlCoefficients) -> (f64, f64) {
    let m = c.observation_matrix();
    (m[0][0] * x.0 + m[0][1] * x.1, m[1][0] * x.0 + m[1][1] * x.1)
}

/// One-bit quantizer, `sign(0) = +1`.
#[inline]
pub fn sign_bit(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn quantize(observation: (f64, f64)) -> Result<(i8, i8)> {
    if !(observation.0.is_finite() && observation.1.is_finite()) {
        return Err(Error::NonFiniteObservation);
    }
    Ok((sign_bit(observation.0), sign_bit(observation.1)))
}

pub fn control_contribution(decisions: (i8, i8), c: &ControlCoefficients) -> (f64, f64) {
    let m = c.contribution_matrix();
    let (s, sb) = (decisions.0 as f64, decisions.1 as f64);
    (m[0][0] * s + m[0][1] * sb, m[1][0] * s + m[1][1] * sb)
}
