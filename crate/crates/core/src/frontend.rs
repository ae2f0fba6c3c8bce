//! Analog frontend: a linear state-space system together with its local digital controls.
//!
//! This is the form the simulator consumes. It is built from a designed quadrature (or
//! low-pass) system, and it is also the form that Monte-Carlo perturbation works on, since
//! every coefficient occurrence becomes an independent matrix entry.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::control::ControlCoefficients;
use crate::error::{Error, Result};
use crate::system::{lowpass_matrices, LowpassLeapfrog, QuadratureSystem};

/// One local control: observes `states`, decides one bit per state, and drives the same
/// states. Channel indices in the control trace equal the state indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStage {
    pub states: Vec<usize>,
    /// `states.len() x states.len()`, maps the local state to the quantizer input.
    pub observation: DMatrix<f64>,
    /// `states.len() x states.len()`, maps the decisions to the held state derivative.
    pub contribution: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalogFrontend {
    pub a: DMatrix<f64>,
    /// One column per input (1 for a real input, 2 for a quadrature pair).
    pub b: DMatrix<f64>,
    pub stages: Vec<ControlStage>,
    /// Control period [s].
    pub t: f64,
    pub tau_dc: f64,
}

fn mat2(m: [[f64; 2]; 2]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]])
}

impl AnalogFrontend {
    /// Quadrature system with one local quadrature control per stage pair `(x_l, xbar_l)`.
    pub fn quadrature(sys: &QuadratureSystem, ctrl: &ControlCoefficients) -> Self {
        let n = sys.n;
        let stages = (0..n)
            .map(|l| ControlStage {
                states: vec![l, n + l],
                observation: mat2(ctrl.observation_matrix()),
                contribution: mat2(ctrl.contribution_matrix()),
            })
            .collect();
        Self {
            a: sys.a.clone(),
            b: sys.b.clone(),
            stages,
            t: ctrl.t,
            tau_dc: ctrl.tau_dc,
        }
    }

    /// Real low-pass building block with scalar controls `kappa_phi` / `ktilde_phi`.
    pub fn lowpass(sys: &LowpassLeapfrog, ctrl: &ControlCoefficients) -> Self {
        let (a, b) = lowpass_matrices(sys);
        let stages = (0..sys.n)
            .map(|l| ControlStage {
                states: vec![l],
                observation: DMatrix::from_element(1, 1, ctrl.ktilde_phi),
                contribution: DMatrix::from_element(1, 1, ctrl.kappa_phi),
            })
            .collect();
        Self {
            a,
            b,
            stages,
            t: ctrl.t,
            tau_dc: ctrl.tau_dc,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Number of control channels; one per state.
    pub fn channels(&self) -> usize {
        self.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let bad = |m: String| Err(Error::InvalidDesign(m));
        if self.a.ncols() != n || self.b.nrows() != n {
            return bad("inconsistent A/B dimensions".into());
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return bad(format!("control period must be positive, got {}", self.t));
        }
        if !(self.tau_dc >= 0.0 && self.tau_dc < self.t) {
            return bad(format!("tau_dc must lie in [0, T), got {}", self.tau_dc));
        }
        let mut seen = vec![false; n];
        for st in &self.stages {
            let k = st.states.len();
            if st.observation.shape() != (k, k) || st.contribution.shape() != (k, k) {
                return bad("control stage matrix shape mismatch".into());
            }
            for &s in &st.states {
                if s >= n || seen[s] {
                    return bad(format!("state {s} is out of range or controlled twice"));
                }
                seen[s] = true;
            }
        }
        if seen.iter().any(|v| !v) {
            return bad("every state needs a control".into());
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite system matrix entry".into());
        }
        Ok(())
    }
}

/// Serializable form of a frontend (matrices as nested row arrays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendDocument {
    pub t: f64,
    pub tau_dc: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub stages: Vec<StageDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDocument {
    pub states: Vec<usize>,
    pub observation: Vec<Vec<f64>>,
    pub contribution: Vec<Vec<f64>>,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub(crate) fn from_rows(r: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = r.len();
    let nc = r.first().map_or(0, Vec::len);
    if r.iter().any(|row| row.len() != nc) {
        return Err(Error::Format("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| r[i][j]))
}

impl From<&AnalogFrontend> for FrontendDocument {
    fn from(f: &AnalogFrontend) -> Self {
        Self {
            t: f.t,
            tau_dc: f.tau_dc,
            a: rows(&f.a),
            b: rows(&f.b),
            stages: f
                .stages
                .iter()
                .map(|s| StageDocument {
                    states: s.states.clone(),
                    observation: rows(&s.observation),
                    contribution: rows(&s.contribution),
                })
                .collect(),
        }
    }
}

impl TryFrom<&FrontendDocument> for AnalogFrontend {
    type Error = Error;

    fn try_from(d: &FrontendDocument) -> Result<Self> {
        let stages = d
            .stages
            .iter()
            .map(|s| {
                Ok(ControlStage {
                    states: s.states.clone(),
                    observation: from_rows(&s.observation)?,
                    contribution: from_rows(&s.contribution)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let f = AnalogFrontend {
            a: from_rows(&d.a)?,
            b: from_rows(&d.b)?,
            stages,
            t: d.t,
            tau_dc: d.tau_dc,
        };
        f.validate()?;
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::synthesize_control;
    use crate::system::{design_lowpass, quadrature_transform, DesignSpec};

    fn nominal() -> AnalogFrontend {
        let spec = DesignSpec::new(3, 8.0, 1.0, 0.125);
        let lp = design_lowpass(&spec).unwrap();
        let q = quadrature_transform(&lp, spec.omega_n()).unwrap();
        let c = synthesize_control(lp.beta, spec.omega_n(), lp.t, spec.phi_kappa, 0.0).unwrap();
        AnalogFrontend::quadrature(&q, &c)
    }

    #[test]
    fn quadrature_stage_layout() {
        let f = nominal();
        f.validate().unwrap();
        assert_eq!(f.stages.len(), 3);
        assert_eq!(f.stages[1].states, vec![1, 4]);
        assert_eq!(f.channels(), 6);
        assert_eq!(f.input_dim(), 2);
    }

    #[test]
    fn document_round_trip() {
        let f = nominal();
        let doc = FrontendDocument::from(&f);
        let json = serde_json::to_string(&doc).unwrap();
        let back: FrontendDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(AnalogFrontend::try_from(&back).unwrap(), f);
    }

    #[test]
    fn validate_rejects_uncontrolled_state() {
        let mut f = nominal();
        f.stages.pop();
        assert!(f.validate().is_err());
    }
}
