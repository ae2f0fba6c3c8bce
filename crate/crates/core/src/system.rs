//! Leapfrog analog systems and their quadrature lift.
//!
//! A low-pass leapfrog of order `N` is the ladder
//!
//! ```text
//! dx_1/dt = beta * u + alpha * x_2 + s_1
//! dx_l/dt = beta * x_{l-1} + alpha * x_{l+1} + s_l
//! dx_N/dt = beta * x_{N-1} + s_N
//! ```
//!
//! Two identical copies cross-coupled by `-/+ omega_n` give the quadrature system, whose
//! joint complex state `x + i x_bar` rotates at the notch frequency.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Design targets for one converter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    /// Order of each low-pass branch.
    pub n: usize,
    /// Oversampling ratio, `pi * fs / omega_b`.
    pub osr: f64,
    /// Control clock frequency [Hz].
    pub fs: f64,
    /// Notch (center) frequency [Hz].
    pub f_notch: f64,
    /// Free phase of the control contribution [rad].
    pub phi_kappa: f64,
    /// Quantizer delay [s].
    pub tau_dc: f64,
    /// Full-scale input amplitude [V].
    pub v_fs: f64,
}

impl DesignSpec {
    /// Operating point with the default phase `pi/3`, zero delay and 1 V full scale.
    pub fn new(n: usize, osr: f64, fs: f64, f_notch: f64) -> Self {
        Self {
            n,
            osr,
            fs,
            f_notch,
            phi_kappa: PI / 3.0,
            tau_dc: 0.0,
            v_fs: 1.0,
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.fs
    }

    /// Angular signal bandwidth `omega_b = pi * fs / osr`.
    pub fn omega_b(&self) -> f64 {
        PI * self.fs / self.osr
    }

    pub fn omega_n(&self) -> f64 {
        2.0 * PI * self.f_notch
    }

    /// One-sided bandwidth in Hz, `omega_b / (2 pi)`.
    pub fn bandwidth_hz(&self) -> f64 {
        self.omega_b() / (2.0 * PI)
    }

    /// Test tone a quarter of the bandwidth below the notch.
    pub fn test_frequency(&self) -> f64 {
        self.f_notch - self.omega_b() / (8.0 * PI)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDesign(msg));
        if self.n < 1 {
            return bad("order must be at least 1".into());
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return bad(format!("fs must be positive, got {}", self.fs));
        }
        if !(self.osr.is_finite() && self.osr >= 1.0) {
            return bad(format!(
                "OSR must be >= 1 (bandwidth above Nyquist otherwise), got {}",
                self.osr
            ));
        }
        if !(self.f_notch >= 0.0 && self.f_notch < self.fs / 2.0) {
            return bad(format!(
                "notch frequency must lie in [0, fs/2), got {}",
                self.f_notch
            ));
        }
        if !(self.phi_kappa >= 0.0 && self.phi_kappa < 2.0 * PI) {
            return bad(format!(
                "phi_kappa must lie in [0, 2pi), got {}",
                self.phi_kappa
            ));
        }
        if !(self.tau_dc >= 0.0 && self.tau_dc < self.period()) {
            return bad(format!("tau_dc must lie in [0, T), got {}", self.tau_dc));
        }
        if !(self.v_fs.is_finite() && self.v_fs > 0.0) {
            return bad(format!("v_fs must be positive, got {}", self.v_fs));
        }
        Ok(())
    }
}

/// N-th order low-pass leapfrog parametrization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowpassLeapfrog {
    pub n: usize,
    /// Forward gain [1/s].
    pub beta: f64,
    /// Feedback gain [1/s].
    pub alpha: f64,
    /// Angular signal bandwidth [rad/s].
    pub omega_b: f64,
    /// Control period [s].
    pub t: f64,
}

/// Builds the leapfrog from the design equations `|beta| = omega_b OSR / 2pi` and
/// `alpha beta = -omega_b^2 / 4`, with `beta > 0`.
pub fn design_lowpass(spec: &DesignSpec) -> Result<LowpassLeapfrog> {
    spec.validate()?;
    let omega_b = spec.omega_b();
    let beta = omega_b * spec.osr / (2.0 * PI);
    let alpha = -omega_b * omega_b / (4.0 * beta);
    Ok(LowpassLeapfrog {
        n: spec.n,
        beta,
        alpha,
        omega_b,
        t: spec.period(),
    })
}

impl LowpassLeapfrog {
    /// `(A_LP, B_LP)`: alpha on the superdiagonal, beta on the subdiagonal, `B = (beta, 0, ..)`.
    pub fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        lowpass_matrices(self)
    }

    /// Worst-case superposition margin `2 beta T <= 1`.
    pub fn superposition_ok(&self) -> bool {
        crate::control::check_superposition(self.beta, self.t)
    }
}

pub fn lowpass_matrices(sys: &LowpassLeapfrog) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = sys.n;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = sys.alpha;
        a[(i + 1, i)] = sys.beta;
    }
    let mut b = DMatrix::zeros(n, 1);
    b[(0, 0)] = sys.beta;
    (a, b)
}

/// Two cross-coupled copies of a low-pass system, state order `x_1..x_N, xbar_1..xbar_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSystem {
    pub n: usize,
    pub omega_n: f64,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lowpass: LowpassLeapfrog,
}

pub fn quadrature_transform(sys: &LowpassLeapfrog, omega_n: f64) -> Result<QuadratureSystem> {
    if !(omega_n.is_finite() && omega_n >= 0.0) {
        return Err(Error::InvalidDesign(format!(
            "notch angular frequency must be >= 0, got {omega_n}"
        )));
    }
    let n = sys.n;
    let (a_lp, b_lp) = lowpass_matrices(sys);
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&a_lp);
    a.view_mut((n, n), (n, n)).copy_from(&a_lp);
    for i in 0..n {
        a[(i, n + i)] = -omega_n;
        a[(n + i, i)] = omega_n;
    }
    let mut b = DMatrix::zeros(2 * n, 2);
    b.view_mut((0, 0), (n, 1)).copy_from(&b_lp);
    b.view_mut((n, 1), (n, 1)).copy_from(&b_lp);
    Ok(QuadratureSystem {
        n,
        omega_n,
        a,
        b,
        lowpass: *sys,
    })
}

impl QuadratureSystem {
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        // The unshifted QR iteration can stall on the zero-diagonal leapfrog (odd N at
        // omega_n = 0); a real diagonal shift moves every eigenvalue off the axis.
        let dim = self.a.nrows();
        let scale = self.a.amax().max(f64::MIN_POSITIVE);
        for shift in [0.0, 0.3 * scale, 0.7 * scale] {
            let m = &self.a + DMatrix::identity(dim, dim) * shift;
            if let Some(schur) = Schur::try_new(m, f64::EPSILON, 10_000) {
                return schur
                    .complex_eigenvalues()
                    .iter()
                    .map(|z| z - shift)
                    .collect();
            }
        }
        Vec::new()
    }
}

/// SNR improvement in dB predicted by `SNR ~ OSR^(2N)` when the OSR grows by `osr_ratio`.
pub fn predicted_snr_delta(n: usize, osr_ratio: f64) -> f64 {
    20.0 * n as f64 * osr_ratio.log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn nominal(n: usize, osr: f64) -> LowpassLeapfrog {
        design_lowpass(&DesignSpec::new(n, osr, 1.0, 0.125)).unwrap()
    }

    #[test]
    fn design_n6_osr8() {
        let lp = nominal(6, 8.0);
        assert_relative_eq!(lp.omega_b, PI / 8.0, max_relative = 1e-15);
        assert_eq!(lp.beta, 0.5);
        assert_relative_eq!(lp.alpha, -0.077_106_3, epsilon = 5e-8);
        // independent evaluation of alpha * beta = -omega_b^2 / 4
        let ob = 0.392_699_081_698_724_2_f64;
        assert_relative_eq!(lp.alpha * lp.beta, -ob * ob / 4.0, max_relative = 1e-12);
    }

    #[test]
    fn design_n8_osr4() {
        let lp = nominal(8, 4.0);
        assert_relative_eq!(lp.omega_b, PI / 4.0, max_relative = 1e-15);
        assert_eq!(lp.beta, 0.5);
        assert_relative_eq!(lp.alpha, -0.308_425_1, epsilon = 5e-8);
    }

    #[test]
    fn beta_is_half_fs_for_any_osr() {
        for &(n, osr, fs) in &[
            (1, 1.0, 1.0),
            (3, 16.0, 2.0e6),
            (8, 64.0, 10.0),
            (5, 3.3, 0.25),
        ] {
            let lp = design_lowpass(&DesignSpec::new(n, osr, fs, 0.0)).unwrap();
            assert_relative_eq!(lp.beta, fs / 2.0, max_relative = 1e-15);
            assert_relative_eq!(2.0 * lp.beta * lp.t, 1.0, max_relative = 1e-15);
            assert!(lp.alpha < 0.0);
        }
    }

    #[test]
    fn rejects_osr_below_one() {
        let err = design_lowpass(&DesignSpec::new(6, 0.5, 1.0, 0.125)).unwrap_err();
        assert!(matches!(err, Error::InvalidDesign(_)));
    }

    #[test]
    fn rejects_notch_at_nyquist() {
        assert!(design_lowpass(&DesignSpec::new(6, 8.0, 1.0, 0.5)).is_err());
    }

    #[test]
    fn lowpass_order_one() {
        let lp = nominal(1, 8.0);
        let (a, b) = lowpass_matrices(&lp);
        assert_eq!(a, DMatrix::from_element(1, 1, 0.0));
        assert_eq!(b, DMatrix::from_element(1, 1, lp.beta));
    }

    #[test]
    fn lowpass_order_two_layout() {
        let lp = LowpassLeapfrog {
            n: 2,
            beta: 0.5,
            alpha: -0.077_106_3,
            omega_b: PI / 8.0,
            t: 1.0,
        };
        let (a, b) = lowpass_matrices(&lp);
        assert_eq!(
            a,
            DMatrix::from_row_slice(2, 2, &[0.0, -0.077_106_3, 0.5, 0.0])
        );
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[0.5, 0.0]));
    }

    #[test]
    fn order_two_eigenvalues_are_half_bandwidth() {
        let lp = nominal(2, 8.0);
        let (a, _) = lowpass_matrices(&lp);
        let mut eig: Vec<_> = a.complex_eigenvalues().iter().map(|z| z.im).collect();
        eig.sort_by(f64::total_cmp);
        // +-sqrt(alpha beta) = +-i omega_b / 2
        assert_relative_eq!(eig[0], -lp.omega_b / 2.0, max_relative = 1e-12);
        assert_relative_eq!(eig[1], lp.omega_b / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn diagonal_is_zero() {
        for n in 1..=8 {
            let (a, _) = lowpass_matrices(&nominal(n, 8.0));
            assert!((0..n).all(|i| a[(i, i)] == 0.0));
        }
    }

    #[test]
    fn zero_notch_decouples_bit_exactly() {
        let lp = nominal(6, 8.0);
        let q = quadrature_transform(&lp, 0.0).unwrap();
        let (a_lp, b_lp) = lowpass_matrices(&lp);
        assert_eq!(q.a.view((0, 0), (6, 6)).clone_owned(), a_lp);
        assert_eq!(q.a.view((6, 6), (6, 6)).clone_owned(), a_lp);
        assert!(q.a.view((0, 6), (6, 6)).iter().all(|&v| v == 0.0));
        assert!(q.a.view((6, 0), (6, 6)).iter().all(|&v| v == 0.0));
        assert_eq!(q.b.view((0, 0), (6, 1)).clone_owned(), b_lp);
        assert_eq!(q.b.view((6, 1), (6, 1)).clone_owned(), b_lp);
    }

    #[test]
    fn first_order_quadrature_is_rotation_generator() {
        let lp = nominal(1, 8.0);
        let w = 0.7;
        let q = quadrature_transform(&lp, w).unwrap();
        assert_eq!(q.a, DMatrix::from_row_slice(2, 2, &[0.0, -w, w, 0.0]));
        let mut eig: Vec<_> = q.eigenvalues().iter().map(|z| z.im).collect();
        eig.sort_by(f64::total_cmp);
        assert_relative_eq!(eig[0], -w, max_relative = 1e-12);
        assert_relative_eq!(eig[1], w, max_relative = 1e-12);
    }

    #[test]
    fn block_structure() {
        let lp = nominal(4, 8.0);
        let w = PI / 4.0;
        let q = quadrature_transform(&lp, w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let c = if i == j { w } else { 0.0 };
                assert_eq!(q.a[(i, 4 + j)], -c);
                assert_eq!(q.a[(4 + i, j)], c);
                assert_eq!(q.a[(i, j)], q.a[(4 + i, 4 + j)]);
            }
        }
        assert_eq!(q.b[(0, 1)], 0.0);
        assert_eq!(q.b[(4, 0)], 0.0);
    }

    #[test]
    fn rejects_negative_notch() {
        assert!(quadrature_transform(&nominal(2, 8.0), -1.0).is_err());
    }

    #[test]
    fn predicted_snr_delta_values() {
        // 10 log10(2^12) and 10 log10(2^16)
        assert_relative_eq!(
            predicted_snr_delta(6, 2.0),
            120.0 * 2f64.log10(),
            max_relative = 1e-14
        );
        assert!((predicted_snr_delta(6, 2.0) - 36.12).abs() < 0.01);
        assert!((predicted_snr_delta(8, 2.0) - 48.16).abs() < 0.01);
        assert_eq!(predicted_snr_delta(5, 1.0), 0.0);
    }
}
