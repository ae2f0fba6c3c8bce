use num_complex::Complex64;
use proptest::prelude::*;
use qcbadc::system::{design_lowpass, lowpass_matrices, quadrature_transform, DesignSpec};
use std::f64::consts::PI;

/// Leapfrog `A_LP` is tridiagonal Toeplitz with zero diagonal, so its spectrum is
/// `2 sqrt(alpha beta) cos(k pi / (N + 1))`, `k = 1..N`.
fn analytic_lowpass_eigs(n: usize, alpha: f64, beta: f64) -> Vec<Complex64> {
    let root = Complex64::new(alpha * beta, 0.0).sqrt();
    (1..=n)
        .map(|k| root * 2.0 * (k as f64 * PI / (n as f64 + 1.0)).cos())
        .collect()
}

fn matches_multiset(mut got: Vec<Complex64>, want: &[Complex64], rel: f64) -> bool {
    let scale = want.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
    for w in want {
        let Some(i) =
            (0..got.len()).min_by(|&a, &b| (got[a] - w).norm().total_cmp(&(got[b] - w).norm()))
        else {
            return false;
        };
        if (got[i] - w).norm() > rel * scale {
            return false;
        }
        got.swap_remove(i);
    }
    got.is_empty()
}

#[test]
fn quadrature_eigenvalues_are_shifted_lowpass_eigenvalues() {
    for n in 1..=8 {
        for &wn in &[0.0, PI / 8.0, PI / 4.0] {
            let spec = DesignSpec::new(n, 8.0, 1.0, wn / (2.0 * PI));
            let lp = design_lowpass(&spec).unwrap();
            let q = quadrature_transform(&lp, wn).unwrap();
            let mut want = Vec::new();
            for l in analytic_lowpass_eigs(n, lp.alpha, lp.beta) {
                want.push(l + Complex64::new(0.0, wn));
                want.push(l - Complex64::new(0.0, wn));
            }
            assert!(
                matches_multiset(q.eigenvalues(), &want, 1e-9),
                "N={n} wn={wn}"
            );
        }
    }
}

#[test]
fn leapfrog_product_matches_bandwidth() {
    for &(n, osr) in &[(6, 8.0), (8, 4.0), (3, 16.0), (1, 1.0)] {
        let lp = design_lowpass(&DesignSpec::new(n, osr, 1.0, 0.1)).unwrap();
        // alpha beta = -(pi fs / OSR)^2 / 4, evaluated from the definitions.
        let wb = PI / osr;
        assert!((lp.alpha * lp.beta + wb * wb / 4.0).abs() < 1e-15);
        assert_eq!(2.0 * lp.beta * lp.t, 1.0);
    }
}

proptest! {
    #[test]
    fn design_invariants_hold(n in 1usize..10, osr in 1.0f64..64.0, fs in 0.1f64..1e9, frac in 0.0f64..0.499) {
        let spec = DesignSpec::new(n, osr, fs, frac * fs);
        let lp = design_lowpass(&spec).unwrap();
        prop_assert!((lp.beta - fs / 2.0).abs() <= 1e-15 * fs);
        prop_assert!(lp.alpha < 0.0);
        prop_assert!((lp.alpha * lp.beta + lp.omega_b * lp.omega_b / 4.0).abs() <= 1e-12 * lp.omega_b * lp.omega_b);
        prop_assert!(2.0 * lp.beta * lp.t <= 1.0 + 1e-15);
        let (a, b) = lowpass_matrices(&lp);
        prop_assert!((0..n).all(|i| a[(i, i)] == 0.0));
        prop_assert_eq!(b[(0, 0)], lp.beta);
        let q = quadrature_transform(&lp, spec.omega_n()).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(q.a[(i, j)], a[(i, j)]);
                prop_assert_eq!(q.a[(n + i, n + j)], a[(i, j)]);
                let off = if i == j { spec.omega_n() } else { 0.0 };
                prop_assert_eq!(q.a[(n + i, j)], off);
                prop_assert_eq!(q.a[(i, n + j)], -off);
            }
        }
    }
}
