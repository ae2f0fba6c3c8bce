//! FIR reconstruction of the input from the control bits.
//!
//! `u_hat[k] = sum_c sum_m h_c[m] s_c[k + m]`, `m` in `[-Kh/2, Kh/2)`, with one tap bank for
//! each of the two outputs `(u, ubar)`. Taps are fitted by least squares against a known
//! training input. The two outputs share one normal matrix, so they are solved together as
//! the real and imaginary parts of one complex unknown.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::ControlTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct FirEstimator {
    pub channels: usize,
    /// Taps per channel, even.
    pub taps: usize,
    /// `taps[output][channel][m + Kh/2]`, flattened; outputs are `u` then `ubar`.
    pub h: Vec<f64>,
}

impl FirEstimator {
    pub const OUTPUTS: usize = 2;

    pub fn zeros(channels: usize, taps: usize) -> Self {
        Self {
            channels,
            taps,
            h: vec![0.0; Self::OUTPUTS * channels * taps],
        }
    }

    /// Reconstruction delay in samples: output `j` estimates the input at `j + delay`.
    pub fn delay(&self) -> usize {
        self.taps / 2
    }

    pub fn bank(&self, output: usize, channel: usize) -> &[f64] {
        let o = (output * self.channels + channel) * self.taps;
        &self.h[o..o + self.taps]
    }

    pub fn bank_mut(&mut self, output: usize, channel: usize) -> &mut [f64] {
        let o = (output * self.channels + channel) * self.taps;
        &mut self.h[o..o + self.taps]
    }

    pub fn norm(&self) -> f64 {
        self.h.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    const MAGIC: &'static [u8; 4] = b"QCBF";

    /// Magic, u32 version, u32 outputs, u32 channels, u32 taps, u32 delay, then the taps as
    /// little-endian f64 in `[output][channel][m]` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        for v in [1, Self::OUTPUTS, self.channels, self.taps, self.delay()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.h {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        let mut head = [0u8; 24];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..4] != Self::MAGIC {
            return Err(Error::Format("not a filter bank file".into()));
        }
        let word =
            |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, outputs, channels, taps, delay) =
            (word(0), word(1), word(2), word(3), word(4));
        if version != 1 || outputs != Self::OUTPUTS || !taps.is_multiple_of(2) || delay != taps / 2
        {
            return Err(Error::Format("unsupported filter bank header".into()));
        }
        let mut h = vec![0.0; outputs * channels * taps];
        let mut b = [0u8; 8];
        for v in &mut h {
            r.read_exact(&mut b).map_err(io)?;
            *v = f64::from_le_bytes(b);
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite tap".into()));
        }
        Ok(Self { channels, taps, h })
    }

    /// Columns: output, channel, m, h.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "output,channel,m,h")?;
        let half = (self.taps / 2) as i64;
        for o in 0..Self::OUTPUTS {
            for c in 0..self.channels {
                for (i, v) in self.bank(o, c).iter().enumerate() {
                    writeln!(w, "{o},{c},{},{v:e}", i as i64 - half)?;
                }
            }
        }
        Ok(())
    }
}

/// Applies the filter bank; returns `u_hat + i ubar_hat` of length `K - Kh`.
pub fn estimate(trace: &ControlTrace, f: &FirEstimator) -> Result<Vec<Complex64>> {
    if trace.channels() != f.channels {
        return Err(Error::ChannelMismatch {
            trace: trace.channels(),
            filter: f.channels,
        });
    }
    let k = trace.len();
    if k <= f.taps {
        return Err(Error::TooShort {
            have: k,
            need: f.taps + 1,
        });
    }
    let out_len = k - f.taps;
    let mut out = vec![Complex64::new(0.0, 0.0); out_len];
    const CHUNK: usize = 1024;
    out.par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let j0 = ci * CHUNK;
            for (c, s) in trace.decisions.iter().enumerate() {
                let (hu, hq) = (f.bank(0, c), f.bank(1, c));
                for (jj, y) in chunk.iter_mut().enumerate() {
                    // s[j + Kh/2 + m] for m = -Kh/2.. is s[j + i], i = 0..Kh.
                    let window = &s[j0 + jj..j0 + jj + f.taps];
                    let (mut re, mut im) = (0.0, 0.0);
                    for ((&b, &a), &q) in window.iter().zip(hu).zip(hq) {
                        let b = b as f64;
                        re += a * b;
                        im += q * b;
                    }
                    y.re += re;
                    y.im += im;
                }
            }
        });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Taps per channel `Kh` (even).
    pub taps: usize,
    /// Ridge weight relative to the mean diagonal of the normal matrix.
    pub ridge: f64,
    /// Relative gradient norm at which the solver stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            taps: 512,
            ridge: 1e-12,
            tolerance: 1e-9,
            max_iterations: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final `|grad| / |grad_0|`.
    pub residual: f64,
    /// Absolute ridge weight used.
    pub lambda: f64,
}

pub fn calibrate(
    trace: &ControlTrace,
    reference: (&[f64], &[f64]),
    cfg: &CalibrationConfig,
) -> Result<FirEstimator> {
    calibrate_detailed(trace, reference, cfg).map(|(f, _)| f)
}

/// Like [`calibrate`], also returning solver statistics.
pub fn calibrate_detailed(
    trace: &ControlTrace,
    reference: (&[f64], &[f64]),
    cfg: &CalibrationConfig,
) -> Result<(FirEstimator, SolveStats)> {
    calibrate_from(trace, reference, cfg, None)
}

/// Like [`calibrate_detailed`], starting the solver from `initial` when its shape matches.
/// The stopping rule is relative to the right-hand side, so it does not depend on the start.
pub fn calibrate_from(
    trace: &ControlTrace,
    reference: (&[f64], &[f64]),
    cfg: &CalibrationConfig,
    initial: Option<&FirEstimator>,
) -> Result<(FirEstimator, SolveStats)> {
    let kh = cfg.taps;
    if kh < 2 || !kh.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "taps must be even and >= 2, got {kh}"
        )));
    }
    if !(cfg.ridge >= 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::InvalidConfig(
            "ridge must be >= 0 and tolerance > 0".into(),
        ));
    }
    let c = trace.channels();
    let k = trace.len();
    if reference.0.len() != k || reference.1.len() != k {
        return Err(Error::InvalidConfig(format!(
            "reference length {} does not match trace length {k}",
            reference.0.len()
        )));
    }
    let unknowns = c * kh;
    let required = 4 * unknowns;
    if k < required {
        return Err(Error::UnderDetermined {
            rows: k.saturating_sub(kh),
            unknowns,
            required,
        });
    }
    let op = NormalOperator::new(trace, kh);
    let rhs = op.rhs(reference);
    let lambda = cfg.ridge * op.interior as f64;
    let pre = Preconditioner::new(trace, kh, op.interior, lambda)?;
    let x0 = initial
        .filter(|f| f.channels == c && f.taps == kh)
        .map(|f| {
            (0..c * kh)
                .map(|j| Complex64::new(f.bank(0, j / kh)[j % kh], f.bank(1, j / kh)[j % kh]))
                .collect::<Vec<_>>()
        });
    let (x, iterations, residual) = pcg(
        &op,
        &pre,
        &rhs,
        x0,
        lambda,
        cfg.tolerance,
        cfg.max_iterations,
    );
    if residual > cfg.tolerance {
        return Err(Error::NotConverged {
            iterations,
            residual,
        });
    }
    let mut f = FirEstimator::zeros(c, kh);
    for ch in 0..c {
        for i in 0..kh {
            let v = x[ch * kh + i];
            f.bank_mut(0, ch)[i] = v.re;
            f.bank_mut(1, ch)[i] = v.im;
        }
    }
    Ok((
        f,
        SolveStats {
            iterations,
            residual,
            lambda,
        },
    ))
}

/// Exact normal matrix `G` of the interior-window regression, applied with FFTs.
struct NormalOperator {
    kh: usize,
    k: usize,
    interior: usize,
    len: usize,
    spectra: Vec<Vec<Complex64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl NormalOperator {
    fn new(trace: &ControlTrace, kh: usize) -> Self {
        let k = trace.len();
        // Every index touched from the interior window stays inside [0, K), so circular
        // transforms of length K are already exact.
        let len = fast_len(k);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let spectra = trace
            .decisions
            .iter()
            .map(|s| {
                let mut buf: Vec<Complex64> =
                    s.iter().map(|&b| Complex64::new(b as f64, 0.0)).collect();
                buf.resize(len, Complex64::new(0.0, 0.0));
                fwd.process(&mut buf);
                buf
            })
            .collect();
        Self {
            kh,
            k,
            interior: k - kh,
            len,
            spectra,
            fwd,
            inv,
        }
    }

    fn window(&self) -> std::ops::Range<usize> {
        self.kh / 2..self.k - self.kh / 2
    }

    /// `out_c[m] = sum_{k in interior} s_c[k + m] y[k]`, with `y` given by its FFT.
    fn correlate_into(&self, ym: &[Complex64], out: &mut [Complex64]) {
        let (len, kh) = (self.len, self.kh);
        let half = kh / 2;
        let mut z = vec![Complex64::new(0.0, 0.0); len];
        for (c, sc) in self.spectra.iter().enumerate() {
            for w in 0..len {
                z[w] = ym[(len - w) % len] * sc[w];
            }
            self.inv.process(&mut z);
            let scale = 1.0 / len as f64;
            for i in 0..kh {
                let m = i as isize - half as isize;
                out[c * kh + i] = z[m.rem_euclid(len as isize) as usize] * scale;
            }
        }
    }

    fn masked_spectrum(&self, mut y: Vec<Complex64>) -> Vec<Complex64> {
        let win = self.window();
        for (i, v) in y.iter_mut().enumerate() {
            if !win.contains(&i) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        self.fwd.process(&mut y);
        y
    }

    fn rhs(&self, reference: (&[f64], &[f64])) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.len];
        for (i, v) in y.iter_mut().enumerate().take(self.k) {
            *v = Complex64::new(reference.0[i], reference.1[i]);
        }
        let ym = self.masked_spectrum(y);
        let mut out = vec![Complex64::new(0.0, 0.0); self.spectra.len() * self.kh];
        self.correlate_into(&ym, &mut out);
        out
    }

    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        let (len, kh) = (self.len, self.kh);
        let half = kh / 2;
        // y[k] = sum_c sum_m h_c[m] s_c[k + m] = (g_c * s_c)[k] with g_c[j] = h_c[-j].
        let mut acc = vec![Complex64::new(0.0, 0.0); len];
        let mut g = vec![Complex64::new(0.0, 0.0); len];
        for (c, sc) in self.spectra.iter().enumerate() {
            g.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for i in 0..kh {
                let m = i as isize - half as isize;
                g[(-m).rem_euclid(len as isize) as usize] = x[c * kh + i];
            }
            self.fwd.process(&mut g);
            for w in 0..len {
                acc[w] += g[w] * sc[w];
            }
        }
        self.inv.process(&mut acc);
        let scale = 1.0 / len as f64;
        acc.iter_mut().for_each(|v| *v *= scale);
        let ym = self.masked_spectrum(acc);
        self.correlate_into(&ym, out);
    }
}

/// Block-circulant approximation of `G` (optimal circulant per Toeplitz block), inverted
/// per frequency bin.
struct Preconditioner {
    kh: usize,
    channels: usize,
    /// Per bin, the inverse `C x C` block.
    inverses: Vec<DMatrix<Complex64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Preconditioner {
    fn new(trace: &ControlTrace, kh: usize, interior: usize, lambda: f64) -> Result<Self> {
        let c = trace.channels();
        let k = trace.len();
        let len = fast_len(k + kh);
        let mut planner = FftPlanner::new();
        let big_f = planner.plan_fft_forward(len);
        let big_i = planner.plan_fft_inverse(len);
        let spectra: Vec<Vec<Complex64>> = trace
            .decisions
            .iter()
            .map(|s| {
                let mut buf: Vec<Complex64> =
                    s.iter().map(|&b| Complex64::new(b as f64, 0.0)).collect();
                buf.resize(len, Complex64::new(0.0, 0.0));
                big_f.process(&mut buf);
                buf
            })
            .collect();
        let fwd = planner.plan_fft_forward(kh);
        let inv = planner.plan_fft_inverse(kh);
        // Block (a, b) is Toeplitz with t[d] = sum_j s_a[j] s_b[j - d] * interior / K.
        let scale = interior as f64 / k as f64 / len as f64;
        let mut eig = vec![vec![Complex64::new(0.0, 0.0); c * c]; kh];
        let mut z = vec![Complex64::new(0.0, 0.0); len];
        let mut col = vec![Complex64::new(0.0, 0.0); kh];
        for a in 0..c {
            for b in 0..c {
                // corr[d] = sum_j s_b[j] s_a[j + d] = IFFT(conj(S_b) S_a)[d]; t[d] = corr[d].
                for w in 0..len {
                    z[w] = spectra[b][w].conj() * spectra[a][w];
                }
                big_i.process(&mut z);
                let t = |d: isize| z[d.rem_euclid(len as isize) as usize].re * scale;
                for (i, v) in col.iter_mut().enumerate() {
                    let d = i as isize;
                    let khf = kh as f64;
                    *v = Complex64::new(
                        ((khf - i as f64) * t(d) + i as f64 * t(d - kh as isize)) / khf,
                        0.0,
                    );
                }
                fwd.process(&mut col);
                for (w, v) in col.iter().enumerate() {
                    eig[w][a * c + b] = *v;
                }
            }
        }
        let floor = 1e-10 * interior as f64;
        let inverses = eig
            .into_iter()
            .map(|e| {
                let mut m = DMatrix::from_row_slice(c, c, &e);
                // Symmetrize against rounding.
                m = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
                for i in 0..c {
                    m[(i, i)] += Complex64::new(lambda + floor, 0.0);
                }
                let mut shift = 0.0;
                loop {
                    let mut mm = m.clone();
                    for i in 0..c {
                        mm[(i, i)] += Complex64::new(shift, 0.0);
                    }
                    if let Some(ch) = Cholesky::new(mm) {
                        return Ok(ch.inverse());
                    }
                    shift = if shift == 0.0 {
                        1e-6 * interior as f64
                    } else {
                        shift * 10.0
                    };
                    if shift > 1e6 * interior as f64 {
                        return Err(Error::InvalidConfig(
                            "preconditioner is not positive definite".into(),
                        ));
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kh,
            channels: c,
            inverses,
            fwd,
            inv,
        })
    }

    fn apply(&self, r: &[Complex64], out: &mut [Complex64]) {
        let (kh, c) = (self.kh, self.channels);
        let mut blocks: Vec<Vec<Complex64>> = (0..c)
            .map(|ch| {
                let mut b = r[ch * kh..(ch + 1) * kh].to_vec();
                self.fwd.process(&mut b);
                b
            })
            .collect();
        let mut v = vec![Complex64::new(0.0, 0.0); c];
        for w in 0..kh {
            for a in 0..c {
                let mut acc = Complex64::new(0.0, 0.0);
                for b in 0..c {
                    acc += self.inverses[w][(a, b)] * blocks[b][w];
                }
                v[a] = acc;
            }
            for a in 0..c {
                blocks[a][w] = v[a];
            }
        }
        let scale = 1.0 / kh as f64;
        for (ch, mut b) in blocks.into_iter().enumerate() {
            self.inv.process(&mut b);
            for (i, x) in b.into_iter().enumerate() {
                out[ch * kh + i] = x * scale;
            }
        }
    }
}

/// Smallest `2^a 3^b` not below `n`.
fn fast_len(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p3 = 1;
    while p3 < best {
        let mut v = p3;
        while v < n {
            v *= 2;
        }
        best = best.min(v);
        p3 *= 3;
    }
    best
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Preconditioned CG on `(G + lambda I) x = b` from `x = 0`.
fn pcg(
    op: &NormalOperator,
    pre: &Preconditioner,
    b: &[Complex64],
    x0: Option<Vec<Complex64>>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> (Vec<Complex64>, usize, f64) {
    let n = b.len();
    let b_norm = norm(b);
    let mut q = vec![Complex64::new(0.0, 0.0); n];
    if b_norm == 0.0 {
        return (vec![Complex64::new(0.0, 0.0); n], 0, 0.0);
    }
    let (mut x, mut r) = match x0 {
        Some(x) => {
            op.apply(&x, &mut q);
            let r = b
                .iter()
                .zip(&q)
                .zip(&x)
                .map(|((bi, qi), xi)| bi - qi - xi * lambda)
                .collect();
            (x, r)
        }
        None => (vec![Complex64::new(0.0, 0.0); n], b.to_vec()),
    };
    let mut rel = norm(&r) / b_norm;
    if rel <= tol {
        return (x, 0, rel);
    }
    let mut z = vec![Complex64::new(0.0, 0.0); n];
    pre.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z).re;
    for it in 1..=max_iter {
        op.apply(&p, &mut q);
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += pi * lambda;
        }
        let alpha = rz / dot(&p, &q).re;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= q[i] * alpha;
        }
        rel = norm(&r) / b_norm;
        if rel <= tol {
            return (x, it, rel);
        }
        pre.apply(&r, &mut z);
        let rz_new = dot(&r, &z).re;
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
    }
    (x, max_iter, rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from(decisions: Vec<Vec<i8>>) -> ControlTrace {
        ControlTrace::new(decisions, 1.0).unwrap()
    }

    #[test]
    fn zero_taps_give_zero() {
        let t = trace_from(vec![vec![1, -1, 1, 1, -1, -1, 1, -1, 1, 1]]);
        let y = estimate(&t, &FirEstimator::zeros(1, 4)).unwrap();
        assert_eq!(y.len(), 6);
        assert!(y.iter().all(|v| v.re == 0.0 && v.im == 0.0));
    }

    #[test]
    fn unit_tap_reproduces_channel() {
        let s1 = vec![1, -1, 1, 1, -1, -1, 1, -1, 1, 1, 1, -1];
        let s0 = vec![-1; 12];
        let t = trace_from(vec![s0, s1.clone()]);
        let mut f = FirEstimator::zeros(2, 4);
        f.bank_mut(0, 1)[2] = 1.0; // m = 0
        let y = estimate(&t, &f).unwrap();
        for (j, v) in y.iter().enumerate() {
            assert_eq!(v.re, s1[j + 2] as f64);
            assert_eq!(v.im, 0.0);
        }
    }

    #[test]
    fn channel_mismatch() {
        let t = trace_from(vec![vec![1; 16]]);
        assert_eq!(
            estimate(&t, &FirEstimator::zeros(2, 4)),
            Err(Error::ChannelMismatch {
                trace: 1,
                filter: 2
            })
        );
    }

    #[test]
    fn binary_round_trip() {
        let mut f = FirEstimator::zeros(3, 6);
        for (i, v) in f.h.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 8 * 36);
        assert_eq!(FirEstimator::read_binary(buf.as_slice()).unwrap(), f);
        buf[0] = b'X';
        assert!(FirEstimator::read_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn under_determined_is_rejected() {
        let t = trace_from(vec![vec![1; 100]; 2]);
        let z = vec![0.0; 100];
        let cfg = CalibrationConfig {
            taps: 16,
            ..Default::default()
        };
        assert!(matches!(
            calibrate(&t, (&z, &z), &cfg),
            Err(Error::UnderDetermined { required: 128, .. })
        ));
    }
}
