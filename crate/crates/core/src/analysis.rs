//! Spectral analysis of the complex estimate: PSD, in-band SNR and notch location.

use std::io::Write;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rectangular,
    /// Periodic Hann, so a bin-centred tone leaks into exactly one neighbour per side.
    Hann,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// Two-sided PSD, bins ordered from `-fs/2` up to (excluding) `fs/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub psd: Vec<f64>,
    pub nfft: usize,
    pub window: Window,
    pub fs: f64,
    pub segments: usize,
}

impl Spectrum {
    pub fn df(&self) -> f64 {
        self.fs / self.nfft as f64
    }

    pub fn frequency(&self, bin: usize) -> f64 {
        (bin as f64 - (self.nfft / 2) as f64) * self.df()
    }

    /// Fractional bin position of `f`.
    pub fn bin_position(&self, f: f64) -> f64 {
        f / self.df() + (self.nfft / 2) as f64
    }

    /// Nearest bin to `f`, if inside the span.
    pub fn bin_of(&self, f: f64) -> Option<usize> {
        let b = self.bin_position(f).round();
        (b >= 0.0 && b < self.nfft as f64).then_some(b as usize)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.nfft).map(|b| self.frequency(b)).collect()
    }

    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.df()
    }

    /// Columns `fT, dB` (`10 log10 psd`), optionally the non-negative half only.
    pub fn write_csv<W: Write>(&self, mut w: W, positive_only: bool) -> std::io::Result<()> {
        writeln!(w, "fT,dB")?;
        for (b, p) in self.psd.iter().enumerate() {
            let f = self.frequency(b);
            if positive_only && f < 0.0 {
                continue;
            }
            writeln!(w, "{},{:.6}", f / self.fs, 10.0 * p.max(1e-300).log10())?;
        }
        Ok(())
    }
}

/// Averaged windowed periodogram over non-overlapping `nfft` segments.
pub fn psd(signal: &[Complex64], nfft: usize, window: Window, fs: f64) -> Result<Spectrum> {
    if nfft == 0 || signal.len() < nfft {
        return Err(Error::TooShort {
            have: signal.len(),
            need: nfft.max(1),
        });
    }
    let w = window.coefficients(nfft);
    let w_energy: f64 = w.iter().map(|v| v * v).sum();
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let segments = signal.len() / nfft;
    let mut acc = vec![0.0; nfft];
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for s in 0..segments {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = signal[s * nfft + i] * w[i];
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let scale = 1.0 / (segments as f64 * fs * w_energy);
    // fftshift: output bin b holds FFT index (b + nfft/2) mod nfft.
    let half = nfft / 2;
    let psd = (0..nfft).map(|b| acc[(b + half) % nfft] * scale).collect();
    Ok(Spectrum {
        psd,
        nfft,
        window,
        fs,
        segments,
    })
}

pub const SNR_CEILING_DB: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub snr_db: f64,
    pub signal_power: f64,
    pub noise_power: f64,
    /// Hz.
    pub band: (f64, f64),
    pub signal_bins: Vec<usize>,
    /// Bins inside the band counted as neither signal nor noise.
    pub excluded_bins: Vec<usize>,
}

/// SNR of the tones at `tones` (Hz) against all other bins of `[f_center - bandwidth/2,
/// f_center + bandwidth/2]`; each tone claims its nearest bin and `guard` bins per side.
pub fn snr_in_band(
    spec: &Spectrum,
    f_center: f64,
    bandwidth: f64,
    tones: &[f64],
    guard: usize,
) -> Result<SnrReport> {
    let (lo, hi) = (f_center - bandwidth / 2.0, f_center + bandwidth / 2.0);
    if lo < -spec.fs / 2.0 || hi >= spec.fs / 2.0 || !(bandwidth > 0.0) {
        return Err(Error::BandOutOfRange { lo, hi });
    }
    let b_lo = spec.bin_position(lo).ceil() as usize;
    let b_hi = spec.bin_position(hi).floor() as usize;
    let mut signal_bins = Vec::new();
    for &f in tones {
        if !(lo..=hi).contains(&f) {
            return Err(Error::InvalidConfig(format!(
                "tone {f} Hz lies outside the band [{lo}, {hi}]"
            )));
        }
        let c = spec.bin_of(f).ok_or(Error::BandOutOfRange { lo, hi })?;
        for b in c.saturating_sub(guard)..=(c + guard).min(spec.nfft - 1) {
            if !signal_bins.contains(&b) {
                signal_bins.push(b);
            }
        }
    }
    signal_bins.sort_unstable();
    let df = spec.df();
    let signal_power: f64 = signal_bins.iter().map(|&b| spec.psd[b]).sum::<f64>() * df;
    let noise_power: f64 = (b_lo..=b_hi)
        .filter(|b| signal_bins.binary_search(b).is_err())
        .map(|b| spec.psd[b])
        .sum::<f64>()
        * df;
    let snr_db = if noise_power <= 0.0 {
        SNR_CEILING_DB
    } else {
        (10.0 * (signal_power / noise_power).log10()).min(SNR_CEILING_DB)
    };
    Ok(SnrReport {
        snr_db,
        signal_power,
        noise_power,
        band: (lo, hi),
        excluded_bins: Vec::new(),
        signal_bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NotchConfig {
    /// Running-mean width on the log-PSD, bins.
    pub smoothing_bins: usize,
    /// Half-width of the quadratic refinement, bins.
    pub fit_half_width: usize,
    /// Minimum spread between the highest and lowest level of the search span.
    pub min_depth_db: f64,
    /// Running-mean width used for the depth check and the symmetry search, bins.
    pub depth_smoothing_bins: usize,
    pub method: NotchMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotchMethod {
    /// Global minimum of the running-mean smoothed log-PSD, refined by a least-squares
    /// parabola over `+-fit_half_width` bins.
    SmoothedMinimum,
    /// Centre about which the lightly smoothed log-PSD is most mirror-symmetric.
    Symmetry,
}

impl Default for NotchConfig {
    fn default() -> Self {
        Self {
            smoothing_bins: 16,
            fit_half_width: 8,
            min_depth_db: 10.0,
            depth_smoothing_bins: 16,
            method: NotchMethod::SmoothedMinimum,
        }
    }
}

/// Notch frequency of a noise-shaped spectrum, looking only at `search` (Hz, default the
/// full span) with `exclude` bins ignored. Fails when the span varies by less than
/// `min_depth_db`. See [`NotchMethod`] for the location rule.
pub fn estimate_notch(
    spec: &Spectrum,
    exclude: &[usize],
    search: Option<(f64, f64)>,
    cfg: &NotchConfig,
) -> Result<f64> {
    let n = spec.nfft;
    let log: Vec<f64> = spec
        .psd
        .iter()
        .enumerate()
        .map(|(b, &p)| {
            if exclude.contains(&b) {
                f64::NAN
            } else {
                10.0 * p.max(1e-300).log10()
            }
        })
        .collect();
    let (s_lo, s_hi) = match search {
        Some((lo, hi)) => {
            let a = spec.bin_position(lo).ceil().max(0.0) as usize;
            let b = (spec.bin_position(hi).floor() as usize).min(n - 1);
            if a > b {
                return Err(Error::BandOutOfRange { lo, hi });
            }
            (a, b)
        }
        None => (0, n - 1),
    };
    // Only the search span feeds the smoothing.
    let mut log = log;
    for (b, v) in log.iter_mut().enumerate() {
        if b < s_lo || b > s_hi {
            *v = f64::NAN;
        }
    }
    // Depth is judged on a light smoothing so that narrow band edges still count.
    let light = running_mean(
        &log,
        cfg.depth_smoothing_bins.min(cfg.smoothing_bins.max(1)) / 2,
    );
    let span = light[s_lo..=s_hi].iter().copied().filter(|v| !v.is_nan());
    let (lo, hi) = span.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let depth = hi - lo;
    if !(depth >= cfg.min_depth_db) {
        return Err(Error::NoNotch {
            depth_db: if depth.is_finite() { depth } else { 0.0 },
        });
    }
    let position = match cfg.method {
        NotchMethod::SmoothedMinimum => {
            let smoothed = running_mean(&log, cfg.smoothing_bins / 2);
            let mut best: Option<usize> = None;
            for b in s_lo..=s_hi {
                if !smoothed[b].is_nan() && best.is_none_or(|m| smoothed[b] < smoothed[m]) {
                    best = Some(b);
                }
            }
            let bmin = best.ok_or(Error::NoNotch { depth_db: 0.0 })?;
            refine_vertex(&smoothed, bmin, cfg.fit_half_width)
        }
        NotchMethod::Symmetry => {
            mirror_center(&light, s_lo, s_hi).ok_or(Error::NoNotch { depth_db: depth })?
        }
    };
    Ok(spec.frequency(0) + position * spec.df())
}

/// Centre `c` (in bins, half-bin grid, refined by a parabola) minimising the mean squared
/// difference between `y[b]` and `y[2c - b]` over the span; candidates keep at least half
/// the span overlapping with its mirror image.
fn mirror_center(y: &[f64], lo: usize, hi: usize) -> Option<f64> {
    let width = hi - lo;
    // s = 2c; the mirror of b is s - b.
    let (s_min, s_max) = (2 * lo + width / 2, 2 * hi - width / 2);
    let cost = |s: usize| -> Option<f64> {
        let (mut acc, mut cnt) = (0.0, 0usize);
        let b_lo = lo.max(s.saturating_sub(hi));
        let b_hi = hi.min(s - lo);
        for b in b_lo..=b_hi {
            let (p, q) = (y[b], y[s - b]);
            if !p.is_nan() && !q.is_nan() {
                acc += (p - q) * (p - q);
                cnt += 1;
            }
        }
        (cnt * 2 > width).then(|| acc / cnt as f64)
    };
    let costs: Vec<Option<f64>> = (s_min..=s_max).map(cost).collect();
    let (imin, cmin) = costs
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let mut s = (s_min + imin) as f64;
    if let (Some(Some(l)), Some(Some(r))) =
        (imin.checked_sub(1).map(|i| costs[i]), costs.get(imin + 1))
    {
        let curv = l + r - 2.0 * cmin;
        if curv > 0.0 {
            s += (0.5 * (l - r) / curv).clamp(-1.0, 1.0);
        }
    }
    Some(s / 2.0)
}

/// Mean over `[b - half, b + half]` (clipped), skipping NaN; NaN where nothing remains.
fn running_mean(y: &[f64], half: usize) -> Vec<f64> {
    let n = y.len();
    let mut sum = vec![0.0; n + 1];
    let mut cnt = vec![0usize; n + 1];
    for (i, v) in y.iter().enumerate() {
        let ok = !v.is_nan();
        sum[i + 1] = sum[i] + if ok { *v } else { 0.0 };
        cnt[i + 1] = cnt[i] + usize::from(ok);
    }
    (0..n)
        .map(|b| {
            let (s, e) = (b.saturating_sub(half), (b + half + 1).min(n));
            let c = cnt[e] - cnt[s];
            if c == 0 {
                f64::NAN
            } else {
                (sum[e] - sum[s]) / c as f64
            }
        })
        .collect()
}

/// Vertex of the least-squares parabola through `y` around `center`; falls back to `center`
/// when the fit is not convex or the vertex leaves the window.
fn refine_vertex(y: &[f64], center: usize, half: usize) -> f64 {
    let lo = center.saturating_sub(half);
    let hi = (center + half).min(y.len() - 1);
    // Fit in local coordinates u = b - center.
    let mut s = [0.0f64; 5];
    let mut t = [0.0f64; 3];
    for b in lo..=hi {
        if y[b].is_nan() {
            continue;
        }
        let u = b as f64 - center as f64;
        let mut p = 1.0;
        for (k, sk) in s.iter_mut().enumerate() {
            *sk += p;
            if k < 3 {
                t[k] += p * y[b];
            }
            p *= u;
        }
    }
    let m = nalgebra::Matrix3::new(s[0], s[1], s[2], s[1], s[2], s[3], s[2], s[3], s[4]);
    let Some(coef) = m.lu().solve(&nalgebra::Vector3::new(t[0], t[1], t[2])) else {
        return center as f64;
    };
    let (b1, b2) = (coef[1], coef[2]);
    if b2 <= 0.0 {
        return center as f64;
    }
    let v = -b1 / (2.0 * b2);
    if v.abs() > half as f64 {
        center as f64
    } else {
        center as f64 + v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(n: usize, bin: f64, nfft: usize, amp: f64) -> Vec<Complex64> {
        (0..n)
            .map(|k| Complex64::from_polar(amp, 2.0 * PI * bin * k as f64 / nfft as f64))
            .collect()
    }

    #[test]
    fn bin_centred_tone_rectangular() {
        let x = tone(1024, 37.0, 1024, 1.0);
        let s = psd(&x, 1024, Window::Rectangular, 1.0).unwrap();
        let b = s.bin_of(37.0 / 1024.0).unwrap();
        assert_eq!(b, 512 + 37);
        assert!((s.psd[b] * s.df() - 1.0).abs() < 1e-9);
        assert!((s.total_power() - 1.0).abs() < 1e-9);
        let others: f64 = s
            .psd
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != b)
            .map(|(_, p)| p)
            .sum();
        assert!(others * s.df() < 1e-20);
    }

    #[test]
    fn too_short() {
        let x = tone(100, 1.0, 128, 1.0);
        assert!(matches!(
            psd(&x, 128, Window::Hann, 1.0),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn ceiling_for_pure_tone() {
        let x = tone(4096, 100.0, 4096, 1.0);
        let s = psd(&x, 4096, Window::Rectangular, 1.0).unwrap();
        let r = snr_in_band(&s, 100.0 / 4096.0, 0.02, &[100.0 / 4096.0], 3).unwrap();
        assert_eq!(r.snr_db, SNR_CEILING_DB);
    }

    #[test]
    fn band_outside_span() {
        let x = tone(256, 1.0, 256, 1.0);
        let s = psd(&x, 256, Window::Hann, 1.0).unwrap();
        assert!(matches!(
            snr_in_band(&s, 0.45, 0.2, &[0.45], 3),
            Err(Error::BandOutOfRange { .. })
        ));
    }

    fn parabola(vertex: f64) -> Spectrum {
        let n = 4096;
        let psd = (0..n)
            .map(|b| {
                let d = (b as f64 - vertex) / 50.0;
                10f64.powf((-40.0 + d * d) / 10.0)
            })
            .collect();
        Spectrum {
            psd,
            nfft: n,
            window: Window::Rectangular,
            fs: 1.0,
            segments: 1,
        }
    }

    #[test]
    fn parabola_vertex_on_bin() {
        let s = parabola(1000.0);
        let f = estimate_notch(&s, &[], None, &NotchConfig::default()).unwrap();
        assert!((s.bin_position(f) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn parabola_vertex_between_bins() {
        let s = parabola(1000.37);
        let f = estimate_notch(&s, &[], None, &NotchConfig::default()).unwrap();
        assert!((s.bin_position(f) - 1000.37).abs() < 0.2);
    }

    #[test]
    fn symmetry_centre_of_shaped_floor() {
        // Symmetric dips and edges around bin 1500.25, on a 4096-bin grid.
        let c = 1500.25;
        let psd = (0..4096)
            .map(|b| {
                let d = b as f64 - c;
                let edges = if d.abs() > 480.0 { 30.0 } else { 0.0 };
                10f64.powf((-60.0 + edges - 12.0 * (d / 70.0).cos().powi(8)) / 10.0)
            })
            .collect();
        let s = Spectrum {
            psd,
            nfft: 4096,
            window: Window::Hann,
            fs: 1.0,
            segments: 1,
        };
        let cfg = NotchConfig {
            method: NotchMethod::Symmetry,
            ..NotchConfig::default()
        };
        let search = Some((s.frequency(900), s.frequency(2100)));
        let f = estimate_notch(&s, &[], search, &cfg).unwrap();
        assert!((s.bin_position(f) - c).abs() < 0.3, "{}", s.bin_position(f));
    }

    #[test]
    fn flat_spectrum_has_no_notch() {
        let s = Spectrum {
            psd: vec![1e-6; 2048],
            nfft: 2048,
            window: Window::Hann,
            fs: 1.0,
            segments: 1,
        };
        assert!(matches!(
            estimate_notch(&s, &[], None, &NotchConfig::default()),
            Err(Error::NoNotch { .. })
        ));
    }
}
