//! Shared DSP primitives: windows, short-time power spectra, IIR cascades,
//! percentile statistics and energy-based speech activity.
//!
//! The short-time transform deliberately uses the zero-endpoint ("periodic")
//! Hann window. `w[0] == 0` makes the first sample of a frame-aligned signal
//! invisible to the spectrum, which is load-bearing for the click-attack
//! analysis, so it is pinned by tests rather than left as a window-family
//! choice.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Default speech-activity threshold relative to global RMS, in dB.
pub const ACTIVE_SPEECH_THRESHOLD_DB: f64 = -35.0;

/// Speech-activity analysis frame length in seconds (20 ms).
pub const ACTIVE_SPEECH_FRAME_S: f64 = 0.02;

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// Zero-endpoint Hann window: `w[k] = 0.5 - 0.5*cos(2*pi*k/n)`, `w[0] == 0`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Argument(format!("window length {n} < 2")));
    }
    Ok((0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect())
}

// ---------------------------------------------------------------------------
// Short-time power spectra
// ---------------------------------------------------------------------------

/// Framing configuration for [`stft_power`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    /// FFT length in samples; also the (zero-endpoint Hann) window length.
    pub fft_size: usize,
    /// Hop between frame starts in samples.
    pub hop: usize,
    /// When true, the signal is padded with `fft_size/2` zeros on both sides
    /// before framing.
    pub center_padding: bool,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize, center_padding: bool) -> Result<Self> {
        if fft_size < 2 {
            return Err(Error::Argument(format!("fft_size {fft_size} < 2")));
        }
        if hop == 0 || hop > fft_size {
            return Err(Error::Argument(format!(
                "hop {hop} must be in 1..={fft_size}"
            )));
        }
        Ok(StftConfig {
            fft_size,
            hop,
            center_padding,
        })
    }

    /// One-sided bin count: `fft_size/2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `n` samples. Frames that
    /// would overrun the (padded) signal are dropped; there is no tail
    /// padding.
    pub fn frames_for(&self, n: usize) -> usize {
        let total = if self.center_padding {
            n + self.fft_size
        } else {
            n
        };
        if total < self.fft_size {
            0
        } else {
            (total - self.fft_size) / self.hop + 1
        }
    }
}

/// Frame-by-bin power matrix stored row-major (frame-major).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    data: Vec<f64>,
    bins: usize,
}

impl PowerSpectrogram {
    pub(crate) fn from_raw(data: Vec<f64>, bins: usize) -> Self {
        debug_assert!(bins > 0 && data.len() % bins == 0);
        PowerSpectrogram { data, bins }
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.bins
    }

    pub fn n_bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Computes the one-sided short-time power spectrum of `x`.
///
/// Frame `t`, bin `k` holds `|sum_n w[n] x[t*hop + n] e^{-2πikn/fft_size}|²`.
pub fn stft_power(x: &Waveform, cfg: &StftConfig) -> Result<PowerSpectrogram> {
    stft_power_slice(x.samples(), cfg)
}

/// [`stft_power`] on a raw sample slice.
pub fn stft_power_slice(x: &[f64], cfg: &StftConfig) -> Result<PowerSpectrogram> {
    let frames = cfg.frames_for(x.len());
    if frames == 0 {
        return Err(Error::Argument(format!(
            "signal of {} samples is shorter than one {}-sample frame",
            x.len(),
            cfg.fft_size
        )));
    }
    let window = hann_window(cfg.fft_size)?;
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.bins();
    let pad = if cfg.center_padding {
        cfg.fft_size / 2
    } else {
        0
    };

    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = start + n;
            // index into the virtually padded signal
            let s = if idx < pad || idx >= pad + x.len() {
                0.0
            } else {
                x[idx - pad]
            };
            *slot = Complex64::new(window[n] * s, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(PowerSpectrogram::from_raw(out, bins))
}

// ---------------------------------------------------------------------------
// Biquad cascades
// ---------------------------------------------------------------------------

/// One second-order IIR section, direct-form coefficients with `a0 == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiquadSection {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadSection {
    /// Both poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.a2 < 1.0 && self.a1 < 1.0 + self.a2 && -self.a1 < 1.0 + self.a2
    }
}

/// A cascade of stable biquad sections. An empty cascade is the identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiquadCascade {
    sections: Vec<BiquadSection>,
}

impl BiquadCascade {
    pub fn new(sections: Vec<BiquadSection>) -> Result<Self> {
        for (i, s) in sections.iter().enumerate() {
            if !s.is_stable() {
                return Err(Error::Config(format!(
                    "biquad section {i} is unstable (a1={}, a2={})",
                    s.a1, s.a2
                )));
            }
        }
        Ok(BiquadCascade { sections })
    }

    /// The identity filter (no sections); used to bypass band-pass weighting.
    pub fn identity() -> Self {
        BiquadCascade::default()
    }

    pub fn sections(&self) -> &[BiquadSection] {
        &self.sections
    }

    pub fn is_identity(&self) -> bool {
        self.sections.is_empty()
    }

    /// Applies the cascade with zero initial state (direct form,
    /// transposed II). Output length equals input length.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let mut z1 = 0.0;
            let mut z2 = 0.0;
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b0 * xin + z1;
                z1 = s.b1 * xin - s.a1 * out + z2;
                z2 = s.b2 * xin - s.a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Applies the transpose of [`BiquadCascade::filter`] viewed as a linear
    /// map: the same cascade run anti-causally. Satisfies
    /// `dot(filter(x), g) == dot(x, filter_adjoint(g))`.
    pub fn filter_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut rev: Vec<f64> = g.iter().rev().copied().collect();
        rev = self.filter(&rev);
        rev.reverse();
        rev
    }

    /// Frequency response at normalized angular frequency `omega` (rad per
    /// sample): `H(e^{j omega})`.
    pub fn response_at(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega); // z^-1
        let z2 = z1 * z1;
        let mut h = Complex64::new(1.0, 0.0);
        for s in &self.sections {
            let num = Complex64::new(s.b0, 0.0) + z1 * s.b1 + z2 * s.b2;
            let den = Complex64::new(1.0, 0.0) + z1 * s.a1 + z2 * s.a2;
            h *= num / den;
        }
        h
    }
}

/// Filters a waveform through a stable cascade.
pub fn biquad_filter(x: &Waveform, f: &BiquadCascade) -> Result<Waveform> {
    x.with_samples(f.filter(x.samples()))
}

/// Designs a 4th-order Butterworth band-pass (two biquad sections) between
/// `low_hz` and `high_hz`, gain-normalized to 1 at the geometric center
/// frequency.
pub fn butterworth_bandpass(low_hz: f64, high_hz: f64, sample_rate_hz: u32) -> Result<BiquadCascade> {
    let fs = sample_rate_hz as f64;
    if !(0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::Config(format!(
            "band edges {low_hz}..{high_hz} Hz invalid for fs {fs} Hz"
        )));
    }

    // bilinear prewarp of the band edges
    let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
    let wl = warp(low_hz);
    let wh = warp(high_hz);
    let w0sq = wl * wh;
    let bw = wh - wl;

    // order-2 Butterworth prototype pole in the upper half plane; its
    // conjugate contributes the conjugate root set
    let proto = Complex64::from_polar(1.0, 3.0 * std::f64::consts::PI / 4.0);

    // low-pass -> band-pass: s_bp solves s^2 - p*bw*s + w0^2 = 0
    let disc = (proto * bw).powi(2) - 4.0 * w0sq;
    let sq = disc.sqrt();
    let analog_poles = [(proto * bw + sq) / 2.0, (proto * bw - sq) / 2.0];

    // bilinear transform; the band-pass zeros (two at s=0, two at infinity)
    // become (1 - z^-1)(1 + z^-1) = 1 - z^-2 per section
    let two_fs = 2.0 * fs;
    let mut sections = Vec::with_capacity(2);
    for &sp in &analog_poles {
        let zp = (two_fs + sp) / (two_fs - sp);
        let a1 = -2.0 * zp.re;
        let a2 = zp.norm_sqr();
        sections.push(BiquadSection {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1,
            a2,
        });
    }
    let mut cascade = BiquadCascade::new(sections)?;

    // normalize to unit gain at the geometric center
    let wc = 2.0 * std::f64::consts::PI * (low_hz * high_hz).sqrt() / fs;
    let gain = cascade.response_at(wc).norm();
    if gain <= 0.0 || !gain.is_finite() {
        return Err(Error::Config("degenerate band-pass gain".into()));
    }
    let g = gain.sqrt();
    for s in &mut cascade.sections {
        s.b0 /= g;
        s.b2 = -s.b0;
    }
    Ok(cascade)
}

// ---------------------------------------------------------------------------
// Percentile statistics
// ---------------------------------------------------------------------------

/// Nearest-rank `p`-quantile of the squared samples: index `ceil(p*N) - 1`
/// of the ascending sorted squares.
pub fn percentile_of_squares(x: &[f64], p: f64) -> Result<f64> {
    percentile_of_squares_with_index(x, p).map(|(v, _)| v)
}

/// Like [`percentile_of_squares`] but also reports which input index holds
/// the selected order statistic (ties broken by input position). The index is
/// what makes the statistic differentiable almost everywhere.
pub fn percentile_of_squares_with_index(x: &[f64], p: f64) -> Result<(f64, usize)> {
    if x.is_empty() {
        return Err(Error::Argument("percentile of empty input".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!("percentile fraction {p} not in [0,1]")));
    }
    let n = x.len();
    let rank = ((p * n as f64).ceil() as usize).max(1) - 1;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (si, sj) = (x[i] * x[i], x[j] * x[j]);
        si.partial_cmp(&sj).unwrap().then(i.cmp(&j))
    });
    let idx = order[rank];
    Ok((x[idx] * x[idx], idx))
}

// ---------------------------------------------------------------------------
// Speech activity
// ---------------------------------------------------------------------------

/// Duration of 20 ms frames whose RMS exceeds the global RMS by more than
/// `threshold_db` (a negative threshold admits frames quieter than average).
/// A silent signal yields 0 s.
pub fn active_speech_seconds(x: &Waveform, threshold_db: f64) -> f64 {
    let frame = ((x.sample_rate_hz() as f64) * ACTIVE_SPEECH_FRAME_S).round() as usize;
    let samples = x.samples();
    let global_ms = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    if global_ms <= 0.0 {
        return 0.0;
    }
    let gate_ms = global_ms * 10f64.powf(threshold_db / 10.0);
    let mut active = 0usize;
    for chunk in samples.chunks_exact(frame) {
        let ms = chunk.iter().map(|s| s * s).sum::<f64>() / frame as f64;
        if ms > gate_ms {
            active += 1;
        }
    }
    active as f64 * ACTIVE_SPEECH_FRAME_S
}
