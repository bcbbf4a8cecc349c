//! The full-reference MOS-like quality metric.
//!
//! Stages: independent level alignment of reference and degraded signals
//! (band-pass weighted power, standard or outlier-robust estimator), 32 ms /
//! 50 % overlap short-time power spectra, critical-band pooling with
//! compressive loudness, per-frame symmetric and asymmetric disturbances with
//! a masking deadzone, L6-in-syllable / L2-across-syllable time aggregation,
//! and an affine raw score optionally mapped through a logistic to the
//! listening-quality scale.
//!
//! Every numeric constant the metric depends on lives in [`constants`], in
//! one place, so alternates can be calibrated against an external oracle.
//!
//! There is deliberately no time alignment: pairs are assumed
//! sample-aligned.

pub mod bands;
pub(crate) mod pipeline;

use crate::audio::{UtterancePair, Waveform};
use crate::dsp::{self, BiquadCascade, PowerSpectrogram};
use crate::error::{Error, Result};

pub use pipeline::Pipeline;

/// Every tunable constant of the metric, in one table.
///
/// The stage structure is fixed; these values position the metric on the MOS
/// scale and are the calibration surface against external references.
pub mod constants {
    /// Only wideband 16 kHz scoring is supported.
    pub const SAMPLE_RATE_HZ: u32 = 16000;
    /// Analysis frame of 512 samples = 32 ms at 16 kHz.
    pub const FRAME_SIZE: usize = 512;
    /// 50 % overlap.
    pub const FRAME_HOP: usize = 256;
    /// Critical-band count at 16 kHz.
    pub const BARK_BANDS: usize = 49;
    /// Level-alignment band-pass, lower edge (Hz).
    pub const LEVEL_BANDPASS_LOW_HZ: f64 = 325.0;
    /// Level-alignment band-pass, upper edge (Hz).
    pub const LEVEL_BANDPASS_HIGH_HZ: f64 = 3250.0;
    /// Mean band-passed power both signals are scaled to before comparison.
    pub const TARGET_LEVEL_POWER: f64 = 0.05;
    /// Declared SPL of a signal at the alignment target; anchors absolute
    /// hearing thresholds to the internal power scale.
    pub const SPEECH_SPL_DB: f64 = 79.0;
    /// Zwicker-law compression exponent.
    pub const ZWICKER_GAMMA: f64 = 0.23;
    /// Overall loudness scale; positions disturbances on the MOS scale.
    pub const LOUDNESS_SCALE: f64 = 1.2;
    /// Fraction of the smaller loudness masked away from each difference.
    pub const MASKING_DEADZONE: f64 = 0.25;
    /// Exponent of the additive-disturbance emphasis ratio.
    pub const ASYM_EXPONENT: f64 = 1.2;
    /// Asymmetry factors below this are zeroed (missing energy is cheap).
    pub const ASYM_FLOOR: f64 = 3.0;
    /// Asymmetry factors are capped here.
    pub const ASYM_CAP: f64 = 12.0;
    /// SPL of the regularizing offset inside the asymmetry power ratio.
    pub const ASYM_OFFSET_SPL_DB: f64 = 40.0;
    /// Frames per syllabic aggregation interval (20 x 16 ms = 320 ms).
    pub const SYLLABLE_FRAMES: usize = 20;
    /// Raw score: `4.5 - 0.1 * D_sym - 0.0309 * D_asym`.
    pub const MOS_CEILING: f64 = 4.5;
    pub const MOS_SYM_WEIGHT: f64 = 0.1;
    pub const MOS_ASYM_WEIGHT: f64 = 0.0309;
    /// Wideband listening-quality logistic `0.999 + 4 / (1 + e^(a*x + b))`.
    pub const LQO_SLOPE: f64 = -1.3669;
    pub const LQO_OFFSET: f64 = 3.8224;
    pub const LQO_MIN: f64 = 0.999;
    pub const LQO_MAX: f64 = 4.999;
    /// Sharpness of the smooth max/min replacements in gradient mode.
    pub const SMOOTH_SHARPNESS: f64 = 100.0;
    /// Additive epsilon inside smooth-mode norms, keeps gradients finite at
    /// exactly-zero disturbance.
    pub const NORM_EPS: f64 = 1e-20;
    /// Below this mean power a signal cannot be level-normalized.
    pub const LEVEL_EPS: f64 = 1e-14;
    /// Reference signals with less active speech get `support = false`.
    pub const MIN_ACTIVE_SPEECH_S: f64 = 3.2;
}

use constants::*;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How the per-signal power level is estimated before alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelEstimator {
    /// Mean of squared band-passed samples. Sensitive to single-sample
    /// outliers; this is the attackable variant.
    SumOfSquares,
    /// Nearest-rank 85th percentile of the squared band-passed samples,
    /// reported as mean-equivalent power. Immune to isolated clicks.
    Percentile85,
}

/// Output scale of the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MosMapping {
    /// The raw affine score, ceiling 4.5.
    Raw,
    /// Logistic listening-quality mapping into (0.999, 4.999).
    LqoLogistic,
}

/// Hard or smoothed nonlinearities in the disturbance stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothMode {
    /// Exact clipping; the evaluation mode.
    Hard,
    /// Smooth max/min with sharpness [`constants::SMOOTH_SHARPNESS`];
    /// required for finite-difference-verifiable gradients.
    Smooth,
}

/// Metric configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub level_estimator: LevelEstimator,
    pub target_level: f64,
    pub bark_bands: usize,
    pub sample_rate_hz: u32,
    pub mos_mapping: MosMapping,
    pub smoothing: SmoothMode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            level_estimator: LevelEstimator::SumOfSquares,
            target_level: TARGET_LEVEL_POWER,
            bark_bands: BARK_BANDS,
            sample_rate_hz: SAMPLE_RATE_HZ,
            mos_mapping: MosMapping::LqoLogistic,
            smoothing: SmoothMode::Hard,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::Config(format!(
                "metric operates at {SAMPLE_RATE_HZ} Hz, got {}",
                self.sample_rate_hz
            )));
        }
        if self.bark_bands != BARK_BANDS {
            return Err(Error::Config(format!(
                "band count is fixed at {BARK_BANDS} at 16 kHz, got {}",
                self.bark_bands
            )));
        }
        if !(self.target_level > 0.0) {
            return Err(Error::Config("target level must be positive".into()));
        }
        Ok(())
    }

    pub fn with_estimator(mut self, e: LevelEstimator) -> Self {
        self.level_estimator = e;
        self
    }

    pub fn with_mapping(mut self, m: MosMapping) -> Self {
        self.mos_mapping = m;
        self
    }

    pub fn with_smoothing(mut self, s: SmoothMode) -> Self {
        self.smoothing = s;
        self
    }

    /// Highest value the configured mapping can produce (zero disturbance).
    pub fn max_mapping_value(&self) -> f64 {
        match self.mos_mapping {
            MosMapping::Raw => MOS_CEILING,
            MosMapping::LqoLogistic => lqo_map(MOS_CEILING),
        }
    }
}

/// A scored utterance pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MosScore {
    /// Score on the configured mapping's scale.
    pub value: f64,
    /// True when the reference carries at least
    /// [`constants::MIN_ACTIVE_SPEECH_S`] of active speech.
    pub support: bool,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Pointwise pieces shared by forward evaluation and the backward pass
// ---------------------------------------------------------------------------

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x > 35.0 {
        1.0
    } else if x < -35.0 {
        0.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// `max(x, 0)` smoothed as `softplus(k x)/k`.
pub(crate) fn smooth_relu(x: f64, k: f64) -> f64 {
    let kx = k * x;
    if kx > 35.0 {
        x
    } else if kx < -35.0 {
        0.0
    } else {
        kx.exp().ln_1p() / k
    }
}

/// Zwicker-law loudness of one band power against its absolute threshold.
pub(crate) fn zwicker(p: f64, p0: f64) -> f64 {
    if p <= p0 {
        0.0
    } else {
        LOUDNESS_SCALE
            * (p0 / 0.5).powf(ZWICKER_GAMMA)
            * ((0.5 + 0.5 * p / p0).powf(ZWICKER_GAMMA) - 1.0)
    }
}

pub(crate) fn zwicker_deriv(p: f64, p0: f64) -> f64 {
    if p <= p0 {
        0.0
    } else {
        LOUDNESS_SCALE
            * (p0 / 0.5).powf(ZWICKER_GAMMA)
            * ZWICKER_GAMMA
            * (0.5 + 0.5 * p / p0).powf(ZWICKER_GAMMA - 1.0)
            * (0.5 / p0)
    }
}

/// Per-band disturbance terms plus the partials the backward pass needs
/// (derivatives are with respect to the degraded-side inputs only; the
/// reference is a constant of the optimization).
#[derive(Debug, Clone, Copy)]
pub(crate) struct BandTerms {
    pub masked: f64,
    pub h_eff: f64,
    pub dmasked_dld: f64,
    pub dheff_dpd: f64,
}

pub(crate) fn band_terms(
    l_ref: f64,
    l_deg: f64,
    p_ref: f64,
    p_deg: f64,
    asym_offset: f64,
    mode: SmoothMode,
) -> BandTerms {
    let k = SMOOTH_SHARPNESS;
    let d = l_deg - l_ref;
    let abs_d = d.abs();
    let sign_d = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };

    let (deadzone, ddz_dld) = match mode {
        SmoothMode::Hard => {
            let mn = l_ref.min(l_deg);
            (MASKING_DEADZONE * mn, if l_deg < l_ref { MASKING_DEADZONE } else { 0.0 })
        }
        SmoothMode::Smooth => {
            // smooth min(a, b) = a - smooth_relu(a - b)
            let mn = l_ref - smooth_relu(l_ref - l_deg, k);
            (
                MASKING_DEADZONE * mn,
                MASKING_DEADZONE * sigmoid(k * (l_ref - l_deg)),
            )
        }
    };

    let arg = abs_d - deadzone;
    let (masked, dmasked_darg) = match mode {
        SmoothMode::Hard => (arg.max(0.0), if arg > 0.0 { 1.0 } else { 0.0 }),
        SmoothMode::Smooth => (smooth_relu(arg, k), sigmoid(k * arg)),
    };
    let dmasked_dld = dmasked_darg * (sign_d - ddz_dld);

    let ratio = (p_deg + asym_offset) / (p_ref + asym_offset);
    let h_raw = ratio.powf(ASYM_EXPONENT);
    let dhraw_dpd = ASYM_EXPONENT * h_raw / (p_deg + asym_offset);
    let (h_eff, dheff_dhraw) = match mode {
        SmoothMode::Hard => {
            if h_raw < ASYM_FLOOR {
                (0.0, 0.0)
            } else if h_raw > ASYM_CAP {
                (ASYM_CAP, 0.0)
            } else {
                (h_raw, 1.0)
            }
        }
        SmoothMode::Smooth => {
            let capped = h_raw - smooth_relu(h_raw - ASYM_CAP, k);
            let dcapped = 1.0 - sigmoid(k * (h_raw - ASYM_CAP));
            let gate = sigmoid(k * (h_raw - ASYM_FLOOR));
            let dgate = k * gate * (1.0 - gate);
            (capped * gate, dcapped * gate + capped * dgate)
        }
    };

    BandTerms {
        masked,
        h_eff,
        dmasked_dld,
        dheff_dpd: dheff_dhraw * dhraw_dpd,
    }
}

/// Syllabic L6 grouping followed by an L2 over groups. Returns the group
/// values and the aggregate.
pub(crate) fn aggregate_frames(frames: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let groups: Vec<f64> = frames
        .chunks(SYLLABLE_FRAMES)
        .map(|chunk| {
            let m = chunk.iter().map(|&v| v.powi(6)).sum::<f64>() / chunk.len() as f64;
            (m + eps).powf(1.0 / 6.0)
        })
        .collect();
    let msq = groups.iter().map(|&g| g * g).sum::<f64>() / groups.len() as f64;
    let d = (msq + eps).sqrt();
    (groups, d)
}

pub(crate) fn raw_mos(d_sym: f64, d_asym: f64) -> f64 {
    MOS_CEILING - MOS_SYM_WEIGHT * d_sym - MOS_ASYM_WEIGHT * d_asym
}

/// Raw-to-LQO logistic.
pub(crate) fn lqo_map(raw: f64) -> f64 {
    let u = LQO_SLOPE * raw + LQO_OFFSET;
    LQO_MIN + (LQO_MAX - LQO_MIN) * sigmoid(-u)
}

pub(crate) fn lqo_map_deriv(raw: f64) -> f64 {
    let u = LQO_SLOPE * raw + LQO_OFFSET;
    let s = sigmoid(-u);
    -(LQO_MAX - LQO_MIN) * s * (1.0 - s) * LQO_SLOPE
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Estimates the power level used for alignment: the signal is band-pass
/// weighted (pass [`BiquadCascade::identity`] to bypass) and reduced by the
/// chosen estimator.
pub fn estimate_level(
    x: &Waveform,
    estimator: LevelEstimator,
    bandpass: &BiquadCascade,
) -> Result<f64> {
    let filtered;
    let samples = if bandpass.is_identity() {
        x.samples()
    } else {
        filtered = bandpass.filter(x.samples());
        &filtered
    };
    level_of(samples, estimator).map(|(v, _)| v)
}

/// Level of already band-passed samples, with the order-statistic index for
/// the percentile estimator (the backward pass needs it).
pub(crate) fn level_of(bp: &[f64], estimator: LevelEstimator) -> Result<(f64, Option<usize>)> {
    let (value, idx) = match estimator {
        LevelEstimator::SumOfSquares => {
            let mean = bp.iter().map(|v| v * v).sum::<f64>() / bp.len() as f64;
            (mean, None)
        }
        LevelEstimator::Percentile85 => {
            let (v, i) = dsp::percentile_of_squares_with_index(bp, 0.85)?;
            (v, Some(i))
        }
    };
    if value <= LEVEL_EPS {
        return Err(Error::DegenerateLevel(format!(
            "estimated power {value:.3e} <= {LEVEL_EPS:.0e}; cannot normalize"
        )));
    }
    Ok((value, idx))
}

/// Convenience wrapper: scores a pair with a fresh [`Pipeline`].
pub fn compute_metric(pair: &UtterancePair, cfg: &MetricConfig) -> Result<MosScore> {
    Pipeline::new(*cfg)?.score(pair)
}

/// Frame-by-band matrix (loudness or band power), frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    data: Vec<f64>,
    bands: usize,
}

impl BandMatrix {
    pub(crate) fn from_raw(data: Vec<f64>, bands: usize) -> Self {
        debug_assert!(bands > 0 && data.len() % bands == 0);
        BandMatrix { data, bands }
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.bands
    }

    pub fn n_bands(&self) -> usize {
        self.bands
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bands..(t + 1) * self.bands]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Scales both waveforms of a pair to the configured target level,
/// independently of each other. No time alignment is performed.
pub fn align_levels(pair: &UtterancePair, cfg: &MetricConfig) -> Result<UtterancePair> {
    let p = Pipeline::new(*cfg)?;
    p.align_levels(pair)
}

/// Pools a one-sided power spectrogram into critical bands and applies the
/// loudness transform. See [`Pipeline::bark_loudness`].
pub fn bark_loudness(power: &PowerSpectrogram, cfg: &MetricConfig) -> Result<BandMatrix> {
    Pipeline::new(*cfg)?.bark_loudness(power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zwicker_threshold_and_monotonicity() {
        let p0 = 6.7e-5;
        assert_eq!(zwicker(p0 * 0.5, p0), 0.0);
        // closed-form oracle at P = P0 and P = 3 P0
        assert_eq!(zwicker(p0, p0), 0.0);
        let expected = LOUDNESS_SCALE
            * (p0 / 0.5).powf(ZWICKER_GAMMA)
            * ((0.5f64 + 0.5 * 3.0).powf(ZWICKER_GAMMA) - 1.0);
        assert_relative_eq!(zwicker(3.0 * p0, p0), expected, max_relative = 1e-12);
        // doubling power strictly increases loudness above threshold
        for p in [2.0 * p0, 10.0 * p0, 1e3 * p0] {
            assert!(zwicker(2.0 * p, p0) > zwicker(p, p0));
        }
    }

    #[test]
    fn zwicker_derivative_matches_finite_difference() {
        let p0 = 6.7e-5;
        for p in [2.0 * p0, 50.0 * p0, 1e4 * p0] {
            let h = p * 1e-7;
            let fd = (zwicker(p + h, p0) - zwicker(p - h, p0)) / (2.0 * h);
            assert_relative_eq!(zwicker_deriv(p, p0), fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn lqo_map_range_and_ceiling() {
        assert_relative_eq!(lqo_map(4.5), 4.6438, epsilon = 1e-3);
        for raw in [-5.0, 0.0, 2.0, 4.5, 10.0] {
            let v = lqo_map(raw);
            assert!(v > LQO_MIN && v < LQO_MAX);
        }
        // logistic is increasing
        assert!(lqo_map(3.0) > lqo_map(2.0));
    }

    #[test]
    fn lqo_derivative_matches_finite_difference() {
        for raw in [0.5, 2.0, 4.4] {
            let h = 1e-6;
            let fd = (lqo_map(raw + h) - lqo_map(raw - h)) / (2.0 * h);
            assert_relative_eq!(lqo_map_deriv(raw), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn band_terms_zero_difference_is_zero() {
        for mode in [SmoothMode::Hard, SmoothMode::Smooth] {
            let t = band_terms(2.0, 2.0, 10.0, 10.0, 0.3, mode);
            // smooth mode leaves a ~log(2)/k residue; hard mode is exact
            match mode {
                SmoothMode::Hard => assert_eq!(t.masked, 0.0),
                SmoothMode::Smooth => assert!(t.masked < 1e-2),
            }
        }
    }

    #[test]
    fn band_terms_subdeadzone_difference_is_masked() {
        // |d| = 0.1 < 0.25 * min = 0.5
        let t = band_terms(2.0, 2.1, 10.0, 10.0, 0.3, SmoothMode::Hard);
        assert_eq!(t.masked, 0.0);
    }

    #[test]
    fn band_terms_asym_floor_and_cap() {
        // ratio ~1 -> h_raw ~1 < floor -> zeroed
        let t = band_terms(1.0, 2.0, 10.0, 10.0, 0.3, SmoothMode::Hard);
        assert_eq!(t.h_eff, 0.0);
        // huge ratio -> capped at 12
        let t = band_terms(0.0, 3.0, 0.0, 1e6, 0.3, SmoothMode::Hard);
        assert_eq!(t.h_eff, ASYM_CAP);
        // mid ratio passes through
        let t = band_terms(0.0, 3.0, 1.0, 4.0, 0.3, SmoothMode::Hard);
        let expect = ((4.0f64 + 0.3) / (1.0 + 0.3)).powf(ASYM_EXPONENT);
        assert!(expect > ASYM_FLOOR && expect < ASYM_CAP);
        assert_relative_eq!(t.h_eff, expect, max_relative = 1e-12);
    }

    #[test]
    fn band_terms_partials_match_finite_differences_smooth() {
        let (lr, pr, off) = (1.7, 25.0, 0.3);
        for (ld, pd) in [(0.9, 11.0), (2.4, 80.0), (1.7001, 25.0)] {
            let h = 1e-6;
            let f = |ld: f64, pd: f64| band_terms(lr, ld, pr, pd, off, SmoothMode::Smooth);
            let t = f(ld, pd);
            let fd_m = (f(ld + h, pd).masked - f(ld - h, pd).masked) / (2.0 * h);
            assert_relative_eq!(t.dmasked_dld, fd_m, epsilon = 1e-4);
            let fd_h = (f(ld, pd + h).h_eff - f(ld, pd - h).h_eff) / (2.0 * h);
            assert_relative_eq!(t.dheff_dpd, fd_h, epsilon = 1e-4, max_relative = 1e-4);
        }
    }

    #[test]
    fn aggregate_is_zero_for_zero_and_scales() {
        let (_, d) = aggregate_frames(&[0.0; 64], 0.0);
        assert_eq!(d, 0.0);
        let frames: Vec<f64> = (0..64).map(|i| (i % 7) as f64 * 0.3).collect();
        let (_, d1) = aggregate_frames(&frames, 0.0);
        let doubled: Vec<f64> = frames.iter().map(|v| 2.0 * v).collect();
        let (_, d2) = aggregate_frames(&doubled, 0.0);
        assert_relative_eq!(d2, 2.0 * d1, max_relative = 1e-12);
        // straight-line oracle on a small input
        let small = [1.0, 2.0, 0.5];
        let (_, d) = aggregate_frames(&small, 0.0);
        let l6 = ((1.0f64 + 64.0 + 0.015625) / 3.0).powf(1.0 / 6.0);
        assert_relative_eq!(d, l6, max_relative = 1e-12);
    }

    #[test]
    fn estimate_level_click_and_tone() {
        use crate::audio::Waveform;
        let id = BiquadCascade::identity();
        // zeros + click 666 at index 0, sum of squares, band-pass bypassed
        let mut s = vec![0.0; 48000];
        s[0] = 666.0;
        let w = Waveform::new(s, 16000).unwrap();
        let lvl = estimate_level(&w, LevelEstimator::SumOfSquares, &id).unwrap();
        assert_relative_eq!(lvl, 666.0 * 666.0 / 48000.0, max_relative = 1e-12);
        // same input through the percentile estimator: degenerate
        assert!(matches!(
            estimate_level(&w, LevelEstimator::Percentile85, &id),
            Err(Error::DegenerateLevel(_))
        ));
        // unit-amplitude 1 kHz tone has mean power one half
        let tone: Vec<f64> = (0..16000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin())
            .collect();
        let w = Waveform::new(tone, 16000).unwrap();
        let lvl = estimate_level(&w, LevelEstimator::SumOfSquares, &id).unwrap();
        assert_relative_eq!(lvl, 0.5, max_relative = 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MetricConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.bark_bands = 24;
        assert!(cfg.validate().is_err());
        let mut cfg = MetricConfig::default();
        cfg.sample_rate_hz = 8000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn max_mapping_values() {
        let raw = MetricConfig::default().with_mapping(MosMapping::Raw);
        assert_eq!(raw.max_mapping_value(), 4.5);
        let lqo = MetricConfig::default().with_mapping(MosMapping::LqoLogistic);
        assert_relative_eq!(lqo.max_mapping_value(), lqo_map(4.5), epsilon = 1e-15);
    }
}
