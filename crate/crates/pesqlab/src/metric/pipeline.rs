//! Staged metric evaluation.
//!
//! One code path serves both plain scoring and gradient computation: the
//! forward pass records every intermediate the backward pass needs (a tape),
//! so a gradient's loss value is bit-identical to the standalone evaluation
//! under the same configuration.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::{UtterancePair, Waveform};
use crate::dsp::{
    active_speech_seconds, butterworth_bandpass, hann_window, BiquadCascade, PowerSpectrogram,
    StftConfig, ACTIVE_SPEECH_THRESHOLD_DB,
};
use crate::error::{Error, Result};
use crate::metric::bands::BandTable;
use crate::metric::constants::*;
use crate::metric::{
    aggregate_frames, band_terms, level_of, lqo_map, raw_mos, zwicker, BandMatrix, MetricConfig,
    MosMapping, MosScore, SmoothMode,
};

/// Per-signal stages kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct SignalStages {
    pub bandpassed: Vec<f64>,
    pub level: f64,
    /// Input index of the selected order statistic (percentile estimator).
    pub level_index: Option<usize>,
    pub gain: f64,
    pub aligned: Vec<f64>,
    /// One-sided complex spectra, frame-major (`frames * bins`); empty when
    /// not requested.
    pub spectra: Vec<Complex64>,
    /// Band powers, frame-major (`frames * bands`).
    pub band_power: Vec<f64>,
    /// Band loudness, frame-major.
    pub loudness: Vec<f64>,
    pub frames: usize,
}

/// Reference-side stages plus metadata; constant across an optimization run.
#[derive(Debug, Clone)]
pub struct PreparedReference {
    pub(crate) stages: SignalStages,
    pub(crate) active_speech_s: f64,
    pub(crate) len: usize,
}

/// Everything recorded during one degraded-side evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub reference: Arc<PreparedReference>,
    pub degraded: SignalStages,
    pub sym_frames: Vec<f64>,
    pub asym_frames: Vec<f64>,
    pub sym_groups: Vec<f64>,
    pub asym_groups: Vec<f64>,
    pub d_sym: f64,
    pub d_asym: f64,
    pub raw: f64,
    pub value: f64,
    pub mode: SmoothMode,
}

/// A reusable metric evaluator: configuration plus precomputed tables,
/// window, band-pass design and FFT plan.
pub struct Pipeline {
    pub(crate) cfg: MetricConfig,
    pub(crate) bands: BandTable,
    pub(crate) bandpass: BiquadCascade,
    pub(crate) window: Vec<f64>,
    pub(crate) fft: Arc<dyn Fft<f64>>,
}

impl Pipeline {
    pub fn new(cfg: MetricConfig) -> Result<Self> {
        cfg.validate()?;
        let bands = BandTable::new(cfg.bark_bands, cfg.sample_rate_hz, FRAME_SIZE)?;
        let bandpass = butterworth_bandpass(
            LEVEL_BANDPASS_LOW_HZ,
            LEVEL_BANDPASS_HIGH_HZ,
            cfg.sample_rate_hz,
        )?;
        let window = hann_window(FRAME_SIZE)?;
        let fft = FftPlanner::new().plan_fft_forward(FRAME_SIZE);
        Ok(Pipeline {
            cfg,
            bands,
            bandpass,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &MetricConfig {
        &self.cfg
    }

    /// The framing used by the metric front-end.
    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            fft_size: FRAME_SIZE,
            hop: FRAME_HOP,
            center_padding: false,
        }
    }

    /// Scores a pair end to end.
    pub fn score(&self, pair: &UtterancePair) -> Result<MosScore> {
        let reference = Arc::new(self.prepare_reference(&pair.reference)?);
        let (mut score, _) = self.evaluate_with_reference(&reference, &pair.degraded)?;
        score.warnings.extend(pair.warnings.iter().cloned());
        Ok(score)
    }

    /// Stages the reference once so repeated degraded-side evaluations (the
    /// optimizer's inner loop) skip the constant half of the work.
    pub fn prepare_reference(&self, reference: &Waveform) -> Result<PreparedReference> {
        self.check_rate(reference)?;
        let stages = self.stage_signal(reference.samples(), false)?;
        Ok(PreparedReference {
            stages,
            active_speech_s: active_speech_seconds(reference, ACTIVE_SPEECH_THRESHOLD_DB),
            len: reference.len(),
        })
    }

    /// Scores a degraded signal against a prepared reference, returning the
    /// tape alongside.
    pub(crate) fn evaluate_with_reference(
        &self,
        reference: &Arc<PreparedReference>,
        degraded: &Waveform,
    ) -> Result<(MosScore, Tape)> {
        self.check_rate(degraded)?;
        if degraded.len() != reference.len {
            return Err(Error::Validation(format!(
                "degraded length {} != reference length {}",
                degraded.len(),
                reference.len
            )));
        }

        let deg = self.stage_signal(degraded.samples(), true)?;
        let r = &reference.stages;
        debug_assert_eq!(deg.frames, r.frames);

        let n_bands = self.bands.n_bands();
        let eps = match self.cfg.smoothing {
            SmoothMode::Hard => 0.0,
            SmoothMode::Smooth => NORM_EPS,
        };

        let mut sym_frames = Vec::with_capacity(deg.frames);
        let mut asym_frames = Vec::with_capacity(deg.frames);
        for t in 0..deg.frames {
            let base = t * n_bands;
            let mut s2 = 0.0;
            let mut a2 = 0.0;
            for b in 0..n_bands {
                let terms = band_terms(
                    r.loudness[base + b],
                    deg.loudness[base + b],
                    r.band_power[base + b],
                    deg.band_power[base + b],
                    self.bands.asym_power_offset,
                    self.cfg.smoothing,
                );
                let w = self.bands.widths_bark[b];
                let sym_term = w * terms.masked;
                let asym_term = sym_term * terms.h_eff;
                s2 += sym_term * sym_term;
                a2 += asym_term * asym_term;
            }
            sym_frames.push((s2 + eps).sqrt());
            asym_frames.push((a2 + eps).sqrt());
        }

        let (sym_groups, d_sym) = aggregate_frames(&sym_frames, eps);
        let (asym_groups, d_asym) = aggregate_frames(&asym_frames, eps);
        let raw = raw_mos(d_sym, d_asym);
        let value = match self.cfg.mos_mapping {
            MosMapping::Raw => raw,
            MosMapping::LqoLogistic => lqo_map(raw),
        };
        if !value.is_finite() {
            return Err(Error::numeric(
                "aggregate_mos",
                format!("non-finite score (D_sym={d_sym}, D_asym={d_asym})"),
            ));
        }

        let score = self.mos_score(value, reference.active_speech_s);
        let tape = Tape {
            reference: Arc::clone(reference),
            degraded: deg,
            sym_frames,
            asym_frames,
            sym_groups,
            asym_groups,
            d_sym,
            d_asym,
            raw,
            value,
            mode: self.cfg.smoothing,
        };
        Ok((score, tape))
    }

    fn mos_score(&self, value: f64, active_speech_s: f64) -> MosScore {
        let support = active_speech_s >= MIN_ACTIVE_SPEECH_S;
        let mut warnings = Vec::new();
        if !support {
            warnings.push(format!(
                "reference has {active_speech_s:.2} s active speech, below the {MIN_ACTIVE_SPEECH_S} s support minimum"
            ));
        }
        MosScore {
            value,
            support,
            warnings,
        }
    }

    /// Builds [`MosScore`] from already aggregated per-frame disturbances.
    pub fn aggregate_mos(
        &self,
        sym: &[f64],
        asym: &[f64],
        active_speech_s: f64,
    ) -> Result<MosScore> {
        if sym.is_empty() || sym.len() != asym.len() {
            return Err(Error::Argument(format!(
                "need equal, non-empty frame vectors (got {} and {})",
                sym.len(),
                asym.len()
            )));
        }
        let eps = match self.cfg.smoothing {
            SmoothMode::Hard => 0.0,
            SmoothMode::Smooth => NORM_EPS,
        };
        let (_, d_sym) = aggregate_frames(sym, eps);
        let (_, d_asym) = aggregate_frames(asym, eps);
        let raw = raw_mos(d_sym, d_asym);
        let value = match self.cfg.mos_mapping {
            MosMapping::Raw => raw,
            MosMapping::LqoLogistic => lqo_map(raw),
        };
        Ok(self.mos_score(value, active_speech_s))
    }

    /// Per-frame symmetric and asymmetric disturbance between loudness
    /// frames; band powers feed the asymmetry emphasis ratio.
    pub fn frame_disturbance(
        &self,
        l_ref: &[f64],
        l_deg: &[f64],
        p_ref: &[f64],
        p_deg: &[f64],
    ) -> Result<(f64, f64)> {
        let n = self.bands.n_bands();
        if l_ref.len() != n || l_deg.len() != n || p_ref.len() != n || p_deg.len() != n {
            return Err(Error::Argument(format!(
                "expected {n} bands per frame (got {}, {}, {}, {})",
                l_ref.len(),
                l_deg.len(),
                p_ref.len(),
                p_deg.len()
            )));
        }
        let eps = match self.cfg.smoothing {
            SmoothMode::Hard => 0.0,
            SmoothMode::Smooth => NORM_EPS,
        };
        let mut s2 = 0.0;
        let mut a2 = 0.0;
        for b in 0..n {
            let terms = band_terms(
                l_ref[b],
                l_deg[b],
                p_ref[b],
                p_deg[b],
                self.bands.asym_power_offset,
                self.cfg.smoothing,
            );
            let w = self.bands.widths_bark[b];
            let sym_term = w * terms.masked;
            let asym_term = sym_term * terms.h_eff;
            s2 += sym_term * sym_term;
            a2 += asym_term * asym_term;
        }
        Ok(((s2 + eps).sqrt(), (a2 + eps).sqrt()))
    }

    /// Pools a one-sided power spectrogram into critical bands and applies
    /// the loudness transform.
    pub fn bark_loudness(&self, power: &PowerSpectrogram) -> Result<BandMatrix> {
        let bins = FRAME_SIZE / 2 + 1;
        if power.n_bins() != bins {
            return Err(Error::Argument(format!(
                "expected {bins} bins for a {FRAME_SIZE}-point transform, got {}",
                power.n_bins()
            )));
        }
        if power.data().iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::numeric(
                "bark_loudness",
                "negative or non-finite power input",
            ));
        }
        let n_bands = self.bands.n_bands();
        let mut band = vec![0.0; n_bands];
        let mut out = Vec::with_capacity(power.n_frames() * n_bands);
        for t in 0..power.n_frames() {
            self.bands.pool(power.frame(t), &mut band);
            for b in 0..n_bands {
                out.push(zwicker(band[b], self.bands.abs_thresh_power[b]));
            }
        }
        Ok(BandMatrix::from_raw(out, n_bands))
    }

    /// Scales both signals of a pair to the target level, each by its own
    /// estimated power. No time alignment.
    pub fn align_levels(&self, pair: &UtterancePair) -> Result<UtterancePair> {
        self.check_rate(&pair.reference)?;
        let scale = |w: &Waveform| -> Result<Waveform> {
            let bp = if self.bandpass.is_identity() {
                w.samples().to_vec()
            } else {
                self.bandpass.filter(w.samples())
            };
            let (level, _) = level_of(&bp, self.cfg.level_estimator)?;
            let gain = (self.cfg.target_level / level).sqrt();
            w.with_samples(w.samples().iter().map(|&s| gain * s).collect())
        };
        Ok(UtterancePair {
            reference: scale(&pair.reference)?,
            degraded: scale(&pair.degraded)?,
            id: pair.id.clone(),
            warnings: pair.warnings.clone(),
        })
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(Error::Validation(format!(
                "waveform rate {} Hz != configured {} Hz",
                w.sample_rate_hz(),
                self.cfg.sample_rate_hz
            )));
        }
        Ok(())
    }

    /// Runs band-pass, level estimation, alignment, short-time transform,
    /// band pooling and loudness for one signal.
    pub(crate) fn stage_signal(&self, samples: &[f64], keep_spectra: bool) -> Result<SignalStages> {
        let bandpassed = if self.bandpass.is_identity() {
            samples.to_vec()
        } else {
            self.bandpass.filter(samples)
        };
        let (level, level_index) = level_of(&bandpassed, self.cfg.level_estimator)?;
        let gain = (self.cfg.target_level / level).sqrt();
        if !gain.is_finite() {
            return Err(Error::numeric(
                "align_levels",
                format!("non-finite gain from level {level:.3e}"),
            ));
        }
        let aligned: Vec<f64> = samples.iter().map(|&s| gain * s).collect();

        let n = aligned.len();
        if n < FRAME_SIZE {
            return Err(Error::Argument(format!(
                "signal of {n} samples is shorter than one {FRAME_SIZE}-sample frame"
            )));
        }
        let frames = (n - FRAME_SIZE) / FRAME_HOP + 1;
        let bins = FRAME_SIZE / 2 + 1;
        let n_bands = self.bands.n_bands();

        let mut spectra = Vec::with_capacity(if keep_spectra { frames * bins } else { 0 });
        let mut band_power = vec![0.0; frames * n_bands];
        let mut loudness = vec![0.0; frames * n_bands];
        let mut buf = vec![Complex64::default(); FRAME_SIZE];
        for t in 0..frames {
            let start = t * FRAME_HOP;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(self.window[i] * aligned[start + i], 0.0);
            }
            self.fft.process(&mut buf);
            let row = &mut band_power[t * n_bands..(t + 1) * n_bands];
            for (k, c) in buf[..bins].iter().enumerate() {
                row[self.bands.bin_to_band[k]] += c.norm_sqr();
            }
            if keep_spectra {
                spectra.extend_from_slice(&buf[..bins]);
            }
            for b in 0..n_bands {
                loudness[t * n_bands + b] = zwicker(row[b], self.bands.abs_thresh_power[b]);
            }
        }
        if band_power.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("stft_power", "non-finite spectral power"));
        }

        Ok(SignalStages {
            bandpassed,
            level,
            level_index,
            gain,
            aligned,
            spectra,
            band_power,
            loudness,
            frames,
        })
    }
}
