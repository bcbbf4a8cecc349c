//! Reverse pass over the recorded metric stages.
//!
//! Only the degraded branch is differentiated; the reference branch is a
//! constant of the optimization. Each block below is the adjoint of the
//! matching block in `metric::pipeline::stage_signal` /
//! `evaluate_with_reference`, consuming the same intermediates the forward
//! pass stored (or recomputing pointwise pieces bit-identically via the
//! shared helpers).

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::metric::constants::*;
use crate::metric::pipeline::{Pipeline, Tape};
use crate::metric::{band_terms, lqo_map_deriv, zwicker_deriv, LevelEstimator, MosMapping};

/// Propagates `d loss / d value = seed` back to the degraded input samples.
/// `input` is the raw degraded signal the tape was recorded from.
pub(crate) fn metric_backward(
    p: &Pipeline,
    tape: &Tape,
    input: &[f64],
    seed: f64,
) -> Result<Vec<f64>> {
    let deg = &tape.degraded;
    let r = &tape.reference.stages;
    let n_bands = p.bands.n_bands();
    let frames = deg.frames;
    let bins = FRAME_SIZE / 2 + 1;
    let n = deg.aligned.len();

    // value -> raw score -> aggregate disturbances
    let draw = match p.cfg.mos_mapping {
        MosMapping::Raw => seed,
        MosMapping::LqoLogistic => seed * lqo_map_deriv(tape.raw),
    };
    let g_d_sym = -MOS_SYM_WEIGHT * draw;
    let g_d_asym = -MOS_ASYM_WEIGHT * draw;

    // aggregate -> per-frame disturbances (L2 over groups, L6 within)
    let g_sym_frames = aggregate_backward(&tape.sym_frames, &tape.sym_groups, tape.d_sym, g_d_sym);
    let g_asym_frames =
        aggregate_backward(&tape.asym_frames, &tape.asym_groups, tape.d_asym, g_d_asym);

    // per-frame norms -> loudness and band-power gradients
    let mut g_loud = vec![0.0; frames * n_bands];
    let mut g_bandpow = vec![0.0; frames * n_bands];
    for t in 0..frames {
        let base = t * n_bands;
        let sym_f = tape.sym_frames[t];
        let asym_f = tape.asym_frames[t];
        let gs = g_sym_frames[t];
        let ga = g_asym_frames[t];
        if (gs == 0.0 || sym_f <= 0.0) && (ga == 0.0 || asym_f <= 0.0) {
            continue;
        }
        for b in 0..n_bands {
            let terms = band_terms(
                r.loudness[base + b],
                deg.loudness[base + b],
                r.band_power[base + b],
                deg.band_power[base + b],
                p.bands.asym_power_offset,
                tape.mode,
            );
            let w = p.bands.widths_bark[b];
            let w2 = w * w;
            // sym_f = sqrt(sum_b (w m)^2 + eps)
            let mut g_masked = 0.0;
            if sym_f > 0.0 {
                g_masked += gs * w2 * terms.masked / sym_f;
            }
            // asym_f = sqrt(sum_b (w m h)^2 + eps)
            let mut g_h = 0.0;
            if asym_f > 0.0 {
                let h2 = terms.h_eff * terms.h_eff;
                g_masked += ga * w2 * terms.masked * h2 / asym_f;
                g_h = ga * w2 * terms.masked * terms.masked * terms.h_eff / asym_f;
            }
            g_loud[base + b] = g_masked * terms.dmasked_dld;
            g_bandpow[base + b] = g_h * terms.dheff_dpd;
        }
    }

    // loudness -> band power (pointwise Zwicker chain)
    for t in 0..frames {
        let base = t * n_bands;
        for b in 0..n_bands {
            g_bandpow[base + b] += g_loud[base + b]
                * zwicker_deriv(deg.band_power[base + b], p.bands.abs_thresh_power[b]);
        }
    }

    // band power -> bin power -> aligned samples (per-frame FFT adjoint)
    let mut g_aligned = vec![0.0; n];
    let mut buf = vec![Complex64::default(); FRAME_SIZE];
    for t in 0..frames {
        let base = t * n_bands;
        if g_bandpow[base..base + n_bands].iter().all(|&g| g == 0.0) {
            continue;
        }
        let spectrum = &deg.spectra[t * bins..(t + 1) * bins];
        for slot in buf.iter_mut() {
            *slot = Complex64::default();
        }
        for k in 0..bins {
            let g_p = g_bandpow[base + p.bands.bin_to_band[k]];
            if g_p != 0.0 {
                buf[k] = spectrum[k].conj() * g_p;
            }
        }
        p.fft.process(&mut buf);
        let start = t * FRAME_HOP;
        for (i, c) in buf.iter().enumerate() {
            g_aligned[start + i] += 2.0 * p.window[i] * c.re;
        }
    }

    // aligned = gain * samples: split into the direct path and the
    // level-estimation path
    let gain = deg.gain;
    let level = deg.level;
    let g_gain: f64 = g_aligned.iter().zip(input).map(|(&g, &y)| g * y).sum();
    let mut g_samples: Vec<f64> = g_aligned.iter().map(|&g| g * gain).collect();

    // gain = sqrt(target / level)
    let g_level = g_gain * (-gain / (2.0 * level));

    // level -> band-passed samples
    let m = deg.bandpassed.len();
    let g_bp: Vec<f64> = match p.cfg.level_estimator {
        LevelEstimator::SumOfSquares => deg
            .bandpassed
            .iter()
            .map(|&v| g_level * 2.0 * v / m as f64)
            .collect(),
        LevelEstimator::Percentile85 => {
            let idx = deg
                .level_index
                .ok_or_else(|| Error::numeric("estimate_level", "missing percentile index"))?;
            let mut g = vec![0.0; m];
            g[idx] = g_level * 2.0 * deg.bandpassed[idx];
            g
        }
    };

    // band-passed -> input samples: transpose of the causal IIR cascade
    if p.bandpass.is_identity() {
        for (o, v) in g_samples.iter_mut().zip(&g_bp) {
            *o += v;
        }
    } else {
        let g_level_path = p.bandpass.filter_adjoint(&g_bp);
        for (o, v) in g_samples.iter_mut().zip(&g_level_path) {
            *o += v;
        }
    }

    if let Some(i) = g_samples.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(
            "metric_backward",
            format!("non-finite gradient at sample {i}"),
        ));
    }
    Ok(g_samples)
}

/// Adjoint of `aggregate_frames`: distributes the gradient of
/// `D = sqrt(mean_g G^2 + eps)` with `G = (mean_t f^6 + eps)^(1/6)` back to
/// the frame values.
fn aggregate_backward(frames: &[f64], groups: &[f64], d: f64, g_d: f64) -> Vec<f64> {
    let mut out = vec![0.0; frames.len()];
    if g_d == 0.0 || d <= 0.0 {
        return out;
    }
    let n_groups = groups.len() as f64;
    for (gi, chunk) in frames.chunks(SYLLABLE_FRAMES).enumerate() {
        let g_val = groups[gi];
        if g_val <= 0.0 {
            continue;
        }
        // dD/dG = G / (n_groups * D)
        let g_group = g_d * g_val / (n_groups * d);
        let len = chunk.len() as f64;
        let g5 = g_val.powi(5);
        for (ti, &f) in chunk.iter().enumerate() {
            // dG/df = f^5 / (len * G^5)
            out[gi * SYLLABLE_FRAMES + ti] = g_group * f.powi(5) / (len * g5);
        }
    }
    out
}
