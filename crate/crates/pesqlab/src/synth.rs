//! Deterministic synthetic test signals.
//!
//! Real speech corpora are not bundled; the test suites, the CLI's gradient
//! check and the browser demo instead use a band-limited noise "speech"
//! proxy: white noise shaped into the 200-3400 Hz band with a slow syllabic
//! amplitude envelope, mixed with white noise at a chosen SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{make_pair, UtterancePair, Waveform};
use crate::dsp::butterworth_bandpass;

/// Sample rate of all synthetic signals.
pub const SYNTH_RATE_HZ: u32 = 16000;

/// RMS the speech proxy is normalized to.
const SPEECH_RMS: f64 = 0.06;

/// Seeded white Gaussian noise with unit variance.
pub fn white_noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Band-limited noise speech proxy: 200-3400 Hz shaped noise under a 3 Hz
/// raised-sine envelope, RMS-normalized. Deterministic in `seed`.
pub fn speech_proxy(seed: u64, n_samples: usize) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n_samples).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bp = butterworth_bandpass(200.0, 3400.0, SYNTH_RATE_HZ)
        .expect("fixed band edges are valid");
    let mut x = bp.filter(&raw);
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / SYNTH_RATE_HZ as f64;
        *v *= 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        let k = SPEECH_RMS / rms;
        for v in x.iter_mut() {
            *v *= k;
        }
    }
    Waveform::new(x, SYNTH_RATE_HZ).expect("non-empty finite signal")
}

/// A speech-proxy reference plus the same signal with additive white noise
/// at `snr_db`.
pub fn noisy_pair(seed: u64, duration_s: f64, snr_db: f64) -> UtterancePair {
    let n = (duration_s * SYNTH_RATE_HZ as f64).round() as usize;
    let clean = speech_proxy(seed, n);
    let noise = white_noise(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1), n);
    let speech_power =
        clean.samples().iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_power = noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let target_noise_power = speech_power / 10f64.powf(snr_db / 10.0);
    let k = (target_noise_power / noise_power).sqrt();
    let degraded: Vec<f64> = clean
        .samples()
        .iter()
        .zip(&noise)
        .map(|(&s, &w)| s + k * w)
        .collect();
    let degraded = Waveform::new(degraded, SYNTH_RATE_HZ).expect("finite mixture");
    make_pair(clean, degraded, format!("synth-{seed}-{snr_db:+.1}dB"))
        .expect("equal lengths by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{active_speech_seconds, ACTIVE_SPEECH_THRESHOLD_DB};
    use approx::assert_relative_eq;

    #[test]
    fn proxy_is_deterministic_and_active() {
        let a = speech_proxy(7, 64000);
        let b = speech_proxy(7, 64000);
        assert_eq!(a.samples(), b.samples());
        // 4 s of proxy carries enough activity to support scoring
        assert!(active_speech_seconds(&a, ACTIVE_SPEECH_THRESHOLD_DB) >= 3.2);
        let rms = (a.samples().iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert_relative_eq!(rms, 0.06, max_relative = 1e-9);
    }

    #[test]
    fn pair_hits_requested_snr() {
        let p = noisy_pair(3, 2.0, 10.0);
        let clean = p.reference.samples();
        let noise: Vec<f64> = p
            .degraded
            .samples()
            .iter()
            .zip(clean)
            .map(|(&d, &c)| d - c)
            .collect();
        let sp = clean.iter().map(|v| v * v).sum::<f64>();
        let np = noise.iter().map(|v| v * v).sum::<f64>();
        let snr = 10.0 * (sp / np).log10();
        assert_relative_eq!(snr, 10.0, epsilon = 1e-9);
    }
}
