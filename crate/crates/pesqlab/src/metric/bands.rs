//! Critical-band layout and absolute hearing thresholds.
//!
//! FFT bins are pooled into 49 equal-width intervals on the Traunmüller bark
//! scale. Per-band absolute thresholds come from a threshold-in-quiet curve
//! anchored to the internal power scale by a closed-form calibration tone:
//! a 1 kHz sine at the level-alignment target power has a known band power
//! under the analysis window, and is declared to sit at
//! [`super::constants::SPEECH_SPL_DB`] dB SPL.

use crate::error::{Error, Result};
use crate::metric::constants::*;

/// Traunmüller bark transform.
pub fn hz_to_bark(f: f64) -> f64 {
    26.81 * f / (1960.0 + f) - 0.53
}

/// Inverse of [`hz_to_bark`].
pub fn bark_to_hz(z: f64) -> f64 {
    1960.0 * (z + 0.53) / (26.28 - z)
}

/// Terhardt threshold-in-quiet approximation, dB SPL. Clamped at low
/// frequencies where the closed form diverges.
pub fn threshold_in_quiet_db(f: f64) -> f64 {
    let khz = (f / 1000.0).max(0.02);
    let t = 3.64 * khz.powf(-0.8) - 6.5 * (-0.6 * (khz - 3.3).powi(2)).exp()
        + 1e-3 * khz.powi(4);
    t.min(96.0)
}

/// Precomputed band layout for one sample rate / FFT size combination.
#[derive(Debug, Clone)]
pub struct BandTable {
    /// Band index for every one-sided FFT bin.
    pub bin_to_band: Vec<usize>,
    /// Band center frequencies in Hz.
    pub centers_hz: Vec<f64>,
    /// Band widths in bark (uniform by construction).
    pub widths_bark: Vec<f64>,
    /// Absolute threshold per band, internal power units.
    pub abs_thresh_power: Vec<f64>,
    /// Power offset used by the asymmetry ratio, internal power units.
    pub asym_power_offset: f64,
    /// Band power corresponding to 0 dB SPL on the internal scale.
    pub spl0_power: f64,
}

impl BandTable {
    pub fn new(n_bands: usize, sample_rate_hz: u32, fft_size: usize) -> Result<Self> {
        if n_bands == 0 {
            return Err(Error::Config("band count must be positive".into()));
        }
        let fs = sample_rate_hz as f64;
        let bins = fft_size / 2 + 1;
        let z_max = hz_to_bark(fs / 2.0);
        let dz = z_max / n_bands as f64;

        let mut bin_to_band = Vec::with_capacity(bins);
        for k in 0..bins {
            let f = k as f64 * fs / fft_size as f64;
            let z = hz_to_bark(f).max(0.0);
            let b = ((z / dz) as usize).min(n_bands - 1);
            bin_to_band.push(b);
        }

        // Calibration: a 1 kHz sine at the alignment target power has band
        // power A^2 * ((N/4)^2 + 2*(N/8)^2) under the zero-endpoint Hann
        // window (main lobe spans three bins), A^2 = 2 * target power.
        let n = fft_size as f64;
        let tone_band_power =
            2.0 * TARGET_LEVEL_POWER * ((n / 4.0).powi(2) + 2.0 * (n / 8.0).powi(2));
        let spl0_power = tone_band_power * 10f64.powf(-SPEECH_SPL_DB / 10.0);

        let mut centers_hz = Vec::with_capacity(n_bands);
        let mut widths_bark = Vec::with_capacity(n_bands);
        let mut abs_thresh_power = Vec::with_capacity(n_bands);
        for b in 0..n_bands {
            let zc = (b as f64 + 0.5) * dz;
            let fc = bark_to_hz(zc);
            centers_hz.push(fc);
            widths_bark.push(dz);
            abs_thresh_power.push(spl0_power * 10f64.powf(threshold_in_quiet_db(fc) / 10.0));
        }

        Ok(BandTable {
            bin_to_band,
            centers_hz,
            widths_bark,
            abs_thresh_power,
            asym_power_offset: spl0_power * 10f64.powf(ASYM_OFFSET_SPL_DB / 10.0),
            spl0_power,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.centers_hz.len()
    }

    /// Sums one-sided bin powers into band powers.
    pub fn pool(&self, bin_power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(bin_power.len(), self.bin_to_band.len());
        debug_assert_eq!(out.len(), self.n_bands());
        out.fill(0.0);
        for (k, &p) in bin_power.iter().enumerate() {
            out[self.bin_to_band[k]] += p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bark_transform_round_trips() {
        for f in [50.0, 325.0, 1000.0, 3250.0, 7999.0] {
            assert_relative_eq!(bark_to_hz(hz_to_bark(f)), f, max_relative = 1e-9);
        }
    }

    #[test]
    fn table_covers_every_bin_monotonically() {
        let t = BandTable::new(49, 16000, 512).unwrap();
        assert_eq!(t.bin_to_band.len(), 257);
        assert_eq!(t.bin_to_band[0], 0);
        assert_eq!(*t.bin_to_band.last().unwrap(), 48);
        for w in t.bin_to_band.windows(2) {
            assert!(w[1] >= w[0] && w[1] - w[0] <= 1);
        }
        // every band owns at least one bin at 16 kHz / 512
        for b in 0..49 {
            assert!(t.bin_to_band.contains(&b), "band {b} has no bin");
        }
    }

    #[test]
    fn thresholds_dip_in_midrange() {
        let t = BandTable::new(49, 16000, 512).unwrap();
        let at = |hz: f64| {
            let b = t
                .centers_hz
                .iter()
                .enumerate()
                .min_by(|a, c| (a.1 - hz).abs().partial_cmp(&(c.1 - hz).abs()).unwrap())
                .unwrap()
                .0;
            t.abs_thresh_power[b]
        };
        // hearing is most sensitive around 3-4 kHz
        assert!(at(3500.0) < at(100.0));
        assert!(at(3500.0) < at(7500.0));
    }

    #[test]
    fn calibration_tone_sits_at_declared_spl() {
        // directly verify the closed-form band power of the calibration tone
        use crate::dsp::{hann_window, stft_power_slice, StftConfig};
        let n = 512;
        let a = (2.0 * TARGET_LEVEL_POWER).sqrt();
        let x: Vec<f64> = (0..n)
            .map(|i| a * (2.0 * std::f64::consts::PI * 32.0 * i as f64 / n as f64).cos())
            .collect();
        let cfg = StftConfig::new(n, n, false).unwrap();
        let s = stft_power_slice(&x, &cfg).unwrap();
        let _ = hann_window(n).unwrap();
        let t = BandTable::new(49, 16000, 512).unwrap();
        let mut bands = vec![0.0; 49];
        t.pool(s.frame(0), &mut bands);
        let measured: f64 = bands.iter().sum();
        let nf = n as f64;
        let closed_form =
            2.0 * TARGET_LEVEL_POWER * ((nf / 4.0).powi(2) + 2.0 * (nf / 8.0).powi(2));
        assert_relative_eq!(measured, closed_form, max_relative = 1e-9);
        let spl = 10.0 * (measured / t.spl0_power).log10();
        assert_relative_eq!(spl, SPEECH_SPL_DB, epsilon = 1e-6);
    }
}
