//! Scalar objectives over utterance pairs: time-domain MSE, SI-SDR, the
//! metric-as-loss wrapper, and the combined objective that trades the two
//! against each other.

use crate::audio::UtterancePair;
use crate::error::{Error, Result};
use crate::metric::{compute_metric, MetricConfig};

/// Default SI-SDR saturation bound in dB; far outside any realistic value,
/// it only keeps perfectly proportional estimates finite.
pub const DEFAULT_SI_SDR_CAP_DB: f64 = 100.0;

/// Weights of the combined objective
/// `alpha * metric_loss + (1 - alpha) * beta * si_sdr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Balance between the metric term (1.0) and the SI-SDR term (0.0).
    pub alpha: f64,
    /// Scale bringing the SI-SDR term to the metric term's magnitude.
    pub beta: f64,
    /// SI-SDR saturation bound in dB.
    pub cap_db: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.9,
            beta: 0.5,
            cap_db: DEFAULT_SI_SDR_CAP_DB,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.cap_db > 0.0) {
            return Err(Error::Config(format!(
                "cap_db {} must be positive",
                self.cap_db
            )));
        }
        Ok(())
    }
}

/// Half the summed squared sample difference (unnormalized on purpose).
pub fn mse_loss(pair: &UtterancePair) -> f64 {
    0.5 * pair
        .reference
        .samples()
        .iter()
        .zip(pair.degraded.samples())
        .map(|(&s, &e)| (s - e) * (s - e))
        .sum::<f64>()
}

/// Scale-invariant signal-to-distortion ratio in dB, clamped to
/// `[-cap_db, cap_db]`.
///
/// With projection gain `g = <e, s> / <s, s>`:
/// `10 log10(|g s|^2 / |g s - e|^2)`. An estimate exactly proportional to the
/// reference saturates at `+cap_db`.
pub fn si_sdr(pair: &UtterancePair, cap_db: f64) -> Result<f64> {
    let s = pair.reference.samples();
    let e = pair.degraded.samples();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss <= 0.0 {
        return Err(Error::Argument("all-zero reference in si_sdr".into()));
    }
    let es: f64 = e.iter().zip(s).map(|(a, b)| a * b).sum();
    let g = es / ss;
    let target = g * g * ss;
    let residual: f64 = s
        .iter()
        .zip(e)
        .map(|(&sv, &ev)| {
            let r = g * sv - ev;
            r * r
        })
        .sum();
    if residual <= 0.0 || target <= 0.0 {
        return Ok(if residual <= 0.0 { cap_db } else { -cap_db });
    }
    Ok((10.0 * (target / residual).log10()).clamp(-cap_db, cap_db))
}

/// Distance of the metric from its ceiling: non-negative, zero at perfect
/// quality, so minimizing it maximizes the metric.
pub fn torchpesq_loss(pair: &UtterancePair, cfg: &MetricConfig) -> Result<f64> {
    let score = compute_metric(pair, cfg)?;
    Ok(cfg.max_mapping_value() - score.value)
}

/// `alpha * metric_loss + (1 - alpha) * beta * si_sdr`: minimizing the total
/// pushes the metric up while pushing SI-SDR down (maximizing distortion).
pub fn combined_loss(pair: &UtterancePair, lc: &LossConfig, mc: &MetricConfig) -> Result<f64> {
    lc.validate()?;
    // avoid the metric evaluation entirely at alpha == 0
    let metric_term = if lc.alpha == 0.0 {
        0.0
    } else {
        torchpesq_loss(pair, mc)?
    };
    let sdr_term = if lc.alpha == 1.0 {
        0.0
    } else {
        si_sdr(pair, lc.cap_db)?
    };
    Ok(lc.alpha * metric_term + (1.0 - lc.alpha) * lc.beta * sdr_term)
}
