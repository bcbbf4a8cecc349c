//! Differentiable PESQ-style speech quality metric and an exploit lab around it.
//!
//! The crate has three layers:
//!
//! * plain DSP and I/O: [`audio`] (WAV files, pair manifests) and [`dsp`]
//!   (windows, STFT power, biquad cascades, percentile statistics);
//! * the metric itself: [`metric`] computes a full-reference MOS-like score
//!   (level alignment, bark-band loudness, disturbance aggregation, MOS
//!   mapping), [`loss`] wraps it together with MSE and SI-SDR into scalar
//!   objectives;
//! * the exploitability toolkit: [`grad`] provides exact reverse-mode
//!   gradients of every loss with respect to the degraded waveform plus an
//!   Adam optimizer, [`exploit`] implements the click attack, estimator
//!   robustness comparisons and de-click postprocessing, and [`optim`] runs
//!   single-utterance metric gaming with a per-iteration trace.
//!
//! [`synth`] generates deterministic speech-proxy test signals used by the
//! test suites, the CLI and the browser demo.

pub mod audio;
pub mod dsp;
pub mod error;
pub mod exploit;
pub mod grad;
pub mod loss;
pub mod metric;
pub mod optim;
pub mod synth;

pub use audio::{Manifest, UtterancePair, Waveform};
pub use error::{Error, Result};
pub use loss::LossConfig;
pub use metric::{MetricConfig, MosScore};


