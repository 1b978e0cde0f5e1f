//! Data side: synthetic generator, preprocessing, windowing and the on-disk
//! recording cache.

pub mod cache;
pub mod dataset;
pub mod envelope;
pub mod filter;
pub mod resample;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{
    window_and_split, NormStats, Split, SplitMode, SplitRatios, Window, WindowedDataset,
};
pub use envelope::envelope_extract;
pub use filter::highpass_zero_phase;
pub use resample::resample;
pub use synth::{synth_generate, SynthConfig};

/// Multichannel EEG, `samples` is `[channels, time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    pub samples: Tensor<f64>,
    pub sample_rate_hz: f64,
    pub subject_id: usize,
    pub recording_id: String,
}

impl EegRecording {
    pub fn new(
        samples: Tensor<f64>,
        sample_rate_hz: f64,
        subject_id: usize,
        recording_id: impl Into<String>,
    ) -> Result<Self> {
        if samples.ndim() != 2 {
            return Err(Error::dim(format!(
                "recording must be [channels, time], got {:?}",
                samples.shape()
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Parameter(format!("sample rate {sample_rate_hz}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            subject_id,
            recording_id: recording_id.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.samples.data()[c * t..(c + 1) * t]
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz
    }

    /// Applies `f` to every channel; `f` must return the same length for all.
    pub fn map_channels(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let mut data = Vec::new();
        let mut len = None;
        for c in 0..self.channels() {
            let y = f(self.channel(c))?;
            if *len.get_or_insert(y.len()) != y.len() {
                return Err(Error::dim("channel transform changed lengths unevenly"));
            }
            data.extend(y);
        }
        let samples = Tensor::from_vec(vec![self.channels(), len.unwrap_or(0)], data)?;
        Ok(Self {
            samples,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSignal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl EnvelopeSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// An EEG recording with the envelope of the stimulus heard during it.
pub type Pair = (EegRecording, EnvelopeSignal);

/// Checks that every value is finite and that each envelope matches its
/// recording in rate and length.
pub fn validate_pairs(pairs: &[Pair]) -> Result<()> {
    for (eeg, env) in pairs {
        if let Some(i) = eeg.samples.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "recording {} sample {i}",
                eeg.recording_id
            )));
        }
        if env.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "envelope of {}",
                eeg.recording_id
            )));
        }
        if env.len() != eeg.len() || env.sample_rate_hz != eeg.sample_rate_hz {
            return Err(Error::dim(format!(
                "recording {}: EEG {} samples at {} Hz, envelope {} at {} Hz",
                eeg.recording_id,
                eeg.len(),
                eeg.sample_rate_hz,
                env.len(),
                env.sample_rate_hz
            )));
        }
    }
    Ok(())
}

/// Sample Pearson correlation; `None` when either side has no spread.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
