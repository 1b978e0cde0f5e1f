//! Fixed-length windows, train/val/test partition and train-only
//! standardization.
//!
//! Inner mode: every recording is cut in time. The middle of each recording
//! is held out (validation first, then test) and the two outer parts train.
//! Cross mode: the highest-numbered `round(test * n)` subjects form the test
//! split; the remaining subjects give up the middle `val / (train + val)` of
//! each recording to validation.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{validate_pairs, Pair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Inner,
    Cross,
}

impl SplitMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inner" => Some(Self::Inner),
            "cross" => Some(Self::Cross),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Inner => "inner",
            Self::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    fn normalized(self) -> Result<Self> {
        let s = self.train + self.val + self.test;
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || self.train <= 0.0 || s <= 0.0 {
            return Err(Error::Split(format!("bad split ratios {self:?}")));
        }
        Ok(Self {
            train: self.train / s,
            val: self.val / s,
            test: self.test / s,
        })
    }
}

/// Per-channel EEG and envelope standardization, computed on train windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub eeg_mean: Vec<f64>,
    pub eeg_std: Vec<f64>,
    pub env_mean: f64,
    pub env_std: f64,
}

/// A standardized recording shared by the three splits.
#[derive(Debug, PartialEq)]
pub struct Prepared {
    pub eeg: Vec<f64>,
    pub envelope: Vec<f64>,
    pub channels: usize,
    pub subject_id: usize,
    pub recording_id: String,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.envelope.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envelope.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub recording: usize,
    pub start: usize,
    pub subject_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub split: Split,
    pub mode: SplitMode,
    pub window_len: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub windows: Vec<Window>,
    pub recordings: Arc<Vec<Prepared>>,
    pub stats: NormStats,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<usize> {
        self.windows.iter().map(|w| w.subject_id).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.subject_id).collect()
    }

    pub fn recording_id(&self, i: usize) -> &str {
        &self.recordings[self.windows[i].recording].recording_id
    }

    /// Row-major `[channels, window_len]` slice copy of window `i`.
    pub fn eeg(&self, i: usize) -> Vec<f64> {
        let w = &self.windows[i];
        let rec = &self.recordings[w.recording];
        let t = rec.len();
        let mut out = Vec::with_capacity(self.channels * self.window_len);
        for c in 0..self.channels {
            out.extend_from_slice(&rec.eeg[c * t + w.start..c * t + w.start + self.window_len]);
        }
        out
    }

    pub fn envelope(&self, i: usize) -> &[f64] {
        let w = &self.windows[i];
        &self.recordings[w.recording].envelope[w.start..w.start + self.window_len]
    }

    /// `([B, C, L] EEG, [B, L] envelopes, subject labels)`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
        let (c, l) = (self.channels, self.window_len);
        let mut eeg = Vec::with_capacity(idx.len() * c * l);
        let mut env = Vec::with_capacity(idx.len() * l);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            eeg.extend(self.eeg(i));
            env.extend_from_slice(self.envelope(i));
            labels.push(self.windows[i].subject_id);
        }
        (
            Tensor::from_vec(vec![idx.len(), c, l], eeg).expect("window extents"),
            Tensor::from_vec(vec![idx.len(), l], env).expect("window extents"),
            labels,
        )
    }

    /// Fails if any window carries a different split tag.
    pub fn check_provenance(&self) -> Result<()> {
        match self.windows.iter().find(|w| w.split != self.split) {
            Some(w) => Err(Error::Split(format!(
                "{} dataset holds a {} window",
                self.split.name(),
                w.split.name()
            ))),
            None => Ok(()),
        }
    }
}

/// Start offsets of every full window of `win` samples taken every `hop`.
pub fn window_starts(len: usize, win: usize, hop: usize) -> Vec<usize> {
    if win == 0 || hop == 0 || len < win {
        return Vec::new();
    }
    (0..=(len - win) / hop).map(|k| k * hop).collect()
}

fn segment_windows(lo: usize, hi: usize, win: usize, hop: usize) -> Vec<usize> {
    if hi <= lo {
        return Vec::new();
    }
    window_starts(hi - lo, win, hop)
        .into_iter()
        .map(|s| s + lo)
        .collect()
}

/// Held-out subject ids in cross mode.
pub fn held_out_subjects(subjects: &BTreeSet<usize>, test_ratio: f64) -> Vec<usize> {
    let n = subjects.len();
    let k = ((test_ratio * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    subjects.iter().rev().take(k).rev().copied().collect()
}

pub fn window_and_split(
    pairs: &[Pair],
    window_s: f64,
    hop_s: f64,
    mode: SplitMode,
    ratios: SplitRatios,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no recordings to window".into()));
    }
    validate_pairs(pairs)?;
    let ratios = ratios.normalized()?;
    let fs = pairs[0].0.sample_rate_hz;
    let channels = pairs[0].0.channels();
    if pairs
        .iter()
        .any(|(e, _)| e.sample_rate_hz != fs || e.channels() != channels)
    {
        return Err(Error::dim("recordings disagree on rate or channel count"));
    }
    let win = (window_s * fs).round() as usize;
    let hop = (hop_s * fs).round() as usize;
    if win < 2 || hop == 0 {
        return Err(Error::Parameter(format!(
            "window {window_s} s / hop {hop_s} s too short at {fs} Hz"
        )));
    }
    if let Some((e, _)) = pairs.iter().find(|(e, _)| e.len() < win) {
        return Err(Error::Parameter(format!(
            "recording {} ({:.2} s) is shorter than the {window_s} s window",
            e.recording_id,
            e.duration_s()
        )));
    }

    let subjects: BTreeSet<usize> = pairs.iter().map(|(e, _)| e.subject_id).collect();
    let held_out: BTreeSet<usize> = match mode {
        SplitMode::Inner => BTreeSet::new(),
        SplitMode::Cross => {
            if subjects.len() < 2 {
                return Err(Error::Parameter(
                    "cross-subject split needs at least 2 subjects".into(),
                ));
            }
            held_out_subjects(&subjects, ratios.test)
                .into_iter()
                .collect()
        }
    };

    let mut windows = Vec::new();
    for (r, (eeg, _)) in pairs.iter().enumerate() {
        let t = eeg.len();
        let at = |f: f64| ((f * t as f64).round() as usize).min(t);
        let mut push = |lo: usize, hi: usize, split: Split| {
            for start in segment_windows(lo, hi, win, hop) {
                windows.push(Window {
                    recording: r,
                    start,
                    subject_id: eeg.subject_id,
                    split,
                });
            }
        };
        if held_out.contains(&eeg.subject_id) {
            push(0, t, Split::Test);
            continue;
        }
        let (val, test) = match mode {
            SplitMode::Inner => (ratios.val, ratios.test),
            SplitMode::Cross => (ratios.val / (ratios.train + ratios.val), 0.0),
        };
        let a = at((1.0 - val - test) / 2.0);
        let b = at((1.0 - val - test) / 2.0 + val);
        let c = at((1.0 - val - test) / 2.0 + val + test);
        if a == c {
            // no held-out middle: one uninterrupted train segment
            push(0, t, Split::Train);
        } else {
            push(0, a, Split::Train);
            push(a, b, Split::Val);
            push(b, c, Split::Test);
            push(c, t, Split::Train);
        }
    }
    let train_windows: Vec<&Window> = windows.iter().filter(|w| w.split == Split::Train).collect();
    if train_windows.is_empty() {
        return Err(Error::InsufficientData(
            "no complete training window; recordings too short for the split".into(),
        ));
    }

    // statistics over train-window samples, overlaps counted as often as used
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let (mut esum, mut esq) = (0.0, 0.0);
    for w in &train_windows {
        let (eeg, env) = &pairs[w.recording];
        for (c, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
            for &v in &eeg.channel(c)[w.start..w.start + win] {
                *s += v;
                *q += v * v;
            }
        }
        for &v in &env.samples[w.start..w.start + win] {
            esum += v;
            esq += v * v;
        }
    }
    let count = (train_windows.len() * win) as f64;
    let spread = |s: f64, q: f64| {
        let m = s / count;
        (m, (q / count - m * m).max(0.0).sqrt().max(1e-12))
    };
    let (eeg_mean, eeg_std): (Vec<f64>, Vec<f64>) =
        sum.iter().zip(&sq).map(|(&s, &q)| spread(s, q)).unzip();
    let (env_mean, env_std) = spread(esum, esq);
    let stats = NormStats {
        eeg_mean,
        eeg_std,
        env_mean,
        env_std,
    };

    let recordings: Arc<Vec<Prepared>> = Arc::new(
        pairs
            .iter()
            .map(|(eeg, env)| {
                let t = eeg.len();
                let mut data = eeg.samples.data().to_vec();
                for c in 0..channels {
                    let (m, s) = (stats.eeg_mean[c], stats.eeg_std[c]);
                    data[c * t..(c + 1) * t]
                        .iter_mut()
                        .for_each(|v| *v = (*v - m) / s);
                }
                Prepared {
                    eeg: data,
                    envelope: env
                        .samples
                        .iter()
                        .map(|v| (v - stats.env_mean) / stats.env_std)
                        .collect(),
                    channels,
                    subject_id: eeg.subject_id,
                    recording_id: eeg.recording_id.clone(),
                }
            })
            .collect(),
    );

    let make = |split: Split| WindowedDataset {
        split,
        mode,
        window_len: win,
        channels,
        sample_rate_hz: fs,
        windows: windows
            .iter()
            .filter(|w| w.split == split)
            .copied()
            .collect(),
        recordings: Arc::clone(&recordings),
        stats: stats.clone(),
    };
    Ok((make(Split::Train), make(Split::Val), make(Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_count_arithmetic() {
        assert_eq!(window_starts(640, 320, 64).len(), 6);
        assert_eq!(window_starts(319, 320, 64).len(), 0);
        assert_eq!(window_starts(320, 320, 64), vec![0]);
    }

    #[test]
    fn held_out_count() {
        let s: BTreeSet<usize> = (0..10).collect();
        assert_eq!(held_out_subjects(&s, 0.1), vec![9]);
        assert_eq!(held_out_subjects(&s, 0.25), vec![7, 8, 9]);
        let two: BTreeSet<usize> = [3, 5].into_iter().collect();
        assert_eq!(held_out_subjects(&two, 0.9), vec![5]);
    }
}
