//! Recording cache: one directory per recording holding `header.json`,
//! `eeg.f64` (`[channels, samples]`, row-major) and `envelope.f64`, both
//! raw little-endian float64.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_pairs, EegRecording, EnvelopeSignal, Pair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_VERSION: u32 = 1;
pub const HEADER: &str = "header.json";
pub const EEG_BLOB: &str = "eeg.f64";
pub const ENVELOPE_BLOB: &str = "envelope.f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingHeader {
    pub version: u32,
    pub recording_id: String,
    pub subject_id: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    /// Free-form processing history, oldest first.
    pub provenance: Vec<String>,
}

pub fn write_f64(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, expected {} float64 values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_header(dir: &Path) -> Result<RecordingHeader> {
    let path = dir.join(HEADER);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: RecordingHeader = serde_json::from_str(&text)?;
    if header.version != CACHE_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: cache version {} (supported: {CACHE_VERSION})",
            path.display(),
            header.version
        )));
    }
    Ok(header)
}

pub fn save_recordings(dir: &Path, pairs: &[Pair], provenance: &[String]) -> Result<()> {
    validate_pairs(pairs)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (eeg, env) in pairs {
        let sub = dir.join(&eeg.recording_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let header = RecordingHeader {
            version: CACHE_VERSION,
            recording_id: eeg.recording_id.clone(),
            subject_id: eeg.subject_id,
            channels: eeg.channels(),
            samples: eeg.len(),
            sample_rate_hz: eeg.sample_rate_hz,
            provenance: provenance.to_vec(),
        };
        let path = sub.join(HEADER);
        fs::write(&path, serde_json::to_string_pretty(&header)?)
            .map_err(|e| Error::io(&path, e))?;
        write_f64(&sub.join(EEG_BLOB), eeg.samples.data())?;
        write_f64(&sub.join(ENVELOPE_BLOB), &env.samples)?;
    }
    Ok(())
}

fn recording_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(HEADER).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads every recording under `dir`, ordered by directory name.
pub fn load_recordings(dir: &Path) -> Result<(Vec<Pair>, Vec<String>)> {
    let mut pairs = Vec::new();
    let mut provenance = Vec::new();
    for sub in recording_dirs(dir)? {
        let h = read_header(&sub)?;
        let eeg = read_f64(&sub.join(EEG_BLOB), h.channels * h.samples)?;
        let env = read_f64(&sub.join(ENVELOPE_BLOB), h.samples)?;
        let rec = EegRecording::new(
            Tensor::from_vec(vec![h.channels, h.samples], eeg)?,
            h.sample_rate_hz,
            h.subject_id,
            h.recording_id,
        )?;
        pairs.push((
            rec,
            EnvelopeSignal {
                samples: env,
                sample_rate_hz: h.sample_rate_hz,
            },
        ));
        provenance = h.provenance;
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no cached recordings under {}",
            dir.display()
        )));
    }
    validate_pairs(&pairs)?;
    Ok((pairs, provenance))
}

/// Shape summary of externally preprocessed data.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalShape {
    pub recordings: usize,
    pub channels: usize,
    pub total_samples: usize,
    pub subjects: usize,
}

/// Checks headers and blob sizes of an externally prepared cache without
/// reading sample values. Every recording must have `expected_channels`.
pub fn inspect_external(dir: &Path, expected_channels: usize) -> Result<ExternalShape> {
    let mut shape = ExternalShape {
        recordings: 0,
        channels: expected_channels,
        total_samples: 0,
        subjects: 0,
    };
    let mut subjects = std::collections::BTreeSet::new();
    for sub in recording_dirs(dir)? {
        let h = read_header(&sub)?;
        if h.channels != expected_channels {
            return Err(Error::dim(format!(
                "{}: {} channels, expected {expected_channels}",
                sub.display(),
                h.channels
            )));
        }
        for (blob, n) in [
            (EEG_BLOB, h.channels * h.samples),
            (ENVELOPE_BLOB, h.samples),
        ] {
            let path = sub.join(blob);
            let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            if len != (n * 8) as u64 {
                return Err(Error::dim(format!(
                    "{}: {len} bytes, header implies {}",
                    path.display(),
                    n * 8
                )));
            }
        }
        shape.recordings += 1;
        shape.total_samples += h.samples;
        subjects.insert(h.subject_id);
    }
    shape.subjects = subjects.len();
    if shape.recordings == 0 {
        return Err(Error::InsufficientData(format!(
            "no recordings under {}",
            dir.display()
        )));
    }
    Ok(shape)
}
