//! Run configuration: a flat `key = value` file whose keys double as CLI
//! flags (`--key value`). Later assignments override earlier ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::mi::VarianceMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingTarget {
    Window,
    Subject,
}

impl EmbeddingTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "window" => Some(Self::Window),
            "subject" => Some(Self::Subject),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Window => "window",
            Self::Subject => "subject",
        }
    }
}

/// Scaling applied to frozen subject embeddings before the estimator sees
/// them. Both standardize each dimension on the train split; `Total`
/// further divides by the square root of the width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingNorm {
    Dim,
    Total,
}

impl EmbeddingNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dim" => Some(Self::Dim),
            "total" => Some(Self::Total),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dim => "dim",
            Self::Total => "total",
        }
    }
}
use crate::signal::{SplitMode, SplitRatios, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelScale {
    /// Narrow layers sized for a single CPU core.
    Desk,
    /// The reference widths.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub highpass_hz: f64,
    pub highpass_order: usize,
    pub window_s: f64,
    pub hop_s: f64,
    pub mode: SplitMode,
    pub ratios: SplitRatios,

    pub seed: u64,
    pub model_scale: ModelScale,
    pub batch_size: usize,
    pub lr_classifier: f64,
    pub lr_codec: f64,
    pub lr_estimator: f64,
    pub epochs_classifier: usize,
    pub epochs_joint: usize,
    pub patience: usize,
    /// Reconstructor steps per estimator refit.
    pub k: usize,
    /// Estimator steps per refit.
    pub m: usize,
    pub lambda: f64,
    pub clip_norm: f64,
    pub envelope_pool: usize,
    pub mi_hidden: usize,
    /// Windows drawn per estimator refit; 0 reuses the current codec batch.
    pub mi_batch: usize,
    pub mi_variance: VarianceMode,
    pub zs_norm: EmbeddingNorm,
    pub zs_target: EmbeddingTarget,
    pub shuffle_labels: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                noise_snr_db: 20.0,
                ..SynthConfig::default()
            },
            highpass_hz: 0.5,
            highpass_order: 1,
            window_s: 5.0,
            hop_s: 1.0,
            mode: SplitMode::Inner,
            ratios: SplitRatios::default(),
            seed: 42,
            model_scale: ModelScale::Desk,
            batch_size: 32,
            lr_classifier: 1e-4,
            lr_codec: 1e-3,
            lr_estimator: 1e-3,
            epochs_classifier: 50,
            epochs_joint: 100,
            patience: 10,
            k: 5,
            m: 5,
            lambda: 0.1,
            clip_norm: 5.0,
            envelope_pool: 5,
            mi_hidden: 128,
            mi_batch: 256,
            mi_variance: VarianceMode::Unit,
            zs_norm: EmbeddingNorm::Dim,
            zs_target: EmbeddingTarget::Subject,
            shuffle_labels: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Every recognised key with a one-line description.
fn fnv_hex<'a>(lines: impl Iterator<Item = &'a str>) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for line in lines {
        for b in line.bytes().chain(std::iter::once(b'\n')) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

/// The first `SYNTH_KEYS` entries of [`KEYS`] configure the generator.
pub const SYNTH_KEYS: usize = 12;

pub const KEYS: &[(&str, &str)] = &[
    ("n_subjects", "synthetic subjects"),
    ("recordings_per_subject", "synthetic recordings per subject"),
    ("duration_s", "synthetic recording length in seconds"),
    ("channels", "EEG channels"),
    ("mixing_rank", "rank of the subject lag-mixing operators"),
    ("lag_taps", "length of the envelope response in samples"),
    ("noise_snr_db", "signal-to-noise ratio of the synthetic EEG"),
    ("synth_seed", "generator seed"),
    ("sample_rate_hz", "working sample rate"),
    ("subject_variability", "scale of per-subject departures"),
    ("noise_sources", "latent noise sources per subject"),
    ("shared_stimulus", "all subjects hear the same stimulus per recording index"),
    ("highpass_hz", "zero-phase high-pass cutoff"),
    ("highpass_order", "high-pass Butterworth order"),
    ("window_s", "window length in seconds"),
    ("hop_s", "window hop in seconds"),
    ("mode", "split mode: inner or cross"),
    ("train_ratio", "train share"),
    ("val_ratio", "validation share"),
    ("test_ratio", "test share"),
    ("seed", "training seed"),
    ("model_scale", "desk or full layer widths"),
    ("batch_size", "minibatch size"),
    ("lr_classifier", "classifier learning rate"),
    ("lr_codec", "codec learning rate"),
    ("lr_estimator", "estimator learning rate"),
    ("epochs_classifier", "classifier epochs"),
    ("epochs_joint", "codec epochs"),
    ("patience", "early-stopping patience in epochs"),
    ("k", "codec steps per estimator refit"),
    ("m", "estimator steps per refit"),
    ("lambda", "weight of the clipped MI penalty"),
    ("clip_norm", "global gradient-norm clip"),
    ("envelope_pool", "average-pool width for the envelope summary"),
    ("mi_hidden", "estimator hidden width"),
    ("mi_batch", "training windows sampled per estimator refit (0 = current batch)"),
    ("mi_variance", "estimator variance: unit or learned"),
    ("zs_target", "estimator target: window (each window's embedding) or subject (train-split mean embedding of the window's subject)"),
    ("zs_norm", "subject embedding scaling: dim (unit variance per dimension) or total (unit total variance)"),
    ("shuffle_labels", "train and early-stop the classifier on random labels (control)"),
    ("out_dir", "output directory"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synth;
        match key {
            "n_subjects" => s.n_subjects = parse(key, v)?,
            "recordings_per_subject" => s.recordings_per_subject = parse(key, v)?,
            "duration_s" => s.duration_s = parse(key, v)?,
            "channels" => s.channels = parse(key, v)?,
            "mixing_rank" => s.mixing_rank = parse(key, v)?,
            "lag_taps" => s.lag_taps = parse(key, v)?,
            "noise_snr_db" => s.noise_snr_db = parse(key, v)?,
            "synth_seed" => s.seed = parse(key, v)?,
            "sample_rate_hz" => s.sample_rate_hz = parse(key, v)?,
            "subject_variability" => s.subject_variability = parse(key, v)?,
            "noise_sources" => s.noise_sources = parse(key, v)?,
            "shared_stimulus" => s.shared_stimulus = parse(key, v)?,
            "highpass_hz" => self.highpass_hz = parse(key, v)?,
            "highpass_order" => self.highpass_order = parse(key, v)?,
            "window_s" => self.window_s = parse(key, v)?,
            "hop_s" => self.hop_s = parse(key, v)?,
            "mode" => {
                self.mode = SplitMode::parse(v).ok_or_else(|| {
                    Error::Config(format!("mode must be inner or cross, got {v:?}"))
                })?
            }
            "train_ratio" => self.ratios.train = parse(key, v)?,
            "val_ratio" => self.ratios.val = parse(key, v)?,
            "test_ratio" => self.ratios.test = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "model_scale" => {
                self.model_scale = match v {
                    "desk" => ModelScale::Desk,
                    "full" => ModelScale::Full,
                    _ => {
                        return Err(Error::Config(format!(
                            "model_scale must be desk or full, got {v:?}"
                        )))
                    }
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_classifier" => self.lr_classifier = parse(key, v)?,
            "lr_codec" => self.lr_codec = parse(key, v)?,
            "lr_estimator" => self.lr_estimator = parse(key, v)?,
            "epochs_classifier" => self.epochs_classifier = parse(key, v)?,
            "epochs_joint" => self.epochs_joint = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "envelope_pool" => self.envelope_pool = parse(key, v)?,
            "mi_hidden" => self.mi_hidden = parse(key, v)?,
            "mi_batch" => self.mi_batch = parse(key, v)?,
            "zs_target" => {
                self.zs_target = EmbeddingTarget::parse(v).ok_or_else(|| {
                    Error::Config(format!("zs_target must be window or subject, got {v:?}"))
                })?
            }
            "zs_norm" => {
                self.zs_norm = EmbeddingNorm::parse(v).ok_or_else(|| {
                    Error::Config(format!("zs_norm must be dim or total, got {v:?}"))
                })?
            }
            "mi_variance" => {
                self.mi_variance = VarianceMode::parse(v).ok_or_else(|| {
                    Error::Config(format!("mi_variance must be unit or learned, got {v:?}"))
                })?
            }
            "shuffle_labels" => self.shuffle_labels = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.synth;
        Some(match key {
            "n_subjects" => s.n_subjects.to_string(),
            "recordings_per_subject" => s.recordings_per_subject.to_string(),
            "duration_s" => s.duration_s.to_string(),
            "channels" => s.channels.to_string(),
            "mixing_rank" => s.mixing_rank.to_string(),
            "lag_taps" => s.lag_taps.to_string(),
            "noise_snr_db" => s.noise_snr_db.to_string(),
            "synth_seed" => s.seed.to_string(),
            "sample_rate_hz" => s.sample_rate_hz.to_string(),
            "subject_variability" => s.subject_variability.to_string(),
            "noise_sources" => s.noise_sources.to_string(),
            "shared_stimulus" => s.shared_stimulus.to_string(),
            "highpass_hz" => self.highpass_hz.to_string(),
            "highpass_order" => self.highpass_order.to_string(),
            "window_s" => self.window_s.to_string(),
            "hop_s" => self.hop_s.to_string(),
            "mode" => self.mode.name().to_string(),
            "train_ratio" => self.ratios.train.to_string(),
            "val_ratio" => self.ratios.val.to_string(),
            "test_ratio" => self.ratios.test.to_string(),
            "seed" => self.seed.to_string(),
            "model_scale" => match self.model_scale {
                ModelScale::Desk => "desk".into(),
                ModelScale::Full => "full".into(),
            },
            "batch_size" => self.batch_size.to_string(),
            "lr_classifier" => self.lr_classifier.to_string(),
            "lr_codec" => self.lr_codec.to_string(),
            "lr_estimator" => self.lr_estimator.to_string(),
            "epochs_classifier" => self.epochs_classifier.to_string(),
            "epochs_joint" => self.epochs_joint.to_string(),
            "patience" => self.patience.to_string(),
            "k" => self.k.to_string(),
            "m" => self.m.to_string(),
            "lambda" => self.lambda.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "envelope_pool" => self.envelope_pool.to_string(),
            "mi_hidden" => self.mi_hidden.to_string(),
            "mi_batch" => self.mi_batch.to_string(),
            "mi_variance" => self.mi_variance.name().to_string(),
            "zs_norm" => self.zs_norm.name().to_string(),
            "zs_target" => self.zs_target.name().to_string(),
            "shuffle_labels" => self.shuffle_labels.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key = value` listing of every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    /// FNV-1a over every `key = value` line except `out_dir`, as 16 hex
    /// digits. Runs that differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        fnv_hex(
            self.to_text()
                .lines()
                .filter(|l| !l.starts_with("out_dir ")),
        )
    }

    /// The generator's `key = value` lines; a recording cache is only valid
    /// for a config with the same lines.
    pub fn data_provenance(&self) -> Vec<String> {
        KEYS[..SYNTH_KEYS]
            .iter()
            .map(|(k, _)| format!("{k} = {}", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs_classifier", self.epochs_classifier),
            ("epochs_joint", self.epochs_joint),
            ("patience", self.patience),
            ("k", self.k),
            ("m", self.m),
            ("envelope_pool", self.envelope_pool),
            ("mi_hidden", self.mi_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        for (k, v) in [
            ("lr_classifier", self.lr_classifier),
            ("lr_codec", self.lr_codec),
            ("lr_estimator", self.lr_estimator),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        let win = (self.window_s * self.synth.sample_rate_hz).round() as usize;
        let quantum = self.codec_config().length_quantum();
        if win % quantum != 0 {
            return Err(Error::Config(format!(
                "window of {win} samples is not a multiple of {quantum}"
            )));
        }
        if win % self.envelope_pool != 0 {
            return Err(Error::Config(format!(
                "envelope_pool {} does not divide the {win}-sample window",
                self.envelope_pool
            )));
        }
        Ok(())
    }

    pub fn codec_config(&self) -> CodecConfig {
        let base = match self.model_scale {
            ModelScale::Desk => CodecConfig::desk(),
            ModelScale::Full => CodecConfig::default(),
        };
        CodecConfig {
            in_channels: self.synth.channels,
            ..base
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        let base = match self.model_scale {
            ModelScale::Desk => ClassifierConfig::desk(),
            ModelScale::Full => ClassifierConfig::default(),
        };
        ClassifierConfig {
            in_channels: self.synth.channels,
            n_subjects: self.synth.n_subjects,
            ..base
        }
    }

    pub fn window_len(&self) -> usize {
        (self.window_s * self.synth.sample_rate_hz).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        other.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, other);
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = cfg.clone();
            c.set(k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn later_lines_override_and_comments_ignored() {
        let mut c = RunConfig::default();
        c.apply_text("lambda = 0.5\n# lambda = 9\nlambda=0.25  # trailing\n\nmode = cross")
            .unwrap();
        assert_eq!(c.lambda, 0.25);
        assert_eq!(c.mode, SplitMode::Cross);
    }

    #[test]
    fn bad_input_is_reported() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("nonsense").is_err());
        assert!(c.apply_text("unknown_key = 1").is_err());
        assert!(c.apply_text("batch_size = many").is_err());
        c.lambda = -0.1;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
