//! Synthetic EEG with a known envelope response and per-subject structure.
//!
//! Each subject has its own lag-mixing operator (a shared low-rank temporal
//! response plus a subject deviation, with a subject gain) and its own noise
//! signature: resonant latent sources at subject-specific frequencies mixed
//! through a subject-specific spatial pattern, plus sensor noise with
//! subject-specific channel gains. By default all subjects hear the same
//! stimuli.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::filter::{butterworth, filtfilt, Band};
use super::{EegRecording, EnvelopeSignal, Pair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub recordings_per_subject: usize,
    pub duration_s: f64,
    pub channels: usize,
    /// Rank of the lag-mixing operators.
    pub mixing_rank: usize,
    pub lag_taps: usize,
    pub noise_snr_db: f64,
    pub seed: u64,
    pub sample_rate_hz: f64,
    /// Scale of every per-subject departure from the shared model.
    pub subject_variability: f64,
    pub noise_sources: usize,
    /// Every subject hears the same stimulus for a given recording index,
    /// so envelopes carry no subject information.
    pub shared_stimulus: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            recordings_per_subject: 1,
            duration_s: 120.0,
            channels: 64,
            mixing_rank: 4,
            lag_taps: 16,
            noise_snr_db: 0.0,
            seed: 42,
            sample_rate_hz: 64.0,
            subject_variability: 0.5,
            noise_sources: 8,
            shared_stimulus: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_subjects,
            self.recordings_per_subject,
            self.channels,
            self.mixing_rank,
            self.lag_taps,
            self.noise_sources,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!(
                "synthetic counts must be positive: {self:?}"
            )));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("duration {}", self.duration_s)));
        }
        if !(self.sample_rate_hz >= 32.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "sample rate {} Hz is below 32 Hz",
                self.sample_rate_hz
            )));
        }
        if !self.noise_snr_db.is_finite() {
            return Err(Error::Config("SNR must be finite".into()));
        }
        if !(self.subject_variability >= 0.0 && self.subject_variability.is_finite()) {
            return Err(Error::Config(
                "subject variability must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 48 | a << 24 | b);
    rng
}

struct Subject {
    /// `[channels][lag_taps]`
    mixing: Vec<Vec<f64>>,
    /// `[channels][sources]`
    spatial: Vec<Vec<f64>>,
    resonances: Vec<f64>,
    sensor_gain: Vec<f64>,
}

/// Temporal response basis: one smooth bump per rank component.
fn response_basis(rank: usize, taps: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rank)
        .map(|r| {
            let latency = (r + 1) as f64 * taps as f64 / (rank + 1) as f64;
            let width = 1.0 + taps as f64 / (2.0 * (rank + 1) as f64);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (0..taps)
                .map(|k| sign * (-0.5 * ((k as f64 - latency) / width).powi(2)).exp())
                .collect()
        })
        .collect()
}

fn low_rank(u: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let taps = v[0].len();
    u.iter()
        .map(|row| {
            (0..taps)
                .map(|k| row.iter().zip(v).map(|(a, b)| a * b[k]).sum())
                .collect()
        })
        .collect()
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| normal(rng)).collect())
        .collect()
}

fn draw_subject(
    cfg: &SynthConfig,
    shared_u: &[Vec<f64>],
    shared_v: &[Vec<f64>],
    s: usize,
) -> Subject {
    let mut rng = stream(cfg.seed, 1, s as u64, 0);
    let v = cfg.subject_variability;
    let dev_u = gaussian_matrix(cfg.channels, cfg.mixing_rank, &mut rng);
    let dev_v = response_basis(cfg.mixing_rank, cfg.lag_taps, &mut rng);
    let shared = low_rank(shared_u, shared_v);
    let own = low_rank(&dev_u, &dev_v);
    let mut mixing: Vec<Vec<f64>> = shared
        .iter()
        .zip(&own)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + v * y).collect())
        .collect();
    let fro = mixing.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let gain = (0.5 * v * normal(&mut rng)).exp() * (cfg.channels as f64).sqrt() / fro;
    mixing.iter_mut().flatten().for_each(|x| *x *= gain);

    let spatial = gaussian_matrix(cfg.channels, cfg.noise_sources, &mut rng);
    let resonances = (0..cfg.noise_sources)
        .map(|_| rng.gen_range(3.0..12.0_f64).min(0.4 * cfg.sample_rate_hz))
        .collect();
    let sensor_gain = (0..cfg.channels)
        .map(|_| (v * normal(&mut rng)).exp())
        .collect();
    Subject {
        mixing,
        spatial,
        resonances,
        sensor_gain,
    }
}

/// Rectified, smoothed band-limited noise; nonnegative.
fn draw_envelope(n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let white: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let band = butterworth(2, 8.0_f64.min(0.2 * fs), fs, Band::Lowpass)?;
    let carrier = filtfilt(&band, &white);
    let width = ((fs / 8.0).round() as usize).max(1);
    let rect: Vec<f64> = carrier.iter().map(|v| v.abs()).collect();
    let mut env = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        acc += rect[i];
        if i >= width {
            acc -= rect[i - width];
        }
        env.push((acc / width.min(i + 1) as f64).max(0.0));
    }
    let sd = std_dev(&env).max(1e-12);
    env.iter_mut().for_each(|v| *v /= sd);
    Ok(env)
}

fn std_dev(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Damped resonator driven by white noise.
fn resonant_source(n: usize, freq: f64, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r: f64 = 0.96;
    let (a1, a2) = (2.0 * r * (2.0 * PI * freq / fs).cos(), -r * r);
    let burn = 256;
    let mut y = vec![0.0; n + burn];
    for t in 0..n + burn {
        let mut v = normal(rng);
        if t >= 1 {
            v += a1 * y[t - 1];
        }
        if t >= 2 {
            v += a2 * y[t - 2];
        }
        y[t] = v;
    }
    y.split_off(burn)
}

fn mean_power(rows: &[Vec<f64>]) -> f64 {
    let n: usize = rows.iter().map(Vec::len).sum();
    rows.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64
}

/// Generates `n_subjects * recordings_per_subject` EEG/envelope pairs.
/// Recording ids are `s{subject:02}-r{recording:02}`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Pair>> {
    cfg.validate()?;
    let fs = cfg.sample_rate_hz;
    let n = cfg.samples();
    let taps = cfg.lag_taps;
    let mut rng = stream(cfg.seed, 0, 0, 0);
    let shared_u = gaussian_matrix(cfg.channels, cfg.mixing_rank, &mut rng);
    let shared_v = response_basis(cfg.mixing_rank, taps, &mut rng);

    let mut out = Vec::new();
    for s in 0..cfg.n_subjects {
        let subject = draw_subject(cfg, &shared_u, &shared_v, s);
        for r in 0..cfg.recordings_per_subject {
            let full = if cfg.shared_stimulus {
                draw_envelope(n + taps, fs, &mut stream(cfg.seed, 4, 0, r as u64))?
            } else {
                draw_envelope(n + taps, fs, &mut stream(cfg.seed, 2, s as u64, r as u64))?
            };
            let mut rng = stream(cfg.seed, 3, s as u64, r as u64);

            let signal: Vec<Vec<f64>> = subject
                .mixing
                .iter()
                .map(|a| {
                    (0..n)
                        .map(|t| (0..taps).map(|k| a[k] * full[t + taps - k]).sum())
                        .collect()
                })
                .collect();

            let sources: Vec<Vec<f64>> = subject
                .resonances
                .iter()
                .map(|&f| resonant_source(n, f, fs, &mut rng))
                .collect();
            let mut structured: Vec<Vec<f64>> = subject
                .spatial
                .iter()
                .map(|w| {
                    (0..n)
                        .map(|t| w.iter().zip(&sources).map(|(a, src)| a * src[t]).sum())
                        .collect()
                })
                .collect();
            let mut sensor: Vec<Vec<f64>> = subject
                .sensor_gain
                .iter()
                .map(|&g| (0..n).map(|_| g * normal(&mut rng)).collect())
                .collect();
            // equal structured and sensor power, then scale to the target SNR
            let ps = mean_power(&structured).max(1e-300);
            let pn = mean_power(&sensor).max(1e-300);
            let target = mean_power(&signal) / 10f64.powf(cfg.noise_snr_db / 10.0);
            let (ks, kn) = ((0.5 * target / ps).sqrt(), (0.5 * target / pn).sqrt());
            structured.iter_mut().flatten().for_each(|v| *v *= ks);
            sensor.iter_mut().flatten().for_each(|v| *v *= kn);

            let mut data = Vec::with_capacity(cfg.channels * n);
            for c in 0..cfg.channels {
                for t in 0..n {
                    data.push(signal[c][t] + structured[c][t] + sensor[c][t]);
                }
            }
            let eeg = EegRecording::new(
                Tensor::from_vec(vec![cfg.channels, n], data)?,
                fs,
                s,
                format!("s{s:02}-r{r:02}"),
            )?;
            let env = EnvelopeSignal {
                samples: full[taps..].to_vec(),
                sample_rate_hz: fs,
            };
            out.push((eeg, env));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            n_subjects: 2,
            duration_s: 10.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes() {
        let pairs = synth_generate(&tiny()).unwrap();
        assert_eq!(pairs.len(), 2);
        for (eeg, env) in &pairs {
            assert_eq!(eeg.samples.shape(), &[64, 640]);
            assert_eq!(env.len(), 640);
            assert!(env.samples.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(pairs[1].0.recording_id, "s01-r00");
    }

    #[test]
    fn snr_is_respected() {
        let mut cfg = tiny();
        cfg.noise_snr_db = 6.0;
        cfg.subject_variability = 0.0;
        let clean = {
            let mut c = cfg.clone();
            c.noise_snr_db = 300.0;
            synth_generate(&c).unwrap()
        };
        let noisy = synth_generate(&cfg).unwrap();
        let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let sig = p(clean[0].0.samples.data());
        let noise: f64 = noisy[0]
            .0
            .samples
            .data()
            .iter()
            .zip(clean[0].0.samples.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let snr = 10.0 * (sig / noise).log10();
        assert!((snr - 6.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.channels = 0;
        assert!(synth_generate(&c).is_err());
        let mut c = tiny();
        c.noise_snr_db = f64::INFINITY;
        assert!(synth_generate(&c).is_err());
    }
}
