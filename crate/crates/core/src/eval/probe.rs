//! Subject probe: multinomial logistic regression on summary features,
//! scored by stratified k-fold cross-validation.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Band edges in Hz for the envelope spectrum features.
pub const BAND_EDGES_HZ: [f64; 7] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub min_per_subject: usize,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            min_per_subject: 20,
            iterations: 300,
            lr: 0.1,
            l2: 1e-3,
        }
    }
}

/// Mean, variance and log band powers of one envelope window.
pub fn envelope_features(x: &[f64], fs: f64) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mut out = vec![mean, var];
    for edge in BAND_EDGES_HZ.windows(2) {
        let p: f64 = (1..=n / 2)
            .filter(|&k| {
                let f = k as f64 * fs / n as f64;
                f >= edge[0] && f < edge[1]
            })
            .map(|k| buf[k].norm_sqr())
            .sum::<f64>()
            / (n * n) as f64;
        out.push((p + 1e-12).ln());
    }
    out
}

/// Log variance of each channel of a `[C, L]` window.
pub fn eeg_features(x: &[f64], channels: usize) -> Vec<f64> {
    let l = x.len() / channels;
    x.chunks(l)
        .map(|c| {
            let m = c.iter().sum::<f64>() / l as f64;
            let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / l as f64;
            (v + 1e-12).ln()
        })
        .collect()
}

/// Probe features of each row of a row-major `[N, L]` buffer.
pub fn probe_reconstructions(rows: &[f64], len: usize, fs: f64) -> Vec<Vec<f64>> {
    rows.chunks(len).map(|r| envelope_features(r, fs)).collect()
}

struct Softmax {
    w: Vec<f64>,
    k: usize,
    d: usize,
}

impl Softmax {
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.k)
            .map(|c| {
                let row = &self.w[c * (self.d + 1)..(c + 1) * (self.d + 1)];
                row[self.d] + row[..self.d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z
            .iter_mut()
            .map(|v| {
                *v = (*v - m).exp();
                *v
            })
            .sum();
        z.iter_mut().for_each(|v| *v /= s);
        z
    }

    /// Full-batch Adam on mean cross-entropy plus an L2 penalty on weights.
    fn fit(x: &[Vec<f64>], y: &[usize], k: usize, cfg: &ProbeConfig) -> Self {
        let d = x[0].len();
        let mut me = Softmax {
            w: vec![0.0; k * (d + 1)],
            k,
            d,
        };
        let (mut m, mut v) = (vec![0.0; me.w.len()], vec![0.0; me.w.len()]);
        let n = x.len() as f64;
        for t in 1..=cfg.iterations {
            let mut g = vec![0.0; me.w.len()];
            for (xi, &yi) in x.iter().zip(y) {
                let p = me.probs(xi);
                for c in 0..k {
                    let e = (p[c] - f64::from(u8::from(c == yi))) / n;
                    let row = &mut g[c * (d + 1)..(c + 1) * (d + 1)];
                    row.iter_mut().zip(xi).for_each(|(gj, xj)| *gj += e * xj);
                    row[d] += e;
                }
            }
            for c in 0..k {
                for j in 0..d {
                    g[c * (d + 1) + j] += cfg.l2 * me.w[c * (d + 1) + j];
                }
            }
            let (b1, b2) = (0.9f64, 0.999f64);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                me.w[i] -= cfg.lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        me
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs(x);
        (0..self.k).fold(0, |b, c| if p[c] > p[b] { c } else { b })
    }
}

/// Cross-validated accuracy of a logistic probe predicting `labels` from
/// `features`. Labels may be any ids; at least two distinct ones with
/// `min_per_subject` samples each are required.
pub fn subject_probe(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} feature rows, {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "probe needs 2 subjects, got {}",
            by_class.len()
        )));
    }
    if let Some((s, v)) = by_class
        .iter()
        .find(|(_, v)| v.len() < cfg.min_per_subject.max(cfg.folds))
    {
        return Err(Error::InsufficientData(format!(
            "subject {s} has {} windows, probe needs {}",
            v.len(),
            cfg.min_per_subject.max(cfg.folds)
        )));
    }
    let d = features[0].len();
    if features
        .iter()
        .any(|f| f.len() != d || f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::param(
            "probe features must be finite rows of equal width",
        ));
    }
    let class_index: BTreeMap<usize, usize> =
        by_class.keys().enumerate().map(|(i, &s)| (s, i)).collect();
    let k = class_index.len();

    // Each subject's rows are cut into `folds` contiguous runs in input
    // order, so overlapping neighbouring windows rarely straddle a fold.
    let mut fold = vec![0; labels.len()];
    for idx in by_class.values() {
        for (j, &i) in idx.iter().enumerate() {
            fold[i] = j * cfg.folds / idx.len();
        }
    }

    let mut correct = 0;
    for f in 0..cfg.folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
        let mean: Vec<f64> = (0..d)
            .map(|j| train.iter().map(|&i| features[i][j]).sum::<f64>() / train.len() as f64)
            .collect();
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let v = train
                    .iter()
                    .map(|&i| (features[i][j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / train.len() as f64;
                v.sqrt().max(1e-9)
            })
            .collect();
        let z = |i: usize| -> Vec<f64> {
            features[i]
                .iter()
                .zip(&mean)
                .zip(&std)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        };
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();
        let ys: Vec<usize> = train.iter().map(|&i| class_index[&labels[i]]).collect();
        let model = Softmax::fit(&xs, &ys, k, cfg);
        correct += (0..labels.len())
            .filter(|&i| fold[i] == f && model.predict(&z(i)) == class_index[&labels[i]])
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}
