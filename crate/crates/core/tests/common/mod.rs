#![allow(dead_code)]

use eegenv::signal::SplitMode;
use eegenv::train::RunConfig;

/// Three 8-channel subjects, 80 s each: small enough for debug-speed runs.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.synth.n_subjects = 3;
    c.synth.duration_s = 80.0;
    c.synth.channels = 8;
    c.synth.noise_sources = 4;
    c.epochs_classifier = 2;
    c.epochs_joint = 3;
    c.batch_size = 16;
    c.mi_batch = 32;
    c.mi_hidden = 16;
    c.mode = SplitMode::Inner;
    c
}

/// Sample Pearson correlation by the textbook two-pass formula.
pub fn oracle_r(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Naive DFT magnitude at bin `k`, normalised to a sinusoid's amplitude.
pub fn dft_amplitude(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let w = 2.0 * std::f64::consts::PI * k as f64 * t as f64 / n;
        re += v * w.cos();
        im -= v * w.sin();
    }
    2.0 * (re * re + im * im).sqrt() / n
}

/// Backward ridge model from `lags` future EEG samples of every channel to
/// the envelope, fitted on every `stride`-th train window and scored as the
/// mean per-window correlation on `test`.
pub fn ridge_oracle(
    train: &eegenv::signal::WindowedDataset,
    test: &eegenv::signal::WindowedDataset,
    lags: usize,
    lambda: f64,
    stride: usize,
) -> f64 {
    let c = train.channels;
    let l = train.window_len;
    let p = c * lags + 1;
    let n = l - lags;
    let design = |x: &[f64]| -> Vec<f64> {
        let mut f = Vec::with_capacity(n * p);
        for t in 0..n {
            f.push(1.0);
            for ch in 0..c {
                f.extend_from_slice(&x[ch * l + t..ch * l + t + lags]);
            }
        }
        f
    };
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for i in (0..train.len()).step_by(stride) {
        let f = design(&train.eeg(i));
        let e = train.envelope(i);
        unsafe {
            matrixmultiply::dgemm(
                p,
                n,
                p,
                1.0,
                f.as_ptr(),
                1,
                p as isize,
                f.as_ptr(),
                p as isize,
                1,
                1.0,
                a.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        for t in 0..n {
            for u in 0..p {
                b[u] += f[t * p + u] * e[t];
            }
        }
    }
    for u in 1..p {
        a[u * p + u] += lambda;
    }
    let w = cholesky_solve(&a, &b, p);
    let mut total = 0.0;
    for i in 0..test.len() {
        let f = design(&test.eeg(i));
        let pred: Vec<f64> = f
            .chunks(p)
            .map(|r| r.iter().zip(&w).map(|(x, y)| x * y).sum())
            .collect();
        total += oracle_r(&test.envelope(i)[..n], &pred);
    }
    total / test.len() as f64
}

fn cholesky_solve(a: &[f64], b: &[f64], p: usize) -> Vec<f64> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let s = a[i * p + j] - (0..j).map(|k| l[i * p + k] * l[j * p + k]).sum::<f64>();
            l[i * p + j] = if i == j { s.sqrt() } else { s / l[j * p + j] };
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        y[i] = (b[i] - (0..i).map(|k| l[i * p + k] * y[k]).sum::<f64>()) / l[i * p + i];
    }
    let mut w = vec![0.0; p];
    for i in (0..p).rev() {
        w[i] = (y[i] - (i + 1..p).map(|k| l[k * p + i] * w[k]).sum::<f64>()) / l[i * p + i];
    }
    w
}
