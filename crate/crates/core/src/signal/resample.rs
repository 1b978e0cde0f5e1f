//! Windowed-sinc decimation to an arbitrary lower rate.

use std::f64::consts::PI;

use super::EegRecording;
use crate::error::{Error, Result};

/// Anti-aliasing cutoff as a fraction of the target rate.
const CUTOFF: f64 = 0.45;
/// Kernel half-width in target-rate samples.
const HALF_WIDTH: f64 = 8.0;

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    let x = PI * (u + 1.0);
    0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Output length for `len` samples resampled from `from_hz` to `to_hz`.
pub fn resampled_len(len: usize, from_hz: f64, to_hz: f64) -> usize {
    (len as f64 * to_hz / from_hz + 1e-9).floor() as usize
}

/// Low-pass and resample `x` from `from_hz` to `to_hz <= from_hz`.
///
/// Kernel weights are renormalized per output sample, so constants are
/// reproduced exactly, including at the edges.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if !(to_hz > 0.0 && from_hz > 0.0) || !to_hz.is_finite() || !from_hz.is_finite() {
        return Err(Error::Parameter(format!("rates {from_hz} -> {to_hz} Hz")));
    }
    if to_hz > from_hz {
        return Err(Error::Parameter(format!(
            "upsampling from {from_hz} to {to_hz} Hz is not supported"
        )));
    }
    if to_hz == from_hz {
        return Ok(x.to_vec());
    }
    let ratio = from_hz / to_hz;
    let reach = HALF_WIDTH * ratio;
    let n_out = resampled_len(x.len(), from_hz, to_hz);
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        let centre = m as f64 * ratio;
        let lo = ((centre - reach).ceil().max(0.0)) as usize;
        let hi = ((centre + reach).floor() as usize).min(x.len().saturating_sub(1));
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (n, &xv) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let u = (n as f64 - centre) / ratio;
            let w = sinc(2.0 * CUTOFF * u) * blackman(u / HALF_WIDTH);
            acc += w * xv;
            wsum += w;
        }
        out.push(acc / wsum);
    }
    Ok(out)
}

pub fn resample_recording(x: &EegRecording, to_hz: f64) -> Result<EegRecording> {
    let mut y = x.map_channels(|c| resample(c, x.sample_rate_hz, to_hz))?;
    y.sample_rate_hz = to_hz;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_rate_is_identity() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(resample(&x, 64.0, 64.0).unwrap(), x);
    }

    #[test]
    fn non_integer_ratio_length() {
        let y = resample(&vec![0.0; 1000], 100.0, 64.0).unwrap();
        assert_eq!(y.len(), 640);
    }

    #[test]
    fn energy_above_target_nyquist_is_suppressed() {
        // 40 Hz at 512 Hz folds to 24 Hz at 64 Hz if not filtered
        let x: Vec<f64> = (0..4096)
            .map(|n| (2.0 * PI * 40.0 * n as f64 / 512.0).sin())
            .collect();
        let y = resample(&x, 512.0, 64.0).unwrap();
        let mid = &y[32..y.len() - 32];
        let peak = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e-3, "{peak}");
    }
}
