//! Butterworth design (bilinear transform, second-order sections) and
//! forward-backward filtering.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::EegRecording;
use crate::error::{Error, Result};

/// One biquad `b0 + b1 z^-1 + b2 z^-2 / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Lowpass,
    Highpass,
}

/// Poles closer than this to the unit circle are treated as unstable.
const STABILITY_MARGIN: f64 = 1e-6;

pub fn butterworth(order: usize, cutoff_hz: f64, fs: f64, band: Band) -> Result<Vec<Sos>> {
    let nyq = fs / 2.0;
    if order == 0 {
        return Err(Error::Parameter("filter order must be positive".into()));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < nyq) {
        return Err(Error::Parameter(format!(
            "cutoff {cutoff_hz} Hz outside (0, {nyq}) Hz"
        )));
    }
    let warped = 2.0 * fs * (PI * cutoff_hz / fs).tan();
    let k2 = 2.0 * fs;
    let mut sections = Vec::new();
    let zero = match band {
        Band::Lowpass => -1.0,
        Band::Highpass => 1.0,
    };
    let mut poles = Vec::new();
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let s = match band {
            Band::Lowpass => proto * warped,
            Band::Highpass => warped / proto,
        };
        let z = (k2 + s) / (k2 - s);
        if z.norm() >= 1.0 - STABILITY_MARGIN || !z.is_finite() {
            return Err(Error::Parameter(format!(
                "cutoff {cutoff_hz} Hz at {fs} Hz gives a pole on the unit circle"
            )));
        }
        poles.push(z);
    }
    // conjugate pairs have theta symmetric about pi; pair k with order-1-k
    for k in 0..order / 2 {
        let p = poles[k];
        sections.push(Sos {
            b: [1.0, -2.0 * zero, 1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        });
    }
    if order % 2 == 1 {
        let p = poles[order / 2];
        sections.push(Sos {
            b: [1.0, -zero, 0.0],
            a: [1.0, -p.re, 0.0],
        });
    }
    // unit gain at DC (lowpass) or Nyquist (highpass)
    let at = Complex64::new(-zero, 0.0);
    for s in &mut sections {
        let g = response(s, at).norm();
        s.b.iter_mut().for_each(|b| *b /= g);
    }
    Ok(sections)
}

fn response(s: &Sos, z: Complex64) -> Complex64 {
    let zi = z.inv();
    let num = s.b[0] + zi * (s.b[1] + zi * s.b[2]);
    let den = s.a[0] + zi * (s.a[1] + zi * s.a[2]);
    num / den
}

/// Magnitude response of a cascade at `freq_hz`.
pub fn gain_at(sections: &[Sos], freq_hz: f64, fs: f64) -> f64 {
    let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / fs);
    sections.iter().map(|s| response(s, z).norm()).product()
}

/// Steady-state transposed-direct-form state for a unit step.
fn step_state(s: &Sos) -> [f64; 2] {
    let dc = (s.b[0] + s.b[1] + s.b[2]) / (s.a[0] + s.a[1] + s.a[2]);
    let z1 = s.b[2] - s.a[2] * dc;
    let z0 = s.b[1] - s.a[1] * dc + z1;
    [z0, z1]
}

fn dc_gain(s: &Sos) -> f64 {
    (s.b[0] + s.b[1] + s.b[2]) / (s.a[0] + s.a[1] + s.a[2])
}

/// Causal cascade starting from the steady state of `x[0]`.
pub fn sosfilt(sections: &[Sos], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    let Some(&first) = x.first() else {
        return y;
    };
    let mut level = first;
    for s in sections {
        let [z0, z1] = step_state(s);
        let (mut z0, mut z1) = (z0 * level, z1 * level);
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b[0] * xin + z0;
            z0 = s.b[1] * xin - s.a[1] * out + z1;
            z1 = s.b[2] * xin - s.a[2] * out;
            *v = out;
        }
        level *= dc_gain(s);
    }
    y
}

/// Zero-phase forward-backward filtering with odd-reflection padding.
pub fn filtfilt(sections: &[Sos], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = sosfilt(sections, &ext);
    y.reverse();
    let mut y = sosfilt(sections, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Zero-phase Butterworth high-pass applied to every channel.
pub fn highpass_zero_phase(x: &EegRecording, cutoff_hz: f64, order: usize) -> Result<EegRecording> {
    let sections = butterworth(order, cutoff_hz, x.sample_rate_hz, Band::Highpass)?;
    x.map_channels(|c| Ok(filtfilt(&sections, c)))
}
