//! Gammatone-subband envelope with power-law compression.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::EnvelopeSignal;

pub const BANDS: usize = 28;
pub const COMPRESSION: f64 = 0.6;
const LOW_HZ: f64 = 50.0;
const HIGH_HZ: f64 = 5000.0;
const GAMMATONE_ORDER: usize = 4;

fn erb(f: f64) -> f64 {
    24.7 + f / 9.265
}

fn erb_rate(f: f64) -> f64 {
    9.265 * (1.0 + f / (24.7 * 9.265)).ln()
}

fn erb_rate_inv(e: f64) -> f64 {
    24.7 * 9.265 * ((e / 9.265).exp() - 1.0)
}

/// Centre frequencies equally spaced on the ERB-rate scale, capped below
/// Nyquist.
pub fn centre_frequencies(sample_rate_hz: f64) -> Vec<f64> {
    let high = HIGH_HZ.min(0.45 * sample_rate_hz);
    let low = LOW_HZ.min(high / 2.0);
    let (a, b) = (erb_rate(low), erb_rate(high));
    (0..BANDS)
        .map(|k| erb_rate_inv(a + (b - a) * k as f64 / (BANDS - 1) as f64))
        .collect()
}

/// Magnitude of a fourth-order complex gammatone output (cascade of
/// complex one-pole sections, unit gain at the centre frequency). A real
/// tone puts half its amplitude on the positive frequency, hence the 2.
fn band_magnitude(audio: &[f64], fc: f64, fs: f64) -> Vec<f64> {
    let bw = 1.019 * erb(fc);
    let pole = Complex64::from_polar((-2.0 * PI * bw / fs).exp(), 2.0 * PI * fc / fs);
    let rot = Complex64::from_polar(1.0, 2.0 * PI * fc / fs);
    let gain = (Complex64::new(1.0, 0.0) - pole / rot).norm();
    let mut state = [Complex64::new(0.0, 0.0); GAMMATONE_ORDER];
    audio
        .iter()
        .map(|&x| {
            let mut v = Complex64::new(x, 0.0);
            for s in state.iter_mut() {
                *s = v + pole * *s;
                v = *s * gain;
            }
            2.0 * v.norm()
        })
        .collect()
}

/// Subband magnitudes, compressed with exponent 0.6 and averaged across
/// bands. The result stays at the source rate.
pub fn envelope_extract(audio: &[f64], sample_rate_hz: f64) -> EnvelopeSignal {
    let mut acc = vec![0.0; audio.len()];
    let bands = centre_frequencies(sample_rate_hz);
    for &fc in &bands {
        for (a, m) in acc
            .iter_mut()
            .zip(band_magnitude(audio, fc, sample_rate_hz))
        {
            *a += m.powf(COMPRESSION);
        }
    }
    acc.iter_mut().for_each(|v| *v /= bands.len() as f64);
    EnvelopeSignal {
        samples: acc,
        sample_rate_hz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_are_increasing_and_below_nyquist() {
        for fs in [8000.0, 16000.0, 44100.0] {
            let f = centre_frequencies(fs);
            assert_eq!(f.len(), BANDS);
            assert!(f.windows(2).all(|w| w[1] > w[0]));
            assert!(*f.last().unwrap() < fs / 2.0);
            assert!((f[0] - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tone_at_centre_has_unit_gain() {
        let fs = 16000.0;
        let fc = centre_frequencies(fs)[10];
        let x: Vec<f64> = (0..16000)
            .map(|n| (2.0 * PI * fc * n as f64 / fs).sin())
            .collect();
        let m = band_magnitude(&x, fc, fs);
        let tail = &m[8000..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }
}
