mod common;

use common::oracle_r;
use eegenv::classifier::weighted_stats;
use eegenv::eval::pcc_metric;
use eegenv::mi::{gaussian_loglik, total_loss_value};
use eegenv::signal::dataset::window_starts;
use eegenv::tensor::{softmax, ConvSpec};
use eegenv::train::Archive;
use eegenv::{Tape, Tensor};
use proptest::prelude::*;

fn vec_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

/// Pairs of equal-length rows whose truth row is far from constant.
fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40)
        .prop_flat_map(|n| (vec_strategy(n..n + 1), vec_strategy(n..n + 1)))
        .prop_filter("non-degenerate", |(a, b)| {
            let spread = |v: &[f64]| {
                v.iter().cloned().fold(f64::MIN, f64::max)
                    - v.iter().cloned().fold(f64::MAX, f64::min)
            };
            spread(a) > 1e-3 && spread(b) > 1e-3
        })
}

fn row_loss(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len();
    let tape = Tape::new();
    let t = tape.constant(Tensor::from_vec(vec![1, n], truth.to_vec()).unwrap());
    let p = tape.constant(Tensor::from_vec(vec![1, n], pred.to_vec()).unwrap());
    let l = tape.pearson_loss(t, p).unwrap();
    let v = tape.value(l).data()[0];
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tensor_len_is_shape_product(shape in prop::collection::vec(1usize..5, 0..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::from_vec(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::from_vec(shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn grads_match_value_shapes(b in 1usize..3, c in 1usize..4, t in 4usize..12, seed in 0u64..1000) {
        let x = Tensor::from_fn(&[b, c, t], |i| ((i as u64 * 31 + seed) % 17) as f64 / 8.0 - 1.0);
        let k = Tensor::from_fn(&[2, c, 3], |i| ((i as u64 * 13 + seed) % 11) as f64 / 5.0 - 1.0);
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let kv = tape.param(k.clone());
        let y = tape.conv1d(xv, kv, None, ConvSpec::same()).unwrap();
        let y = tape.tanh(y).unwrap();
        let pooled = tape.maxpool1d(y, 2).unwrap();
        let l = tape.mean_all(pooled).unwrap();
        tape.backward(l).unwrap();
        let (gx, gk) = (tape.grad(xv).unwrap(), tape.grad(kv).unwrap());
        prop_assert_eq!(gx.shape(), x.shape());
        prop_assert_eq!(gk.shape(), k.shape());
    }

    #[test]
    fn pearson_loss_is_one_minus_r((a, b) in pair_strategy()) {
        let l = row_loss(&a, &b);
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!((l - (1.0 - oracle_r(&a, &b))).abs() < 1e-10);
    }

    #[test]
    fn pearson_loss_positive_affine_invariant((a, b) in pair_strategy(), scale in 0.01..100.0f64, shift in -50.0..50.0f64) {
        let moved: Vec<f64> = b.iter().map(|v| scale * v + shift).collect();
        prop_assert!((row_loss(&a, &b) - row_loss(&a, &moved)).abs() < 1e-9);
        let flipped: Vec<f64> = b.iter().map(|v| -v).collect();
        prop_assert!((row_loss(&a, &b) + row_loss(&a, &flipped) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn pcc_metric_in_range((a, b) in pair_strategy()) {
        let r = pcc_metric(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((pcc_metric(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(row in vec_strategy(1..20), shift in -100.0..100.0f64) {
        let p = softmax(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let moved: Vec<f64> = row.iter().map(|v| v + shift).collect();
        for (x, y) in p.iter().zip(softmax(&moved)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_stats_are_bounded(c in 1usize..4, t in 1usize..10, frames in vec_strategy(40..41), scores in vec_strategy(40..41)) {
        let n = c * t;
        let tape = Tape::new();
        let f = tape.constant(Tensor::from_vec(vec![1, c, t], frames[..n].to_vec()).unwrap());
        let s = tape.constant(Tensor::from_vec(vec![1, c, t], scores[..n].to_vec()).unwrap());
        let out = tape.value(weighted_stats(&tape, f, s).unwrap()).clone();
        for ch in 0..c {
            let row = &frames[ch * t..(ch + 1) * t];
            let lo = row.iter().cloned().fold(f64::MAX, f64::min);
            let hi = row.iter().cloned().fold(f64::MIN, f64::max);
            let (mu, sd) = (out.data()[ch], out.data()[c + ch]);
            prop_assert!(mu >= lo - 1e-9 && mu <= hi + 1e-9);
            prop_assert!(sd >= 0.0 && sd <= (hi - lo) + 1e-4);
        }
    }

    #[test]
    fn clipped_objective_never_below_correlation_loss(l_corr in 0.0..2.0f64, l_var in -5.0..5.0f64, lambda in 0.0..2.0f64) {
        let total = total_loss_value(l_corr, l_var, lambda).unwrap();
        prop_assert!(total >= l_corr);
        if l_var <= 0.0 || lambda == 0.0 {
            prop_assert_eq!(total, l_corr);
        }
        prop_assert!(total_loss_value(l_corr, l_var, -lambda - 1e-3).is_err());
    }

    #[test]
    fn unit_variance_loglik_peaks_at_the_mean(z in vec_strategy(1..8)) {
        let mu = z.clone();
        let best = gaussian_loglik(&z, &mu, None);
        let d = z.len() as f64;
        prop_assert!((best + 0.5 * d * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let off: Vec<f64> = mu.iter().map(|v| v + 0.5).collect();
        prop_assert!(gaussian_loglik(&z, &off, None) < best);
    }

    #[test]
    fn window_start_count(len in 1usize..2000, win in 1usize..400, hop in 1usize..100) {
        let starts = window_starts(len, win, hop);
        let expected = if len < win { 0 } else { (len - win) / hop + 1 };
        prop_assert_eq!(starts.len(), expected);
        prop_assert!(starts.iter().all(|s| s + win <= len));
        prop_assert!(starts.windows(2).all(|w| w[1] - w[0] == hop));
    }

    #[test]
    fn upsample_then_average_is_identity(x in vec_strategy(6..7), factor in 1usize..4) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(vec![1, 2, 3], x.clone()).unwrap());
        let up = tape.upsample_nearest(v, factor).unwrap();
        let back = tape.avgpool1d(up, factor).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn archive_round_trip(values in prop::collection::vec(vec_strategy(1..30), 1..5)) {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::new("test", serde_json::json!({ "n": values.len() }));
        for (i, v) in values.iter().enumerate() {
            a.push(format!("t{i}.w"), &Tensor::from_vec(vec![v.len()], v.clone()).unwrap());
        }
        a.save(dir.path()).unwrap();
        let b = Archive::load(dir.path()).unwrap();
        prop_assert_eq!(&a.kind, &b.kind);
        prop_assert_eq!(&a.meta, &b.meta);
        prop_assert_eq!(&a.tensors, &b.tensors);
    }
}
