mod common;

use eegenv::mi::{gather_rows, FitSchedule, MiConfig, MiEstimator};
use eegenv::optim::{Adam, AdamConfig};
use eegenv::train::{embed_all, prepare_data, pretrain_classifier, MetricsLog};
use eegenv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut rng))
}

fn fitted(ze: &Tensor, zs: &Tensor, steps: usize) -> (MiEstimator<f64>, Vec<f64>) {
    let cfg = MiConfig::new(ze.shape()[1], zs.shape()[1]).with_hidden(32);
    let mut est = MiEstimator::<f64>::new(cfg, 11).unwrap();
    let mut opt = Adam::new(est.params(), AdamConfig::with_lr(3e-3));
    let trace = est
        .fit(
            &mut opt,
            ze,
            zs,
            FitSchedule {
                steps,
                batch: 128,
                seed: 5,
            },
        )
        .unwrap();
    (est, trace)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn identical_copies_carry_information_growing_with_dimension() {
    let mut last = 0.0;
    for d in [1, 4] {
        let z = gaussian(2000, d, 3);
        let (est, _) = fitted(&z, &z, 1500);
        let mi = est.estimate(&z, &z).unwrap();
        assert!(mi > 0.5, "d = {d}: {mi}");
        assert!(mi > last, "d = {d}: {mi} not above {last}");
        last = mi;
    }
}

#[test]
fn fit_loss_falls_on_correlated_data() {
    let a = gaussian(2000, 2, 1);
    let b = gaussian(2000, 2, 2);
    let c = Tensor::from_fn(&[2000, 2], |i| 0.9 * a.data()[i] + 0.3 * b.data()[i]);
    let (_, trace) = fitted(&a, &c, 800);
    let windows: Vec<f64> = trace.chunks(50).map(mean).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0] + 0.02, "{windows:?}");
    }
    assert!(windows[windows.len() - 1] < windows[0] - 0.1, "{windows:?}");
}

#[test]
fn independent_pairs_fit_worse_than_matched() {
    let a = gaussian(2000, 2, 1);
    let b = gaussian(2000, 2, 2);
    let c = Tensor::from_fn(&[2000, 2], |i| 0.9 * a.data()[i] + 0.3 * b.data()[i]);
    let perm: Vec<usize> = (0..2000).map(|i| (i * 7 + 3) % 2000).collect();
    let shuffled = gather_rows(&c, &perm);
    let (_, matched) = fitted(&a, &c, 800);
    let (_, broken) = fitted(&a, &shuffled, 800);
    let tail = |t: &[f64]| mean(&t[t.len() - 100..]);
    assert!(
        tail(&broken) > tail(&matched) + 0.5,
        "{} vs {}",
        tail(&broken),
        tail(&matched)
    );
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn pretrained_embeddings_cluster_by_subject() {
    let mut cfg = common::tiny_config();
    cfg.epochs_classifier = 4;
    cfg.lr_classifier = 1e-3;
    let (train, val, test) = prepare_data(&cfg).unwrap();
    let out = pretrain_classifier(&train, &val, &cfg, &mut MetricsLog::memory()).unwrap();
    let z = embed_all(&out.model, &test).unwrap();
    let d = z.shape()[1];
    assert_eq!(d, out.model.config().embedding_dim());
    let labels = test.labels();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let c = cosine(&z.data()[i * d..(i + 1) * d], &z.data()[j * d..(j + 1) * d]);
            if labels[i] == labels[j] {
                same.push(c);
            } else {
                cross.push(c);
            }
        }
    }
    assert!(
        mean(&same) > mean(&cross),
        "same {} cross {}",
        mean(&same),
        mean(&cross)
    );
}
