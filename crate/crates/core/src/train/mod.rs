//! Three-phase protocol: classifier pretraining, freezing, then alternating
//! estimator refits with codec updates.

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Archive;
pub use config::{EmbeddingNorm, EmbeddingTarget, ModelScale, RunConfig};
pub use metrics::{MetricsLog, MetricsRow};

use crate::classifier::CtaMtdnn;
use crate::codec::MlaCodec;
use crate::error::{Error, Result};
use crate::mi::{gather_rows, total_loss, MiConfig, MiEstimator};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::signal::{highpass_zero_phase, synth_generate, window_and_split, Pair, WindowedDataset};
use crate::tensor::{Tape, Tensor, Var};

/// Rows of inference work per forward call outside training.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Freeze,
    Joint,
}

/// Serializable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub type Datasets = (WindowedDataset, WindowedDataset, WindowedDataset);

/// High-pass stage applied to raw pairs.
pub fn preprocess(pairs: Vec<Pair>, cfg: &RunConfig) -> Result<Vec<Pair>> {
    pairs
        .into_iter()
        .map(|(eeg, env)| {
            Ok((
                highpass_zero_phase(&eeg, cfg.highpass_hz, cfg.highpass_order)?,
                env,
            ))
        })
        .collect()
}

/// Synthetic pairs after the high-pass stage.
pub fn prepare_pairs(cfg: &RunConfig) -> Result<Vec<Pair>> {
    preprocess(synth_generate(&cfg.synth)?, cfg)
}

pub fn split_pairs(pairs: &[Pair], cfg: &RunConfig) -> Result<Datasets> {
    window_and_split(pairs, cfg.window_s, cfg.hop_s, cfg.mode, cfg.ratios)
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Datasets> {
    cfg.validate()?;
    split_pairs(&prepare_pairs(cfg)?, cfg)
}

/// Average-pooled envelope summary `[B, L / pool]` of reconstructions `[B, L]`.
pub fn summarize(tape: &Tape<f64>, recon: Var, pool: usize) -> Result<Var> {
    let s = tape.shape(recon);
    let x = tape.reshape(recon, &[s[0], 1, s[1]])?;
    let y = tape.avgpool1d(x, pool)?;
    tape.reshape(y, &[s[0], s[1] / pool])
}

pub fn summarize_tensor(recon: &Tensor<f64>, pool: usize) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let v = tape.constant(recon.clone());
    let out = summarize(&tape, v, pool)?;
    let t = tape.value(out).clone();
    Ok(t)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

/// Codec output for a `[B, C, L]` batch, chunked to bound memory.
fn reconstruct_rows(codec: &MlaCodec<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (b, row) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let mut data = Vec::new();
    for idx in chunks(b) {
        let part = Tensor::from_vec(
            vec![idx.len(), x.shape()[1], x.shape()[2]],
            x.data()[idx[0] * row..(idx[idx.len() - 1] + 1) * row].to_vec(),
        )?;
        data.extend_from_slice(codec.predict(&part)?.data());
    }
    Tensor::from_vec(vec![b, x.shape()[2]], data)
}

/// Codec reconstructions of every window in `ds`, `[N, L]`.
pub fn reconstruct_all(codec: &MlaCodec<f64>, ds: &WindowedDataset) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(ds.len() * ds.window_len);
    for idx in chunks(ds.len()) {
        let (x, _, _) = ds.batch(&idx);
        data.extend_from_slice(codec.predict(&x)?.data());
    }
    Tensor::from_vec(vec![ds.len(), ds.window_len], data)
}

/// Mean per-window correlation between reconstructions and targets.
pub fn mean_pcc(recon: &Tensor<f64>, ds: &WindowedDataset) -> f64 {
    let l = ds.window_len;
    let total: f64 = (0..ds.len())
        .map(|i| crate::eval::pcc_value(ds.envelope(i), &recon.data()[i * l..(i + 1) * l]))
        .sum();
    total / ds.len().max(1) as f64
}

/// Frozen subject embeddings `[N, 2C]` for every window of `ds`.
pub fn embed_all(model: &CtaMtdnn<f64>, ds: &WindowedDataset) -> Result<Tensor<f64>> {
    let d = model.config().embedding_dim();
    let mut data = Vec::with_capacity(ds.len() * d);
    for idx in chunks(ds.len()) {
        let (x, _, _) = ds.batch(&idx);
        data.extend_from_slice(model.subject_embedding(&x)?.data());
    }
    Tensor::from_vec(vec![ds.len(), d], data)
}

/// Replaces every row with the mean row of its label.
pub fn subject_means(x: &mut Tensor<f64>, labels: &[usize]) {
    let d = x.shape()[1];
    let mut sums: BTreeMap<usize, (Vec<f64>, f64)> = BTreeMap::new();
    for (row, &y) in x.data().chunks(d).zip(labels) {
        let e = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0.0));
        e.0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        e.1 += 1.0;
    }
    for (row, y) in x.data_mut().chunks_mut(d).zip(labels) {
        let (s, n) = &sums[y];
        row.iter_mut().zip(s).for_each(|(v, a)| *v = a / n);
    }
}

/// Per-dimension standardization of rows, in place; returns (mean, std).
pub fn standardize_rows(x: &mut Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let d = x.shape()[1];
    let n = x.shape()[0].max(1) as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n);
    }
    for row in x.data().chunks(d) {
        for ((v, m), s) in row.iter().zip(&mean).zip(&mut var) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
    for row in x.data_mut().chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }
    (mean, std)
}

// ---------------------------------------------------------------- pretrain

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: CtaMtdnn<f64>,
    pub history: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Accuracy and mean cross-entropy of `model` on `ds`.
pub fn classifier_scores(model: &CtaMtdnn<f64>, ds: &WindowedDataset) -> Result<(f64, f64)> {
    scores_against(model, ds, &ds.labels())
}

fn scores_against(
    model: &CtaMtdnn<f64>,
    ds: &WindowedDataset,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let k = model.config().n_subjects;
    let (mut correct, mut loss) = (0usize, 0.0);
    for idx in chunks(ds.len()) {
        let (x, _, _) = ds.batch(&idx);
        let p = model.classify(&x)?;
        for (row, y) in p.data().chunks(k).zip(idx.iter().map(|&i| labels[i])) {
            let arg = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0;
            correct += usize::from(arg == y);
            loss -= row[y].max(1e-300).ln();
        }
    }
    let n = ds.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Random labels that give every subject's windows an even spread of
/// classes, so no subject keeps a majority label the network could learn.
fn balanced_random_labels(ds: &WindowedDataset, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let truth = ds.labels();
    let mut out = vec![0; truth.len()];
    for s in ds.subjects() {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == s).collect();
        let offset = rng.gen_range(0..k);
        let mut pool: Vec<usize> = (0..idx.len()).map(|j| (j + offset) % k).collect();
        pool.shuffle(rng);
        for (&i, y) in idx.iter().zip(pool) {
            out[i] = y;
        }
    }
    out
}

/// With `shuffle_labels`, both the training labels and the validation labels
/// used for early stopping are replaced by [`balanced_random_labels`].
pub fn pretrain_classifier(
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &RunConfig,
    log: &mut MetricsLog,
) -> Result<PretrainOutcome> {
    let subjects = train.subjects();
    if subjects.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "classifier pretraining needs at least 2 subjects, train split has {}",
            subjects.len()
        )));
    }
    let ccfg = cfg.classifier_config();
    if let Some(&s) = subjects
        .iter()
        .chain(val.subjects().iter())
        .find(|&&s| s >= ccfg.n_subjects)
    {
        return Err(Error::Config(format!(
            "subject id {s} outside the classifier's {} classes",
            ccfg.n_subjects
        )));
    }
    let mut model = CtaMtdnn::<f64>::new(ccfg, cfg.seed)?;
    let mut opt = Adam::new(
        model.params(),
        AdamConfig::with_lr(cfg.lr_classifier).clipped(cfg.clip_norm),
    );
    let mut rng = seeded(cfg.seed, 1);

    let (labels, val_labels) = if cfg.shuffle_labels {
        let mut r = seeded(cfg.seed, 4);
        (
            balanced_random_labels(train, model.config().n_subjects, &mut r),
            balanced_random_labels(val, model.config().n_subjects, &mut r),
        )
    } else {
        (train.labels(), val.labels())
    };
    let mut best = (f64::NEG_INFINITY, 0, model.params().clone());
    let mut history = Vec::new();
    let mut bad = 0;
    for epoch in 1..=cfg.epochs_classifier {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let (x, _, _) = train.batch(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let p = model.params().bind(&tape, true);
            let xv = tape.constant(x);
            let z = model.logits(&tape, &p, xv)?;
            let loss = tape.cross_entropy(z, &y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classifier loss at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            let grads = p.grads(&tape)?;
            opt.step(model.params_mut(), &grads)?;
            total += value;
            batches += 1;
        }
        let (val_acc, val_loss) = scores_against(&model, val, &val_labels)?;
        let row = ClassifierEpoch {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss,
            val_acc,
        };
        log.push(MetricsRow {
            epoch,
            phase: "pretrain".into(),
            l_corr: None,
            l_var: None,
            val_pcc: None,
            probe_acc: Some(val_acc),
        })?;
        history.push(row);
        if val_acc > best.0 {
            best = (val_acc, epoch, model.params().clone());
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    model.params_mut().assign(&best.2)?;
    Ok(PretrainOutcome {
        model,
        history,
        best_epoch: best.1,
        best_val_acc: best.0,
    })
}

// ------------------------------------------------------------------- joint

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub epoch: usize,
    pub codec_steps: u64,
    pub estimator_steps: u64,
    pub best_epoch: usize,
    pub best_val_pcc: f64,
    pub bad_epochs: usize,
    pub stopped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointEpoch {
    pub epoch: usize,
    pub l_corr: f64,
    pub l_var: Option<f64>,
    pub val_pcc: f64,
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    /// Best-validation codec.
    pub codec: MlaCodec<f64>,
    pub estimator: Option<MiEstimator<f64>>,
    pub history: Vec<JointEpoch>,
    pub counters: Counters,
}

/// Everything needed to continue a joint run exactly.
struct JointState {
    codec: MlaCodec<f64>,
    best: ParamSet<f64>,
    codec_opt: Adam<f64>,
    estimator: Option<(MiEstimator<f64>, Adam<f64>)>,
    counters: Counters,
    rng: ChaCha8Rng,
    /// Draws estimator refit samples; separate so `lambda = 0` leaves the
    /// codec trajectory untouched.
    mi_rng: ChaCha8Rng,
    history: Vec<JointEpoch>,
}

pub const JOINT_LAST: &str = "joint-last";

#[derive(Serialize, Deserialize)]
struct JointMeta {
    phase: Phase,
    config_hash: String,
    counters: Counters,
    rng: RngState,
    mi_rng: RngState,
    codec_adam_step: u64,
    estimator_adam_step: Option<u64>,
    history: Vec<JointEpoch>,
}

fn push_adam(a: &mut Archive, prefix: &str, set: &ParamSet<f64>, opt: &Adam<f64>) {
    for ((name, _), (m, v)) in set.iter().zip(opt.m.iter().zip(&opt.v)) {
        a.push(format!("{prefix}m/{name}"), m);
        a.push(format!("{prefix}v/{name}"), v);
    }
}

fn restore_adam(
    a: &Archive,
    prefix: &str,
    set: &ParamSet<f64>,
    opt: &mut Adam<f64>,
    step: u64,
) -> Result<()> {
    for (slot, (name, t)) in set.iter().enumerate() {
        for (kind, dst) in [("m", &mut opt.m[slot]), ("v", &mut opt.v[slot])] {
            let key = format!("{prefix}{kind}/{name}");
            let src = a
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {key}", a.path.display())))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{key}: shape mismatch")));
            }
            *dst = src.clone();
        }
    }
    opt.step = step;
    Ok(())
}

impl JointState {
    fn save(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        let meta = JointMeta {
            phase: Phase::Joint,
            config_hash: cfg.hash(),
            counters: self.counters.clone(),
            rng: RngState::capture(&self.rng),
            mi_rng: RngState::capture(&self.mi_rng),
            codec_adam_step: self.codec_opt.step,
            estimator_adam_step: self.estimator.as_ref().map(|(_, o)| o.step),
            history: self.history.clone(),
        };
        let mut a = Archive::new("joint", serde_json::to_value(&meta)?);
        a.push_params("", self.codec.params());
        a.push_params("best/", &self.best);
        push_adam(&mut a, "adam.codec/", self.codec.params(), &self.codec_opt);
        if let Some((est, opt)) = &self.estimator {
            a.push_params("", est.params());
            push_adam(&mut a, "adam.mi/", est.params(), opt);
        }
        a.save(dir)
    }

    fn load(&mut self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        let a = Archive::load(dir)?;
        if a.kind != "joint" {
            return Err(Error::Checkpoint(format!(
                "{}: a {} archive cannot resume a joint run",
                dir.display(),
                a.kind
            )));
        }
        let meta: JointMeta = serde_json::from_value(a.meta.clone())?;
        if meta.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "{}: written by config {}, resuming with {}",
                dir.display(),
                meta.config_hash,
                cfg.hash()
            )));
        }
        a.restore("", self.codec.params_mut())?;
        a.restore("best/", &mut self.best)?;
        restore_adam(
            &a,
            "adam.codec/",
            self.codec.params(),
            &mut self.codec_opt,
            meta.codec_adam_step,
        )?;
        match (&mut self.estimator, meta.estimator_adam_step) {
            (Some((est, opt)), Some(step)) => {
                a.restore("", est.params_mut())?;
                restore_adam(&a, "adam.mi/", est.params(), opt, step)?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::Checkpoint(
                    "estimator presence differs from the checkpoint".into(),
                ))
            }
        }
        self.counters = meta.counters;
        self.rng = meta.rng.restore()?;
        self.mi_rng = meta.mi_rng.restore()?;
        self.history = meta.history;
        Ok(())
    }
}

/// Options for [`train_joint`] beyond the run config.
#[derive(Clone, Debug, Default)]
pub struct JointOptions<'a> {
    /// Written after every epoch as `<dir>/joint-last`.
    pub checkpoint_dir: Option<&'a Path>,
    pub resume_from: Option<&'a Path>,
    /// Return after this epoch as if interrupted (the checkpoint is kept).
    pub halt_after: Option<usize>,
}

/// Codec training with the clipped MI penalty against a frozen classifier.
///
/// With `classifier = None` the estimator is skipped and this is plain codec
/// training; with `lambda = 0` the codec trajectory is the same as that,
/// while the estimator is still fitted and its bound reported.
pub fn train_joint(
    train: &WindowedDataset,
    val: &WindowedDataset,
    classifier: Option<&CtaMtdnn<f64>>,
    cfg: &RunConfig,
    log: &mut MetricsLog,
    opts: &JointOptions,
) -> Result<JointOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::InsufficientData(
            "joint training needs at least 2 windows".into(),
        ));
    }
    let codec = MlaCodec::<f64>::new(cfg.codec_config(), cfg.seed)?;
    let codec_opt = Adam::new(
        codec.params(),
        AdamConfig::with_lr(cfg.lr_codec).clipped(cfg.clip_norm),
    );
    let embeddings = match classifier {
        Some(c) => {
            let mut z = embed_all(c, train)?;
            if cfg.zs_target == EmbeddingTarget::Subject {
                subject_means(&mut z, &train.labels());
            }
            standardize_rows(&mut z);
            if cfg.zs_norm == EmbeddingNorm::Total {
                let s = (z.shape()[1] as f64).sqrt().recip();
                z.data_mut().iter_mut().for_each(|v| *v *= s);
            }
            Some(z)
        }
        None => None,
    };
    let estimator = match &embeddings {
        Some(z) => {
            let mcfg = MiConfig::new(train.window_len / cfg.envelope_pool, z.shape()[1])
                .with_hidden(cfg.mi_hidden)
                .with_variance(cfg.mi_variance);
            let est = MiEstimator::<f64>::new(mcfg, cfg.seed.wrapping_add(1))?;
            let opt = Adam::new(
                est.params(),
                AdamConfig::with_lr(cfg.lr_estimator).clipped(cfg.clip_norm),
            );
            Some((est, opt))
        }
        None => None,
    };
    let mut st = JointState {
        best: codec.params().clone(),
        codec,
        codec_opt,
        estimator,
        counters: Counters {
            best_val_pcc: f64::NEG_INFINITY,
            ..Counters::default()
        },
        rng: seeded(cfg.seed, 2),
        mi_rng: seeded(cfg.seed, 3),
        history: Vec::new(),
    };
    if let Some(dir) = opts.resume_from {
        st.load(dir, cfg)?;
    }

    while st.counters.epoch < cfg.epochs_joint && !st.counters.stopped {
        let epoch = st.counters.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut st.rng);
        let (mut sum_corr, mut sum_var, mut batches) = (0.0, 0.0, 0);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let (x, truth, _) = train.batch(idx);
            let zs = embeddings.as_ref().map(|z| gather_rows(z, idx));

            if let (Some((est, opt)), Some(all_zs)) = (&mut st.estimator, &embeddings) {
                if st.counters.codec_steps % cfg.k as u64 == 0 {
                    let (fit_x, fit_zs) = if cfg.mi_batch == 0 {
                        (x.clone(), zs.clone().unwrap())
                    } else {
                        let pick: Vec<usize> = (0..cfg.mi_batch)
                            .map(|_| st.mi_rng.gen_range(0..train.len()))
                            .collect();
                        (train.batch(&pick).0, gather_rows(all_zs, &pick))
                    };
                    let ze =
                        summarize_tensor(&reconstruct_rows(&st.codec, &fit_x)?, cfg.envelope_pool)?;
                    for _ in 0..cfg.m {
                        est.fit_step(opt, &ze, &fit_zs)?;
                    }
                    st.counters.estimator_steps += cfg.m as u64;
                }
            }

            let tape = Tape::new();
            let p = st.codec.params().bind(&tape, true);
            let xv = tape.constant(x);
            let tv = tape.constant(truth);
            let recon = st.codec.reconstruct(&tape, &p, xv)?;
            let l_corr = tape.pearson_loss(tv, recon)?;
            let objective = match (&st.estimator, &zs) {
                (Some((est, _)), Some(zs)) => {
                    let ze = summarize(&tape, recon, cfg.envelope_pool)?;
                    let l_var = est.detached_bound(&tape, ze, zs)?;
                    sum_var += tape.value(l_var).data()[0];
                    total_loss(&tape, l_corr, l_var, cfg.lambda)?
                }
                _ => l_corr,
            };
            let c = tape.value(l_corr).data()[0];
            let o = tape.value(objective).data()[0];
            if !c.is_finite() || !o.is_finite() || !sum_var.is_finite() {
                return Err(Error::NonFinite(format!(
                    "joint loss at epoch {epoch}, step {}; last good state kept in the checkpoint directory",
                    st.counters.codec_steps
                )));
            }
            tape.backward(objective)?;
            let grads = p.grads(&tape)?;
            st.codec_opt.step(st.codec.params_mut(), &grads)?;
            st.counters.codec_steps += 1;
            sum_corr += c;
            batches += 1;
        }

        let val_pcc = mean_pcc(&reconstruct_all(&st.codec, val)?, val);
        let n = batches.max(1) as f64;
        let row = JointEpoch {
            epoch,
            l_corr: sum_corr / n,
            l_var: st.estimator.as_ref().map(|_| sum_var / n),
            val_pcc,
        };
        log.push(MetricsRow {
            epoch,
            phase: "joint".into(),
            l_corr: Some(row.l_corr),
            l_var: row.l_var,
            val_pcc: Some(val_pcc),
            probe_acc: None,
        })?;
        st.history.push(row);
        st.counters.epoch = epoch;
        if val_pcc > st.counters.best_val_pcc {
            st.counters.best_val_pcc = val_pcc;
            st.counters.best_epoch = epoch;
            st.counters.bad_epochs = 0;
            st.best = st.codec.params().clone();
        } else {
            st.counters.bad_epochs += 1;
            st.counters.stopped = st.counters.bad_epochs >= cfg.patience;
        }
        if let Some(dir) = opts.checkpoint_dir {
            st.save(&dir.join(JOINT_LAST), cfg)?;
        }
        if opts.halt_after == Some(epoch) {
            break;
        }
    }

    let mut codec = st.codec;
    codec.params_mut().assign(&st.best)?;
    Ok(JointOutcome {
        codec,
        estimator: st.estimator.map(|(e, _)| e),
        history: st.history,
        counters: st.counters,
    })
}

/// Saves a network's parameters as a standalone archive of `kind`.
pub fn save_params(
    dir: &Path,
    kind: &str,
    set: &ParamSet<f64>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut a = Archive::new(kind, meta);
    a.push_params("", set);
    a.save(dir)
}

/// Subjects present in a dataset, for overlap checks.
pub fn subject_set(ds: &WindowedDataset) -> BTreeSet<usize> {
    ds.subjects()
}
