//! Subject classifier: multi-scale SE-Res2Net TDNN with channel-and-temporal
//! attentive statistics pooling.
//!
//! ```text
//! x -> front conv -> block1 -> block2 -> block3
//!                      |        |         |
//!                      +---- concat ------+ -> fuse (1x1) -> H [B, C, T]
//! H -> attention pooling -> [mean ; std] (2C) -> affine head -> logits
//! ```
//!
//! The pooled `[mean ; std]` vector is the subject embedding used by the
//! mutual-information estimator. Parameter names are prefixed `cta.`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{he_uniform, lecun_uniform, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Activation, ConvSpec, Tape, Tensor, Var};

pub const BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeRes2NetConfig {
    pub channels: usize,
    /// Res2Net scale: number of channel groups.
    pub scale: usize,
    pub se_reduction: usize,
    pub dilations: [usize; BLOCKS],
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Projection width of the score network (must be below the pooled width).
    pub dim: usize,
    #[serde(with = "crate::codec::activation_serde")]
    pub nonlinearity: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub front_kernel: usize,
    pub block: SeRes2NetConfig,
    pub fused_channels: usize,
    pub attention: AttentionConfig,
    pub n_subjects: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            front_kernel: 5,
            block: SeRes2NetConfig {
                channels: 64,
                scale: 4,
                se_reduction: 8,
                dilations: [1, 2, 3],
                kernel: 3,
            },
            fused_channels: 128,
            attention: AttentionConfig {
                dim: 64,
                nonlinearity: Activation::Tanh,
            },
            n_subjects: 10,
        }
    }
}

impl ClassifierConfig {
    /// Narrow variant used for single-core training runs.
    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            block: SeRes2NetConfig {
                channels: 32,
                ..base.block
            },
            fused_channels: 64,
            attention: AttentionConfig {
                dim: 32,
                ..base.attention
            },
            ..base
        }
    }

    pub fn with_subjects(mut self, n: usize) -> Self {
        self.n_subjects = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.block;
        if b.scale < 2 || b.channels % b.scale != 0 {
            return Err(Error::Config(format!(
                "block channels {} not divisible into {} groups",
                b.channels, b.scale
            )));
        }
        if b.se_reduction == 0 || b.channels % b.se_reduction != 0 {
            return Err(Error::Config(format!(
                "SE reduction {} does not divide {} channels",
                b.se_reduction, b.channels
            )));
        }
        if self.attention.dim == 0 || self.attention.dim >= self.fused_channels {
            return Err(Error::Config(format!(
                "attention width {} must be in 1..{}",
                self.attention.dim, self.fused_channels
            )));
        }
        if self.n_subjects < 2 {
            return Err(Error::Config("classifier needs at least 2 subjects".into()));
        }
        if self.in_channels == 0
            || self.front_kernel == 0
            || b.kernel == 0
            || b.dilations.contains(&0)
        {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.fused_channels
    }
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct BlockSlots {
    pre: Affine,
    groups: Vec<Affine>,
    post: Affine,
    se_down: Affine,
    se_up: Affine,
    dilation: usize,
}

#[derive(Clone, Debug)]
struct Slots {
    front: Affine,
    blocks: Vec<BlockSlots>,
    fuse: Affine,
    attn_w: Affine,
    attn_v: Affine,
    head: Affine,
}

#[derive(Clone, Debug)]
pub struct CtaMtdnn<T> {
    cfg: ClassifierConfig,
    params: ParamSet<T>,
    slots: Slots,
}

struct Init<'a, T> {
    params: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, rectified: bool) -> Affine {
        let fan = cin * k;
        let w = if rectified {
            he_uniform(&[cout, cin, k], fan, &mut self.rng)
        } else {
            lecun_uniform(&[cout, cin, k], fan, &mut self.rng)
        };
        Affine {
            weight: self.params.push(format!("{name}.kernel"), w),
            bias: self
                .params
                .push(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize, rectified: bool) -> Affine {
        let w = if rectified {
            he_uniform(&[out, inp], inp, &mut self.rng)
        } else {
            lecun_uniform(&[out, inp], inp, &mut self.rng)
        };
        Affine {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self
                .params
                .push(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }
}

impl<T: Scalar> CtaMtdnn<T> {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let b = &cfg.block;
        let width = b.channels / b.scale;
        let front = init.conv(
            "cta.front",
            b.channels,
            cfg.in_channels,
            cfg.front_kernel,
            true,
        );
        let mut blocks = Vec::with_capacity(BLOCKS);
        for (n, &dilation) in b.dilations.iter().enumerate() {
            let prefix = format!("cta.block.{n}");
            let pre = init.conv(&format!("{prefix}.pre"), b.channels, b.channels, 1, true);
            let groups = (1..b.scale)
                .map(|g| {
                    init.conv(
                        &format!("{prefix}.res2net.{g}"),
                        width,
                        width,
                        b.kernel,
                        true,
                    )
                })
                .collect();
            let post = init.conv(&format!("{prefix}.post"), b.channels, b.channels, 1, true);
            let hidden = b.channels / b.se_reduction;
            let se_down = init.dense(&format!("{prefix}.se.down"), hidden, b.channels, true);
            let se_up = init.dense(&format!("{prefix}.se.up"), b.channels, hidden, false);
            blocks.push(BlockSlots {
                pre,
                groups,
                post,
                se_down,
                se_up,
                dilation,
            });
        }
        let fuse = init.conv(
            "cta.fuse",
            cfg.fused_channels,
            BLOCKS * b.channels,
            1,
            false,
        );
        let attn_w = Affine {
            weight: init.params.push(
                "cta.attn.w",
                lecun_uniform(
                    &[cfg.attention.dim, cfg.fused_channels, 1],
                    cfg.fused_channels,
                    &mut init.rng,
                ),
            ),
            bias: init
                .params
                .push("cta.attn.b", Tensor::zeros(&[cfg.attention.dim])),
        };
        let attn_v = Affine {
            weight: init.params.push(
                "cta.attn.v",
                lecun_uniform(
                    &[cfg.fused_channels, cfg.attention.dim, 1],
                    cfg.attention.dim,
                    &mut init.rng,
                ),
            ),
            bias: init
                .params
                .push("cta.attn.k", Tensor::zeros(&[cfg.fused_channels])),
        };
        let head = init.dense("cta.head", cfg.n_subjects, cfg.embedding_dim(), false);
        Ok(Self {
            cfg,
            params,
            slots: Slots {
                front,
                blocks,
                fuse,
                attn_w,
                attn_v,
                head,
            },
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn conv(&self, tape: &Tape<T>, p: &Bound, a: Affine, x: Var, dilation: usize) -> Result<Var> {
        tape.conv1d(
            x,
            p.var(a.weight),
            Some(p.var(a.bias)),
            ConvSpec::same().with_dilation(dilation),
        )
    }

    fn dense(&self, tape: &Tape<T>, p: &Bound, a: Affine, x: Var) -> Result<Var> {
        tape.dense(x, p.var(a.weight), Some(p.var(a.bias)))
    }

    /// Squeeze-and-excitation gate `[B, C]` of block `n` for input `[B, C, T]`.
    pub fn se_gate(&self, tape: &Tape<T>, p: &Bound, n: usize, x: Var) -> Result<Var> {
        let s = &self.slots.blocks[n];
        let squeezed = tape.mean_last(x)?;
        let h = self.dense(tape, p, s.se_down, squeezed)?;
        let h = tape.relu(h)?;
        let g = self.dense(tape, p, s.se_up, h)?;
        tape.sigmoid(g)
    }

    /// One SE-Res2Net block `n`: shape-preserving, with an identity residual.
    pub fn se_res2net_block(&self, tape: &Tape<T>, p: &Bound, n: usize, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let b = &self.cfg.block;
        if shape.len() != 3 || shape[1] != b.channels {
            return Err(Error::dim(format!(
                "SE-Res2Net block expects [B, {}, T], got {shape:?}",
                b.channels
            )));
        }
        let s = &self.slots.blocks[n];
        let h = self.conv(tape, p, s.pre, x, 1)?;
        let h = tape.relu(h)?;

        let width = b.channels / b.scale;
        let mut merged = tape.slice(h, 1, 0, width)?;
        let mut prev: Option<Var> = None;
        for (g, slots) in s.groups.iter().enumerate() {
            let chunk = tape.slice(h, 1, (g + 1) * width, width)?;
            let input = match prev {
                Some(y) => tape.add(chunk, y)?,
                None => chunk,
            };
            let y = self.conv(tape, p, *slots, input, s.dilation)?;
            let y = tape.relu(y)?;
            merged = tape.concat(merged, y, 1)?;
            prev = Some(y);
        }

        let h = self.conv(tape, p, s.post, merged, 1)?;
        let h = tape.relu(h)?;
        let gate = self.se_gate(tape, p, n, h)?;
        let h = tape.scale_channels(h, gate)?;
        tape.add(x, h)
    }

    /// Frame features `[B, C, T]`: concatenated block outputs fused by a 1x1 conv.
    pub fn multi_scale_forward(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "classifier expects [B, {}, T], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let h = self.conv(tape, p, self.slots.front, x, 1)?;
        let mut h = tape.relu(h)?;
        let mut cat: Option<Var> = None;
        for n in 0..BLOCKS {
            h = self.se_res2net_block(tape, p, n, h)?;
            cat = Some(match cat {
                Some(c) => tape.concat(c, h, 1)?,
                None => h,
            });
        }
        self.conv(
            tape,
            p,
            self.slots.fuse,
            cat.expect("at least one block"),
            1,
        )
    }

    /// Attention scores `e[b, c, t] = v_c . act(W h_t + b) + k_c`.
    pub fn attention_scores(&self, tape: &Tape<T>, p: &Bound, frames: Var) -> Result<Var> {
        let proj = self.conv(tape, p, self.slots.attn_w, frames, 1)?;
        let proj = tape.activation(proj, self.cfg.attention.nonlinearity)?;
        self.conv(tape, p, self.slots.attn_v, proj, 1)
    }

    /// `[weighted mean ; weighted std]`, `[B, 2C]`.
    pub fn attentive_stats_pool(&self, tape: &Tape<T>, p: &Bound, frames: Var) -> Result<Var> {
        let scores = self.attention_scores(tape, p, frames)?;
        weighted_stats(tape, frames, scores)
    }

    /// Pre-head subject embedding `[B, 2C]`.
    pub fn embed(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let frames = self.multi_scale_forward(tape, p, x)?;
        self.attentive_stats_pool(tape, p, frames)
    }

    pub fn logits(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let e = self.embed(tape, p, x)?;
        self.dense(tape, p, self.slots.head, e)
    }

    /// Class probabilities `[B, n_subjects]`.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let z = self.logits(&tape, &p, xv)?;
        let z = tape.value(z);
        let k = self.cfg.n_subjects;
        let data = z.data().chunks(k).flat_map(softmax).collect();
        Tensor::from_vec(z.shape().to_vec(), data)
    }

    /// Frozen-extractor embedding; nothing is recorded for the parameters.
    pub fn subject_embedding(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let e = self.embed(&tape, &p, xv)?;
        let out = tape.value(e).clone();
        Ok(out)
    }
}

/// Softmax-over-frames weighted mean and standard deviation.
///
/// `frames` and `scores` are `[B, C, T]`; the result is `[B, 2C]` holding
/// `mu_c = sum_t a_tc h_tc` then `sigma_c = sqrt(max(sum_t a_tc h_tc^2 - mu_c^2, 0))`.
pub fn weighted_stats<T: Scalar>(tape: &Tape<T>, frames: Var, scores: Var) -> Result<Var> {
    let (sf, ss) = (tape.shape(frames), tape.shape(scores));
    if sf.len() != 3 || sf != ss {
        return Err(Error::dim(format!(
            "attentive pooling: frames {sf:?} vs scores {ss:?}"
        )));
    }
    if sf[2] == 0 {
        return Err(Error::dim("attentive pooling needs at least one frame"));
    }
    let alpha = tape.softmax_last(scores)?;
    let weighted = tape.mul(alpha, frames)?;
    let mean = tape.sum_last(weighted)?;
    let sq = tape.square(frames)?;
    let weighted_sq = tape.mul(alpha, sq)?;
    let second = tape.sum_last(weighted_sq)?;
    let mean_sq = tape.square(mean)?;
    let var = tape.sub(second, mean_sq)?;
    let std = tape.sqrt_clamped(var)?;
    tape.concat(mean, std, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 4,
            front_kernel: 3,
            block: SeRes2NetConfig {
                channels: 8,
                scale: 4,
                se_reduction: 2,
                dilations: [1, 2, 3],
                kernel: 3,
            },
            fused_channels: 6,
            attention: AttentionConfig {
                dim: 3,
                nonlinearity: Activation::Tanh,
            },
            n_subjects: 3,
        }
    }

    fn input(b: usize, c: usize, t: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, c, t], |i| ((i * 37 % 23) as f64 - 11.0) / 7.0)
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.block.channels = 10;
        assert!(c.validate().is_err());
        let mut c = small();
        c.attention.dim = 6;
        assert!(c.validate().is_err());
        assert!(ClassifierConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_block_weights_pass_input_through() {
        let mut m = CtaMtdnn::<f64>::new(small(), 1).unwrap();
        for (name, t) in m.params_mut().iter_mut() {
            if name.starts_with("cta.block.0") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let x = tape.constant(input(2, 8, 12));
        let y = m.se_res2net_block(&tape, &p, 0, x).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
    }

    #[test]
    fn closed_se_gate_keeps_only_residual() {
        let mut m = CtaMtdnn::<f64>::new(small(), 2).unwrap();
        let slot = m.params().position("cta.block.1.se.up.bias").unwrap();
        m.params_mut()
            .tensor_mut(slot)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -800.0);
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let x = tape.constant(input(1, 8, 10));
        let y = m.se_res2net_block(&tape, &p, 1, x).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
    }

    #[test]
    fn se_gate_on_constant_input_matches_hand_evaluation() {
        // two-channel toy: C = 2, reduction 2 -> hidden 1
        let cfg = ClassifierConfig {
            in_channels: 2,
            front_kernel: 1,
            block: SeRes2NetConfig {
                channels: 2,
                scale: 2,
                se_reduction: 2,
                dilations: [1, 1, 1],
                kernel: 1,
            },
            fused_channels: 2,
            attention: AttentionConfig {
                dim: 1,
                nonlinearity: Activation::Tanh,
            },
            n_subjects: 2,
        };
        let mut m = CtaMtdnn::<f64>::new(cfg, 0).unwrap();
        let set = |m: &mut CtaMtdnn<f64>, name: &str, v: &[f64]| {
            let s = m.params().position(name).unwrap();
            m.params_mut().tensor_mut(s).data_mut().copy_from_slice(v);
        };
        set(&mut m, "cta.block.0.se.down.weight", &[0.5, -1.5]);
        set(&mut m, "cta.block.0.se.down.bias", &[2.0]);
        set(&mut m, "cta.block.0.se.up.weight", &[0.8, -0.3]);
        set(&mut m, "cta.block.0.se.up.bias", &[0.1, 0.2]);
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let x = tape.constant(
            Tensor::from_vec(vec![1, 2, 4], vec![1.0, 1.0, 1.0, 1.0, 0.4, 0.4, 0.4, 0.4]).unwrap(),
        );
        let g = m.se_gate(&tape, &p, 0, x).unwrap();
        // hidden = relu(0.5*1 - 1.5*0.4 + 2) = 1.9
        let h = 1.9f64;
        let expect = [
            1.0 / (1.0 + (-(0.8 * h + 0.1f64)).exp()),
            1.0 / (1.0 + (-(-0.3 * h + 0.2f64)).exp()),
        ];
        let got = tape.value(g);
        for (a, b) in got.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn multi_scale_shapes_and_zero_weights() {
        let mut m = CtaMtdnn::<f64>::new(small(), 4).unwrap();
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let x = tape.constant(input(2, 4, 16));
        let h = m.multi_scale_forward(&tape, &p, x).unwrap();
        assert_eq!(tape.shape(h), vec![2, 6, 16]);

        for (_, t) in m.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = [0.5, -1.0, 0.0, 2.0, 0.25, -0.75];
        let s = m.params().position("cta.fuse.bias").unwrap();
        m.params_mut()
            .tensor_mut(s)
            .data_mut()
            .copy_from_slice(&bias);
        let tape = Tape::new();
        let p = m.params().bind(&tape, false);
        let x = tape.constant(input(1, 4, 5));
        let h = m.multi_scale_forward(&tape, &p, x).unwrap();
        for (c, row) in tape.value(h).data().chunks(5).enumerate() {
            assert!(row.iter().all(|&v| v == bias[c]));
        }
    }

    #[test]
    fn batch_permutation_is_equivariant() {
        let m = CtaMtdnn::<f64>::new(small(), 5).unwrap();
        let a = input(1, 4, 9);
        let b = a.map(|v| v * 0.5 + 0.1);
        let ab = Tensor::from_vec(vec![2, 4, 9], [a.data(), b.data()].concat()).unwrap();
        let ba = Tensor::from_vec(vec![2, 4, 9], [b.data(), a.data()].concat()).unwrap();
        let ea = m.subject_embedding(&ab).unwrap();
        let eb = m.subject_embedding(&ba).unwrap();
        let d = m.config().embedding_dim();
        assert_eq!(&ea.data()[..d], &eb.data()[d..]);
        assert_eq!(&ea.data()[d..], &eb.data()[..d]);
    }

    #[test]
    fn pooling_special_cases() {
        let tape = Tape::<f64>::new();
        // equal scores -> plain mean / population std
        let h = Tensor::from_vec(
            vec![1, 2, 4],
            vec![1.0, 2.0, 3.0, 6.0, -1.0, -1.0, 0.5, 2.0],
        )
        .unwrap();
        let hv = tape.constant(h.clone());
        let s = tape.constant(Tensor::full(&[1, 2, 4], 0.3));
        let out = tape.value(weighted_stats(&tape, hv, s).unwrap()).clone();
        for (c, row) in h.data().chunks(4).enumerate() {
            let m = row.iter().sum::<f64>() / 4.0;
            let sd = (row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0).sqrt();
            assert!((out.data()[c] - m).abs() < 1e-12);
            assert!((out.data()[2 + c] - sd).abs() < 1e-12);
        }
        // single frame -> sigma 0
        let one = tape.constant(Tensor::from_vec(vec![1, 1, 1], vec![4.0]).unwrap());
        let s1 = tape.constant(Tensor::from_vec(vec![1, 1, 1], vec![-2.0]).unwrap());
        let out = tape.value(weighted_stats(&tape, one, s1).unwrap()).clone();
        assert_eq!(out.data(), &[4.0, 0.0]);
        // extreme scores -> first frame
        let two = tape.constant(Tensor::from_vec(vec![1, 1, 2], vec![3.0, -5.0]).unwrap());
        let s2 = tape.constant(Tensor::from_vec(vec![1, 1, 2], vec![20.0, -20.0]).unwrap());
        let out = tape.value(weighted_stats(&tape, two, s2).unwrap()).clone();
        assert!((out.data()[0] - 3.0).abs() < 1e-15);
        assert!(out.data()[1] < 1e-7);
    }

    #[test]
    fn probabilities_are_distributions() {
        let m = CtaMtdnn::<f64>::new(small(), 6).unwrap();
        let p = m.classify(&input(3, 4, 20)).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = CtaMtdnn::<f64>::new(small(), 6).unwrap();
        for name in ["cta.head.weight", "cta.head.bias"] {
            let s = m.params().position(name).unwrap();
            m.params_mut()
                .tensor_mut(s)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let p = m.classify(&input(2, 4, 8)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn embedding_is_deterministic_with_expected_width() {
        let m = CtaMtdnn::<f64>::new(small(), 7).unwrap();
        let x = input(2, 4, 11);
        let a = m.subject_embedding(&x).unwrap();
        let b = m.subject_embedding(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 12]);
    }
}
