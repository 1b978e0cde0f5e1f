//! Self-checks shared by the CLI and the test suites: finite-difference
//! gradient checks of every differentiable op and of the networks, and the
//! MI estimator calibration bench.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classifier::{weighted_stats, ClassifierConfig, CtaMtdnn};
use crate::codec::{CodecConfig, MlaCodec};
use crate::error::Result;
use crate::mi::{FitSchedule, MiConfig, MiEstimator, VarianceMode};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamSet};
use crate::tensor::{finite_difference_check, ConvSpec, GradCheck, Tape, Tensor, Var};

/// Finite-difference step used by the suite.
pub const FD_STEP: f64 = 1e-6;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate gets a
/// distinct upstream gradient.
fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(randn(&tape.shape(y), &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

type OpFn = Box<dyn Fn(&Tape<f64>, Var) -> Result<Var>>;

/// Every tape op, each as a scalar function of one input tensor.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<usize>, OpFn)> {
    let other = randn(&[3, 5], rng);
    let row = randn(&[5], rng);
    let gate = randn(&[2, 3], rng);
    let weight = randn(&[4, 5], rng);
    let bias = randn(&[4], rng);
    let kernel = randn(&[4, 3, 3], rng);
    let kbias = randn(&[4], rng);
    let truth = randn(&[3, 8], rng);
    let frames = randn(&[2, 3, 6], rng);
    let c = |t: &Tensor<f64>| t.clone();

    let (o1, o2, o3, o4) = (c(&other), c(&other), c(&other), c(&other));
    let (k1, k2, k3, kb) = (c(&kernel), c(&kernel), c(&kernel), c(&kbias));
    let (kb2, kb3) = (c(&kbias), c(&kbias));
    vec![
        (
            "add",
            vec![3, 5],
            Box::new(move |t: &Tape<f64>, v| {
                let o = t.constant(o1.clone());
                let y = t.add(v, o)?;
                project(t, y, 1)
            }),
        ),
        (
            "sub",
            vec![3, 5],
            Box::new(move |t: &Tape<f64>, v| {
                let o = t.constant(o2.clone());
                let y = t.sub(o, v)?;
                project(t, y, 2)
            }),
        ),
        (
            "mul",
            vec![3, 5],
            Box::new(move |t: &Tape<f64>, v| {
                let o = t.constant(o3.clone());
                let y = t.mul(v, o)?;
                project(t, y, 3)
            }),
        ),
        (
            "mul_self",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.mul(v, v)?;
                project(t, y, 4)
            }),
        ),
        (
            "add_row",
            vec![3, 5],
            Box::new(move |t: &Tape<f64>, v| {
                let r = t.constant(row.clone());
                let y = t.add_row(v, r)?;
                let y = t.square(y)?;
                project(t, y, 5)
            }),
        ),
        (
            "add_row_bias",
            vec![5],
            Box::new(move |t: &Tape<f64>, v| {
                let o = t.constant(o4.clone());
                let y = t.add_row(o, v)?;
                let y = t.tanh(y)?;
                project(t, y, 6)
            }),
        ),
        (
            "scale",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.scale(v, -1.7)?;
                project(t, y, 7)
            }),
        ),
        (
            "add_scalar",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.add_scalar(v, 0.3)?;
                let y = t.square(y)?;
                project(t, y, 8)
            }),
        ),
        (
            "relu",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.relu(v)?;
                project(t, y, 9)
            }),
        ),
        (
            "tanh",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.tanh(v)?;
                project(t, y, 10)
            }),
        ),
        (
            "sigmoid",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.sigmoid(v)?;
                project(t, y, 11)
            }),
        ),
        (
            "exp",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.exp(v)?;
                project(t, y, 12)
            }),
        ),
        (
            "square",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.square(v)?;
                project(t, y, 13)
            }),
        ),
        (
            "sqrt_clamped",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let s = t.square(v)?;
                let s = t.add_scalar(s, 0.5)?;
                let y = t.sqrt_clamped(s)?;
                project(t, y, 14)
            }),
        ),
        (
            "clamp",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.clamp(v, -0.5, 0.8)?;
                project(t, y, 15)
            }),
        ),
        (
            "sum_all",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.square(v)?;
                t.sum_all(y)
            }),
        ),
        (
            "mean_all",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.tanh(v)?;
                t.mean_all(y)
            }),
        ),
        (
            "sum_last",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.sum_last(v)?;
                let y = t.square(y)?;
                project(t, y, 16)
            }),
        ),
        (
            "mean_last",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.mean_last(v)?;
                let y = t.square(y)?;
                project(t, y, 17)
            }),
        ),
        (
            "softmax_last",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.softmax_last(v)?;
                project(t, y, 18)
            }),
        ),
        (
            "scale_channels",
            vec![2, 3, 4],
            Box::new(move |t: &Tape<f64>, v| {
                let g = t.constant(gate.clone());
                let y = t.scale_channels(v, g)?;
                project(t, y, 19)
            }),
        ),
        (
            "scale_channels_gate",
            vec![2, 3],
            Box::new(move |t: &Tape<f64>, v| {
                let x = t.constant(frames.clone());
                let y = t.scale_channels(x, v)?;
                project(t, y, 20)
            }),
        ),
        (
            "reshape",
            vec![3, 5],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.reshape(v, &[5, 3])?;
                let y = t.softmax_last(y)?;
                project(t, y, 21)
            }),
        ),
        (
            "concat",
            vec![2, 3, 4],
            Box::new(|t: &Tape<f64>, v| {
                let s = t.square(v)?;
                let y = t.concat(v, s, 1)?;
                project(t, y, 22)
            }),
        ),
        (
            "slice",
            vec![2, 3, 4],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.slice(v, 2, 1, 2)?;
                let y = t.square(y)?;
                project(t, y, 23)
            }),
        ),
        (
            "dense",
            vec![3, 5],
            Box::new(move |t: &Tape<f64>, v| {
                let w = t.constant(weight.clone());
                let b = t.constant(bias.clone());
                let y = t.dense(v, w, Some(b))?;
                project(t, y, 24)
            }),
        ),
        (
            "dense_weight",
            vec![4, 5],
            Box::new(move |t: &Tape<f64>, v| {
                let x = t.constant(other.clone());
                let y = t.dense(x, v, None)?;
                let y = t.tanh(y)?;
                project(t, y, 25)
            }),
        ),
        (
            "pearson_loss",
            vec![3, 8],
            Box::new(move |t: &Tape<f64>, v| {
                let r = t.constant(truth.clone());
                t.pearson_loss(r, v)
            }),
        ),
        (
            "cross_entropy",
            vec![4, 5],
            Box::new(|t: &Tape<f64>, v| t.cross_entropy(v, &[0, 3, 4, 1])),
        ),
        (
            "conv1d_same",
            vec![2, 3, 9],
            Box::new(move |t: &Tape<f64>, v| {
                let k = t.constant(k1.clone());
                let b = t.constant(kb.clone());
                let y = t.conv1d(v, k, Some(b), ConvSpec::same())?;
                project(t, y, 26)
            }),
        ),
        (
            "conv1d_dilated",
            vec![2, 3, 9],
            Box::new(move |t: &Tape<f64>, v| {
                let k = t.constant(k2.clone());
                let b = t.constant(kb2.clone());
                let y = t.conv1d(v, k, Some(b), ConvSpec::same().with_dilation(2))?;
                project(t, y, 27)
            }),
        ),
        (
            "conv1d_strided_valid",
            vec![2, 3, 9],
            Box::new(move |t: &Tape<f64>, v| {
                let k = t.constant(k3.clone());
                let b = t.constant(kb3.clone());
                let y = t.conv1d(v, k, Some(b), ConvSpec::valid().with_stride(2))?;
                project(t, y, 28)
            }),
        ),
        (
            "conv1d_kernel",
            vec![4, 3, 3],
            Box::new(move |t: &Tape<f64>, v| {
                let x = t.constant(randn(&[2, 3, 9], &mut ChaCha8Rng::seed_from_u64(99)));
                let y = t.conv1d(x, v, None, ConvSpec::same())?;
                project(t, y, 29)
            }),
        ),
        (
            "maxpool1d",
            vec![2, 3, 8],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.maxpool1d(v, 2)?;
                project(t, y, 30)
            }),
        ),
        (
            "avgpool1d",
            vec![2, 3, 10],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.avgpool1d(v, 5)?;
                project(t, y, 31)
            }),
        ),
        (
            "upsample_nearest",
            vec![2, 3, 4],
            Box::new(|t: &Tape<f64>, v| {
                let y = t.upsample_nearest(v, 2)?;
                project(t, y, 32)
            }),
        ),
        (
            "attentive_stats",
            vec![2, 3, 6],
            Box::new(|t: &Tape<f64>, v| {
                let s = t.scale(v, 0.7)?;
                let s = t.tanh(s)?;
                let y = weighted_stats(t, v, s)?;
                project(t, y, 33)
            }),
        ),
    ]
}

/// Gradient check of every tape op at a random point.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shape, f) in op_cases(&mut rng) {
        let x = randn(&shape, &mut rng);
        out.push((name.to_string(), finite_difference_check(f, &x, FD_STEP)?));
    }
    Ok(out)
}

/// Central differences of `loss` against autodiff on `probes` randomly
/// chosen parameter coordinates, or on all of them when `probes` covers
/// the whole set.
pub fn param_gradcheck<F>(
    params: &ParamSet<f64>,
    loss: F,
    probes: usize,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &Bound) -> Result<Var>,
{
    let eval = |set: &ParamSet<f64>| -> Result<f64> {
        let tape = Tape::new();
        let p = set.bind(&tape, false);
        let l = loss(&tape, &p)?;
        let v = tape.value(l).data()[0];
        Ok(v)
    };
    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let l = loss(&tape, &p)?;
    tape.backward(l)?;
    let grads = p.grads(&tape)?;
    let centre = eval(params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = params.numel();
    let picks: Vec<usize> = if probes >= total {
        (0..total).collect()
    } else {
        (0..probes).map(|_| rng.gen_range(0..total)).collect()
    };
    let mut report = GradCheck::empty(picks.len());
    let mut work = params.clone();
    for global in picks {
        let mut flat = global;
        let mut slot = 0;
        while flat >= work.tensor(slot).len() {
            flat -= work.tensor(slot).len();
            slot += 1;
        }
        let orig = work.tensor(slot).data()[flat];
        work.tensor_mut(slot).data_mut()[flat] = orig + FD_STEP;
        let plus = eval(&work)?;
        work.tensor_mut(slot).data_mut()[flat] = orig - FD_STEP;
        let minus = eval(&work)?;
        work.tensor_mut(slot).data_mut()[flat] = orig;
        report.record(
            global,
            grads[slot].data()[flat],
            minus,
            centre,
            plus,
            FD_STEP,
        );
    }
    Ok(report)
}

/// Small-but-complete network configurations for the checks.
pub fn check_codec_config() -> CodecConfig {
    CodecConfig {
        in_channels: 4,
        channels: [3, 4, 4, 5, 5],
        ..CodecConfig::default()
    }
}

pub fn check_classifier_config() -> ClassifierConfig {
    let mut c = ClassifierConfig::desk().with_subjects(3);
    c.in_channels = 4;
    c.block.channels = 8;
    c.block.scale = 4;
    c.block.se_reduction = 4;
    c.fused_channels = 8;
    c.attention.dim = 6;
    c
}

/// Gradient checks of the codec, classifier and estimator, `probes`
/// parameters each (`usize::MAX` for every parameter), on random inputs.
pub fn network_gradchecks(probes: usize, seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let codec = MlaCodec::<f64>::new(check_codec_config(), seed)?;
    let x = randn(&[2, 4, 64], &mut rng);
    let truth = randn(&[2, 64], &mut rng);
    let r = param_gradcheck(
        codec.params(),
        |t, p| {
            let xv = t.constant(x.clone());
            let tv = t.constant(truth.clone());
            let y = codec.reconstruct(t, p, xv)?;
            t.pearson_loss(tv, y)
        },
        probes,
        seed + 1,
    )?;
    out.push(("codec".to_string(), r));

    let cls = CtaMtdnn::<f64>::new(check_classifier_config(), seed)?;
    let xc = randn(&[3, 4, 16], &mut rng);
    let r = param_gradcheck(
        cls.params(),
        |t, p| {
            let xv = t.constant(xc.clone());
            let z = cls.logits(t, p, xv)?;
            t.cross_entropy(z, &[0, 2, 1])
        },
        probes,
        seed + 2,
    )?;
    out.push(("classifier".to_string(), r));

    for mode in [VarianceMode::Unit, VarianceMode::Learned] {
        let est =
            MiEstimator::<f64>::new(MiConfig::new(6, 3).with_hidden(8).with_variance(mode), seed)?;
        let ze = randn(&[5, 6], &mut rng);
        let zs = randn(&[5, 3], &mut rng);
        let r = param_gradcheck(
            est.params(),
            |t, p| {
                let e = t.constant(ze.clone());
                let fit = est.fit_loss(t, p, e, &zs)?;
                let bound = est.upper_bound(t, p, e, &zs)?;
                let b = t.scale(bound, 0.3)?;
                t.add(fit, b)
            },
            probes,
            seed + 3,
        )?;
        out.push((format!("estimator-{}", mode.name()), r));
    }
    Ok(out)
}

/// The bound's gradient with respect to the envelope summary `z_e`.
pub fn bound_input_gradcheck(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = MiEstimator::<f64>::new(MiConfig::new(6, 3).with_hidden(8), seed)?;
    let ze = randn(&[5, 6], &mut rng);
    let zs = randn(&[5, 3], &mut rng);
    finite_difference_check(|t, v| est.detached_bound(t, v, &zs), &ze, FD_STEP)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiBench {
    pub independent: f64,
    pub correlated: f64,
    pub rho: f64,
    /// `-0.5 ln(1 - rho^2)`.
    pub closed_form: f64,
}

/// Fits a fresh estimator on `n` independent standard-normal pairs and on
/// `n` 1-D Gaussian pairs with correlation `rho`, reporting each bound.
pub fn mi_bench(n: usize, rho: f64, variance: VarianceMode, seed: u64) -> Result<MiBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let a: Vec<f64> = (0..n).map(|_| draw()).collect();
    let b: Vec<f64> = (0..n).map(|_| draw()).collect();
    let c: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| rho * x + (1.0 - rho * rho).sqrt() * y)
        .collect();
    let col = |v: &[f64]| Tensor::from_vec(vec![n, 1], v.to_vec());
    let schedule = FitSchedule {
        steps: 2000,
        batch: 256,
        seed: seed + 1,
    };
    let fit = |ze: &Tensor<f64>, zs: &Tensor<f64>| -> Result<f64> {
        let mut est =
            MiEstimator::<f64>::new(MiConfig::new(1, 1).with_variance(variance), seed + 2)?;
        let mut opt = Adam::new(est.params(), AdamConfig::with_lr(3e-3));
        est.fit(&mut opt, ze, zs, schedule)?;
        est.estimate(ze, zs)
    };
    Ok(MiBench {
        independent: fit(&col(&a)?, &col(&b)?)?,
        correlated: fit(&col(&a)?, &col(&c)?)?,
        rho,
        closed_form: -0.5 * (1.0 - rho * rho).ln(),
    })
}
