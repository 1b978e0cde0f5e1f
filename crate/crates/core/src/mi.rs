//! Variational mutual-information upper bound between an envelope summary
//! `z_e` and a frozen subject embedding `z_s`.
//!
//! A diagonal Gaussian `q(z_s | z_e)` is parameterized by a two-layer
//! perceptron for the mean and, optionally, a second one for the
//! log-variance. The bound is the gap between the matched-pair
//! log-likelihood and its average over all pairs in the batch.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{he_uniform, lecun_uniform, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const LOGVAR_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// `sigma^2 = 1`: no log-variance head.
    Unit,
    /// Per-dimension log-variance predicted from `z_e`, clamped.
    Learned,
}

impl VarianceMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unit" => Some(Self::Unit),
            "learned" => Some(Self::Learned),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Unit => "unit",
            Self::Learned => "learned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub variance: VarianceMode,
}

impl MiConfig {
    pub fn new(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            input_dim,
            embed_dim,
            hidden: 128,
            variance: VarianceMode::Unit,
        }
    }

    pub fn with_variance(mut self, mode: VarianceMode) -> Self {
        self.variance = mode;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    w0: usize,
    b0: usize,
    w1: usize,
    b1: usize,
}

#[derive(Clone, Debug)]
pub struct MiEstimator<T> {
    cfg: MiConfig,
    params: ParamSet<T>,
    mean: Mlp,
    logvar: Option<Mlp>,
}

/// Per-sample log-density of `z_s` under `N(mu, diag exp(logvar))`.
pub fn gaussian_loglik<T: Scalar>(z_s: &[T], mu: &[T], logvar: Option<&[T]>) -> T {
    let mut acc = 0.0;
    for d in 0..z_s.len() {
        let lv = logvar.map_or(0.0, |l| l[d].as_f64().clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT));
        let r = z_s[d].as_f64() - mu[d].as_f64();
        acc += r * r * (-lv).exp() + lv + (2.0 * PI).ln();
    }
    T::lit(-0.5 * acc)
}

impl<T: Scalar> MiEstimator<T> {
    pub fn new(cfg: MiConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config(
                "estimator dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut mlp = |prefix: &str, params: &mut ParamSet<T>| Mlp {
            w0: params.push(
                format!("{prefix}.0.weight"),
                he_uniform(&[cfg.hidden, cfg.input_dim], cfg.input_dim, &mut rng),
            ),
            b0: params.push(format!("{prefix}.0.bias"), Tensor::zeros(&[cfg.hidden])),
            w1: params.push(
                format!("{prefix}.1.weight"),
                lecun_uniform(&[cfg.embed_dim, cfg.hidden], cfg.hidden, &mut rng),
            ),
            b1: params.push(format!("{prefix}.1.bias"), Tensor::zeros(&[cfg.embed_dim])),
        };
        let mean = mlp("mi.mean", &mut params);
        let logvar = match cfg.variance {
            VarianceMode::Unit => None,
            VarianceMode::Learned => Some(mlp("mi.logvar", &mut params)),
        };
        Ok(Self {
            cfg,
            params,
            mean,
            logvar,
        })
    }

    pub fn config(&self) -> &MiConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn mlp(&self, tape: &Tape<T>, p: &Bound, m: Mlp, x: Var) -> Result<Var> {
        let h = tape.dense(x, p.var(m.w0), Some(p.var(m.b0)))?;
        let h = tape.relu(h)?;
        tape.dense(h, p.var(m.w1), Some(p.var(m.b1)))
    }

    /// Mean `[n, D_s]` and clamped log-variance (absent in unit mode).
    pub fn heads(&self, tape: &Tape<T>, p: &Bound, z_e: Var) -> Result<(Var, Option<Var>)> {
        let s = tape.shape(z_e);
        if s.len() != 2 || s[1] != self.cfg.input_dim {
            return Err(Error::dim(format!(
                "estimator expects [n, {}], got {s:?}",
                self.cfg.input_dim
            )));
        }
        let mu = self.mlp(tape, p, self.mean, z_e)?;
        let logvar = match self.logvar {
            Some(m) => {
                let raw = self.mlp(tape, p, m, z_e)?;
                let lim = T::lit(LOGVAR_LIMIT);
                Some(tape.clamp(raw, -lim, lim)?)
            }
            None => None,
        };
        Ok((mu, logvar))
    }

    fn check_pairs(&self, tape: &Tape<T>, z_e: Var, z_s: &Tensor<T>, min: usize) -> Result<usize> {
        let n = tape.shape(z_e).first().copied().unwrap_or(0);
        if z_s.shape() != [n, self.cfg.embed_dim] {
            return Err(Error::dim(format!(
                "subject embeddings {:?} do not pair with {n} envelope summaries of width {}",
                z_s.shape(),
                self.cfg.embed_dim
            )));
        }
        if n < min {
            return Err(Error::InsufficientData(format!(
                "estimator batch needs at least {min} pairs, got {n}"
            )));
        }
        Ok(n)
    }

    /// `-(1/n) sum_i log q(z_s^i | z_e^i)`.
    pub fn fit_loss(&self, tape: &Tape<T>, p: &Bound, z_e: Var, z_s: &Tensor<T>) -> Result<Var> {
        let n = self.check_pairs(tape, z_e, z_s, 1)?;
        let (mu, logvar) = self.heads(tape, p, z_e)?;
        let zs = tape.constant(z_s.clone());
        let r = tape.sub(zs, mu)?;
        let r2 = tape.square(r)?;
        let quad = match logvar {
            Some(lv) => {
                let neg = tape.scale(lv, -T::one())?;
                let inv = tape.exp(neg)?;
                let q = tape.mul(r2, inv)?;
                tape.add(q, lv)?
            }
            None => r2,
        };
        let total = tape.sum_all(quad)?;
        let per = tape.scale(total, T::lit(0.5 / n as f64))?;
        let d = self.cfg.embed_dim as f64;
        tape.add_scalar(per, T::lit(0.5 * d * (2.0 * PI).ln()))
    }

    /// Contrastive log-ratio bound
    /// `(1/n) sum_i log q(z_s^i|z_e^i) - (1/n^2) sum_{i,j} log q(z_s^j|z_e^i)`.
    ///
    /// The all-pairs term uses `mean_j (z_j - mu_i)^2 = (zbar - mu_i)^2 + var(z)`,
    /// so the cost is linear in `n`.
    pub fn upper_bound(&self, tape: &Tape<T>, p: &Bound, z_e: Var, z_s: &Tensor<T>) -> Result<Var> {
        let n = self.check_pairs(tape, z_e, z_s, 2)?;
        let d = self.cfg.embed_dim;
        let (mu, logvar) = self.heads(tape, p, z_e)?;

        let mut mean = vec![0.0; d];
        for row in z_s.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64() / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for row in z_s.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let r = v.as_f64() - m;
                *s += r * r / n as f64;
            }
        }
        let tile = |v: &[f64]| Tensor::from_fn(&[n, d], |i| T::lit(v[i % d]));
        let zbar = tape.constant(tile(&mean));
        let spread = tape.constant(tile(&var));
        let zs = tape.constant(z_s.clone());

        let off = tape.sub(zbar, mu)?;
        let off = tape.square(off)?;
        let marginal = tape.add(off, spread)?;
        let on = tape.sub(zs, mu)?;
        let on = tape.square(on)?;
        let gap = tape.sub(marginal, on)?;
        let gap = match logvar {
            Some(lv) => {
                let neg = tape.scale(lv, -T::one())?;
                let inv = tape.exp(neg)?;
                tape.mul(gap, inv)?
            }
            None => gap,
        };
        let total = tape.sum_all(gap)?;
        tape.scale(total, T::lit(0.5 / n as f64))
    }

    /// Bound with the estimator held fixed: recorded as constants so that
    /// only `z_e` (and what produced it) receives gradient.
    pub fn detached_bound(&self, tape: &Tape<T>, z_e: Var, z_s: &Tensor<T>) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.upper_bound(tape, &p, z_e, z_s)
    }

    /// Plain evaluation of the bound.
    pub fn estimate(&self, z_e: &Tensor<T>, z_s: &Tensor<T>) -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(z_e.clone());
        let v = self.detached_bound(&tape, x, z_s)?;
        let out = tape.value(v).data()[0];
        Ok(out.as_f64())
    }

    /// Unreduced means and log-variances, for inspection.
    pub fn predict(&self, z_e: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(z_e.clone());
        let (mu, lv) = self.heads(&tape, &p, x)?;
        let mu_t = tape.value(mu).clone();
        let lv_t = lv.map(|v| tape.value(v).clone());
        Ok((mu_t, lv_t))
    }
}

/// Minibatch schedule for fitting the estimator on a fixed set of pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitSchedule {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl<T: Scalar> MiEstimator<T> {
    /// One likelihood step on the given pairs; returns the pre-step loss.
    pub fn fit_step(&mut self, opt: &mut Adam<T>, z_e: &Tensor<T>, z_s: &Tensor<T>) -> Result<f64> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, true);
        let x = tape.constant(z_e.clone());
        let loss = self.fit_loss(&tape, &p, x, z_s)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("estimator fit loss is {value}")));
        }
        tape.backward(loss)?;
        let grads = p.grads(&tape)?;
        opt.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Repeated [`MiEstimator::fit_step`] on uniformly drawn minibatches.
    /// Returns the loss trace.
    pub fn fit(
        &mut self,
        opt: &mut Adam<T>,
        z_e: &Tensor<T>,
        z_s: &Tensor<T>,
        schedule: FitSchedule,
    ) -> Result<Vec<f64>> {
        let n = z_e.shape().first().copied().unwrap_or(0);
        if n == 0 || z_s.shape().first() != Some(&n) {
            return Err(Error::InsufficientData("no estimator pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let b = schedule.batch.min(n).max(1);
        let mut trace = Vec::with_capacity(schedule.steps);
        for _ in 0..schedule.steps {
            let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
            let xe = gather_rows(z_e, &idx);
            let xs = gather_rows(z_s, &idx);
            trace.push(self.fit_step(opt, &xe, &xs)?);
        }
        Ok(trace)
    }
}

/// Rows `idx` of a rank-2 or higher tensor, stacked along the first axis.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let row: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(shape, data).expect("row gather keeps extents")
}

/// Reconstructor objective `l_corr + lambda * max(0, l_var)`.
pub fn total_loss<T: Scalar>(tape: &Tape<T>, l_corr: Var, l_var: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok(l_corr);
    }
    let clipped = tape.clamp(l_var, T::zero(), T::infinity())?;
    let penalty = tape.scale(clipped, T::lit(lambda))?;
    tape.add(l_corr, penalty)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_corr: f64, l_var: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(l_corr + lambda * l_var.max(0.0))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!(
            "penalty weight must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}
