//! Adam with optional global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn clipped(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Optimizer state: step counter and first/second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. Returns the pre-clip gradient norm.
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Parameter(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let mut sq = 0.0;
        for (slot, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(slot).shape() {
                return Err(Error::dim(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    params.name(slot),
                    g.shape(),
                    params.tensor(slot).shape()
                )));
            }
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at flat index {bad} is {}",
                    params.name(slot),
                    g.data()[bad]
                )));
            }
            sq += g
                .data()
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = T::lit(1.0 - b1.powi(t));
        let c2 = T::lit(1.0 - b2.powi(t));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let (one, lr, eps, scale) = (
            T::one(),
            T::lit(self.cfg.lr),
            T::lit(self.cfg.eps),
            T::lit(scale),
        );
        for (slot, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(slot).data_mut();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * scale;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = one_param(&[1.0, -2.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p.tensor(0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one_param(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.01));
        let g = Tensor::from_vec(vec![3], vec![3.0, -0.2, 1e-3]).unwrap();
        opt.step(&mut p, &[g.clone()]).unwrap();
        for (x, gi) in p.tensor(0).data().iter().zip(g.data()) {
            let expect = -0.01 * gi.signum() * gi.abs() / (gi.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [1.5, -0.5, 3.0];
        let mut p = one_param(&[0.0; 3]);
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.01));
        for _ in 0..2000 {
            let g: Vec<f64> = p
                .tensor(0)
                .data()
                .iter()
                .zip(target)
                .map(|(x, t)| 2.0 * (x - t))
                .collect();
            opt.step(&mut p, &[Tensor::from_vec(vec![3], g).unwrap()])
                .unwrap();
        }
        for (x, t) in p.tensor(0).data().iter().zip(target) {
            assert!((x - t).abs() < 1e-6, "{x} vs {t}");
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one_param(&[0.0, 0.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        let g = Tensor::from_vec(vec![2], vec![0.1, f64::NAN]).unwrap();
        let err = opt.step(&mut p, &[g]).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.tensor(0).data(), &[0.0, 0.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let mut p = one_param(&[0.0, 0.0]);
        let mut opt = Adam::new(&p, AdamConfig::default().clipped(1.0));
        let norm = opt
            .step(
                &mut p,
                &[Tensor::from_vec(vec![2], vec![30.0, 40.0]).unwrap()],
            )
            .unwrap();
        assert_eq!(norm, 50.0);
        assert!((opt.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-15);
    }
}
