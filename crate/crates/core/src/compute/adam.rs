use serde::{Deserialize, Serialize};

use crate::compute::param::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam hyperparameters. Defaults match the training setup used throughout:
/// learning rate 1e-5, betas (0.9, 0.999), epsilon 1e-8, no weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("adam lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {} must be in [0, 1), got {}", name, b)));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "adam weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient (their moments still decay and `t` advances).
pub fn adam_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    cfg: &AdamConfig,
) -> Result<()> {
    let lr = T::of(cfg.lr);
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let eps = T::of(cfg.eps);
    let wd = T::of(cfg.weight_decay);
    let one = T::one();
    for p in params {
        p.adam_t += 1;
        let t = p.adam_t as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let zero_grad;
        let grad = match &p.grad {
            Some(g) => {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(format!(
                        "gradient {:?} for parameter {} of shape {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
                g.data()
            }
            None => {
                zero_grad = vec![T::zero(); p.value.numel()];
                &zero_grad[..]
            }
        };
        let theta = p.value.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..theta.len() {
            let mut g = grad[i];
            if wd != T::zero() {
                g += wd * theta[i];
            }
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_almost_lr() {
        let mut p = Parameter::new("w", Tensor::<f64>::new(vec![1], vec![0.0]).unwrap());
        p.grad = Some(Tensor::new(vec![1], vec![1.0]).unwrap());
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step([&mut p], &cfg).unwrap();
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(p.adam_t, 1);
    }

    #[test]
    fn zero_gradient_leaves_value_in_place() {
        let mut p = Parameter::new("w", Tensor::<f64>::new(vec![2], vec![1.5, -2.0]).unwrap());
        adam_step([&mut p], &AdamConfig::default()).unwrap();
        assert_eq!(p.value.data(), &[1.5, -2.0]);
        assert_eq!(p.adam_t, 1);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
