use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Rmse,
    Huber,
}

/// Regression loss, always averaged over elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::huber(1.0)
    }
}

impl LossConfig {
    pub fn mse() -> Self {
        LossConfig { kind: LossKind::Mse, delta: default_delta() }
    }

    pub fn rmse() -> Self {
        LossConfig { kind: LossKind::Rmse, delta: default_delta() }
    }

    pub fn huber(delta: f64) -> Self {
        LossConfig { kind: LossKind::Huber, delta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::Huber && !(self.delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "huber delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    fn check(&self, pred: &[f64], target: &[f64]) -> Result<()> {
        self.validate()?;
        if pred.is_empty() {
            return Err(Error::InvalidArgument("loss of empty tensors".into()));
        }
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "loss: prediction has {} values, target {}",
                pred.len(),
                target.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, pred: &[f64], target: &[f64]) -> Result<f64> {
        self.check(pred, target)?;
        let n = pred.len() as f64;
        Ok(match self.kind {
            LossKind::Mse => mse(pred, target),
            LossKind::Rmse => mse(pred, target).sqrt(),
            LossKind::Huber => {
                pred.iter()
                    .zip(target)
                    .map(|(p, t)| huber(t - p, self.delta))
                    .sum::<f64>()
                    / n
            }
        })
    }

    /// Derivative of the loss with respect to `pred`.
    pub fn grad(&self, pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        self.check(pred, target)?;
        let n = pred.len() as f64;
        Ok(match self.kind {
            LossKind::Mse => pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect(),
            LossKind::Rmse => {
                let root = mse(pred, target).sqrt();
                if root == 0.0 {
                    vec![0.0; pred.len()]
                } else {
                    pred.iter().zip(target).map(|(p, t)| (p - t) / (n * root)).collect()
                }
            }
            LossKind::Huber => pred
                .iter()
                .zip(target)
                .map(|(p, t)| {
                    let r = t - p;
                    let dr = if r.abs() <= self.delta { r } else { self.delta * r.signum() };
                    -dr / n
                })
                .collect(),
        })
    }
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Huber penalty of a single residual.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_residual_is_zero_loss() {
        let x = [0.3, -1.0, 2.5];
        for cfg in [LossConfig::mse(), LossConfig::rmse(), LossConfig::huber(1.0)] {
            assert_eq!(cfg.value(&x, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn huber_branches() {
        let cfg = LossConfig::huber(1.0);
        assert!((cfg.value(&[0.0], &[0.5]).unwrap() - 0.125).abs() <= 1e-12);
        assert!((cfg.value(&[0.0], &[2.0]).unwrap() - 1.5).abs() <= 1e-12);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(LossConfig::mse().value(&[], &[]).is_err());
        assert!(LossConfig::mse().value(&[1.0], &[1.0, 2.0]).is_err());
        assert!(LossConfig::huber(0.0).value(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn huber_bounded_by_half_square(r in -50.0f64..50.0, delta in 0.01f64..10.0) {
            let h = huber(r, delta);
            let q = 0.5 * r * r;
            prop_assert!(h <= q + 1e-12);
            if r.abs() <= delta {
                prop_assert_eq!(h, q);
            } else {
                prop_assert!(h < q);
            }
        }

        #[test]
        fn huber_continuous_at_delta(delta in 0.01f64..10.0) {
            let eps = 1e-9;
            let left = huber(delta - eps, delta);
            let right = huber(delta + eps, delta);
            prop_assert!((left - right).abs() < 1e-7 * (1.0 + delta));
            // one-sided slopes agree
            let dl = (huber(delta, delta) - huber(delta - 1e-6, delta)) / 1e-6;
            let dr = (huber(delta + 1e-6, delta) - huber(delta, delta)) / 1e-6;
            prop_assert!((dl - dr).abs() < 1e-5);
        }

        #[test]
        fn rmse_squared_is_mse_and_symmetric(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = LossConfig::mse().value(&p, &t).unwrap();
            let r = LossConfig::rmse().value(&p, &t).unwrap();
            prop_assert!((r * r - m).abs() <= 1e-12 * (1.0 + m));
            prop_assert_eq!(m, LossConfig::mse().value(&t, &p).unwrap());
            prop_assert_eq!(r, LossConfig::rmse().value(&t, &p).unwrap());
        }
    }
}
