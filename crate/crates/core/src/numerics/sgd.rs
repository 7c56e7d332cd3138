use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Heavy-ball update: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut Matrix,
    grads: &Matrix,
    velocity: &mut Matrix,
    cfg: &SgdConfig,
) -> Result<()> {
    params.ensure_same_shape(grads, "sgd_step")?;
    params.ensure_same_shape(velocity, "sgd_step")?;
    for ((p, &g), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(velocity.data_mut())
    {
        *v = cfg.momentum * *v + g;
        *p -= cfg.learning_rate * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum,
            steps: 1,
        }
    }

    #[test]
    fn plain_step() {
        let mut p = Matrix::row_vector(&[1.0]);
        let mut v = Matrix::zeros(1, 1);
        sgd_step(&mut p, &Matrix::row_vector(&[1.0]), &mut v, &cfg(0.1, 0.0)).unwrap();
        assert!((p.get(0, 0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Matrix::row_vector(&[0.0]);
        let mut v = Matrix::zeros(1, 1);
        let g = Matrix::row_vector(&[1.0]);
        sgd_step(&mut p, &g, &mut v, &cfg(0.1, 0.9)).unwrap();
        assert_eq!(v.get(0, 0), 1.0);
        sgd_step(&mut p, &g, &mut v, &cfg(0.1, 0.9)).unwrap();
        assert!((v.get(0, 0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = Matrix::row_vector(&[0.3, -2.0]);
        let before = p.clone();
        let mut v = Matrix::zeros(1, 2);
        sgd_step(&mut p, &Matrix::zeros(1, 2), &mut v, &cfg(0.5, 0.5)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_and_bad_config() {
        let mut p = Matrix::zeros(1, 2);
        let mut v = Matrix::zeros(1, 2);
        assert!(sgd_step(&mut p, &Matrix::zeros(2, 1), &mut v, &cfg(0.1, 0.0)).is_err());
        assert!(cfg(0.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 1.0).validate().is_err());
        assert!(cfg(0.1, 0.9).validate().is_ok());
    }
}
