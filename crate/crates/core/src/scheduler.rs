//! Latent update `x_{t-1} = S(eps_t, x_t, t)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Scheduler: Send + Sync {
    fn total_steps(&self) -> usize;

    /// One update from level `t` to `t - 1`.
    fn step(&self, x_t: &Tensor, eps_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// `x_{t-1} = x_t - (1/T) * eps_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerScheduler {
    steps: usize,
}

impl EulerScheduler {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Scheduler("at least one step required".into()));
        }
        Ok(Self { steps })
    }
}

impl Scheduler for EulerScheduler {
    fn total_steps(&self) -> usize {
        self.steps
    }

    fn step(&self, x_t: &Tensor, eps_t: &Tensor, t: usize) -> Result<Tensor> {
        scheduler_step(x_t, eps_t, t, self.steps)
    }
}

pub fn scheduler_step(x_t: &Tensor, eps_t: &Tensor, t: usize, steps: usize) -> Result<Tensor> {
    if t == 0 || t > steps {
        return Err(Error::Scheduler(format!("level {t} outside 1..={steps}")));
    }
    if x_t.shape() != eps_t.shape() {
        return Err(Error::dim(format!("latent {:?} vs prediction {:?}", x_t.shape(), eps_t.shape())));
    }
    let dt = 1.0 / steps as f64;
    x_t.sub(&eps_t.scale(dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn random(n: usize, seed: u64) -> Tensor {
        Tensor::new(vec![n], RandomSource::new(seed).normals(n)).unwrap()
    }

    #[test]
    fn zero_prediction_is_identity() {
        let x = random(16, 1);
        let y = scheduler_step(&x, &Tensor::zeros(vec![16]), 5, 50).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_prediction_telescopes_to_zero() {
        let eps = random(16, 2);
        let s = EulerScheduler::new(50).unwrap();
        let mut x = eps.clone();
        for t in (1..=50).rev() {
            x = s.step(&x, &eps, t).unwrap();
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn closed_form_at_fifty_steps() {
        let x = random(32, 3);
        let eps = random(32, 4);
        let y = scheduler_step(&x, &eps, 17, 50).unwrap();
        for i in 0..32 {
            assert_eq!(y.data()[i], x.data()[i] - 0.02 * eps.data()[i]);
        }
    }

    #[test]
    fn level_range_enforced() {
        let x = random(4, 1);
        assert!(matches!(scheduler_step(&x, &x, 0, 8), Err(Error::Scheduler(_))));
        assert!(matches!(scheduler_step(&x, &x, 9, 8), Err(Error::Scheduler(_))));
        assert!(EulerScheduler::new(0).is_err());
    }
}
