use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. A missing gradient counts as zero. Nothing is modified
    /// when any gradient is non-finite or shapes disagree.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Option<&Tensor>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidShape {
                op: "adam",
                detail: format!(
                    "optimizer tracks {} tensors, got {} parameters and {} gradients",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: vec![self.m[i].len()],
                    rhs: p.shape().to_vec(),
                });
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "adam",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if let Some(index) = g.data().iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "adam", index });
                }
            }
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `lr0 · γ^⌊epoch / step_size⌋` with 0-based epochs.
pub fn step_lr(lr0: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    lr0 * gamma.powi((epoch / step_size.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        let zero = Tensor::zeros(vec![2]);
        for _ in 0..3 {
            adam.step(vec![&mut p], &[Some(&zero)], 0.1).unwrap();
            adam.step(vec![&mut p], &[None], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![0.5]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        let g = Tensor::vector(vec![1.0]).unwrap();
        adam.step(vec![&mut p], &[Some(&g)], 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = −lr · 1 / (1 + ε)
        assert_relative_eq!(p.data()[0], 0.5 - 1e-3 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn matches_reference_recurrence() {
        let grads = [0.3, -1.2, 0.7, 2.5, -0.1];
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        for g in grads {
            let g = Tensor::vector(vec![g]).unwrap();
            adam.step(vec![&mut p], &[Some(&g)], lr).unwrap();
        }
        assert_relative_eq!(p.data()[0], x, epsilon = 1e-15);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap();
            let mut adam = Adam::new(AdamConfig::default(), [&p]);
            for k in 0..20 {
                let g = Tensor::vector(vec![(k as f64).sin(), 0.5, -(k as f64) / 7.0]).unwrap();
                adam.step(vec![&mut p], &[Some(&g)], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut a = Tensor::vector(vec![1.0]).unwrap();
        let mut b = Tensor::vector(vec![2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), [&a, &b]);
        let ok = Tensor::vector(vec![1.0]).unwrap();
        let bad = Tensor::vector(vec![f64::NAN]).unwrap();
        let err = adam.step(vec![&mut a, &mut b], &[Some(&ok), Some(&bad)], 0.1);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!((a.data()[0], b.data()[0], adam.steps()), (1.0, 2.0, 0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), [&a]);
        let g = Tensor::vector(vec![1.0]).unwrap();
        assert!(adam.step(vec![&mut a], &[Some(&g)], 0.1).is_err());
        assert!(adam.step(vec![], &[], 0.1).is_err());
    }

    #[test]
    fn step_schedule() {
        let lr0 = 1e-4;
        for epoch in 0..4 {
            assert_eq!(step_lr(lr0, epoch, 4, 0.1), lr0);
        }
        assert_relative_eq!(step_lr(lr0, 4, 4, 0.1), 1e-5, max_relative = 1e-12);
        assert_relative_eq!(step_lr(lr0, 8, 4, 0.1), 1e-6, max_relative = 1e-12);
        assert_eq!(step_lr(lr0, 37, 4, 1.0), lr0);
        let mut last = f64::INFINITY;
        for epoch in 0..50 {
            let lr = step_lr(lr0, epoch, 3, 0.5);
            assert!(lr <= last);
            last = lr;
        }
    }
}
