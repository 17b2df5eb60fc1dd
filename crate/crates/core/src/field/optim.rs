use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments, one moment buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || params.iter().zip(grads).zip(&self.m).any(|((p, g), m)| p.len() != m.len() || g.len() != m.len())
        {
            return Err(Error::invalid("optimizer state does not match parameter shapes"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                if update != 0.0 {
                    p[i] = T::from_f64(p[i].to_f64() - update);
                }
            }
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate after `patience` consecutive
/// epochs without a relative validation improvement of more than `1e-6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !(factor > 0.0 && factor < 1.0) || min_lr < 0.0 {
            return Err(Error::invalid("scheduler needs lr > 0, 0 < factor < 1, min_lr >= 0"));
        }
        Ok(PlateauScheduler {
            lr,
            factor,
            patience,
            min_lr,
            threshold: 1e-6,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// Record one epoch's validation loss and return the learning rate for
    /// the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - self.threshold) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
