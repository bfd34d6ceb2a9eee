//! Adam with decoupled weight decay over several parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

/// Learning rate and decoupled weight decay of one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRate {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamConfig, group_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores saved state; shapes must match the current groups.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        ensure_len("optimizer groups", self.first.len(), first.len())?;
        ensure_len("optimizer groups", self.second.len(), second.len())?;
        for (a, b) in self.first.iter().zip(&first).chain(self.second.iter().zip(&second)) {
            ensure_len("optimizer moment", a.len(), b.len())?;
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update of every group.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], rates: &[GroupRate]) -> Result<()> {
        let n = self.first.len();
        if params.len() != n || grads.len() != n || rates.len() != n {
            return Err(Error::invalid(
                "optimizer step",
                format!("expected {n} groups, got {}/{}/{}", params.len(), grads.len(), rates.len()),
            ));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for g in 0..n {
            ensure_len("parameter group", self.first[g].len(), params[g].len())?;
            ensure_len("gradient group", self.first[g].len(), grads[g].len())?;
            let GroupRate { lr, weight_decay } = rates[g];
            let (m, v) = (&mut self.first[g], &mut self.second[g]);
            for (((p, &gr), m), v) in params[g].iter_mut().zip(grads[g]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * gr;
                *v = beta2 * *v + (1.0 - beta2) * gr * gr;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            }
        }
        Ok(())
    }
}
