use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Trainable;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl AdamConfig {
    pub fn with_lr(lr: Real) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed set of named parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    names: Vec<String>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl Adam {
    /// Tracks every parameter of `store` selected by `trainable`.
    pub fn new(cfg: AdamConfig, store: &ParamStore, trainable: &Trainable) -> Self {
        let names: Vec<String> = store
            .names()
            .filter(|n| trainable.matches(n))
            .map(str::to_string)
            .collect();
        let zeros = |n: &String| (n.clone(), Tensor::zeros(store.value(n).unwrap().shape()));
        Self {
            cfg,
            first: names.iter().map(zeros).collect(),
            second: names.iter().map(zeros).collect(),
            names,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Applies one update from the stored gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for name in &self.names {
            let p = store
                .param(name)
                .ok_or_else(|| Error::Contract(format!("parameter {name} vanished from the store")))?;
            match &p.grad {
                None => return Err(Error::Contract(format!("missing gradient for parameter {name}"))),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::Contract(format!(
                        "gradient shape {:?} does not match parameter {name} {:?}",
                        g.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for name in &self.names {
            let p = store.param_mut(name).expect("checked above");
            let grad = p.grad.as_mut().expect("checked above");
            let m = self.first.get_mut(name).expect("moment per parameter");
            let v = self.second.get_mut(name).expect("moment per parameter");
            let gs = grad.data_mut();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(gs.iter_mut())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * *g;
                *v = beta2 * *v + (1.0 - beta2) * *g * *g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}
