//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};
use vit_tad_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Sgd {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adamw { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sgd { lr, momentum, weight_decay } => {
                lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0
            }
            Self::Adamw { lr, beta1, beta2, eps, weight_decay } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: one or two moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect::<Vec<_>>();
        let second = match cfg {
            OptimizerConfig::Sgd { .. } => Vec::new(),
            OptimizerConfig::Adamw { .. } => zeros(),
        };
        Self {
            cfg,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    /// Applies one update with learning rate `lr_scale · lr`. `grads` holds
    /// one tensor per parameter, in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr_scale: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.steps += 1;
        let ids: Vec<_> = store.ids().collect();
        for (i, (id, g)) in ids.into_iter().zip(grads).enumerate() {
            let w = store.tensor_mut(id).data_mut();
            let m = &mut self.first[i];
            match self.cfg {
                OptimizerConfig::Sgd { lr, momentum, weight_decay } => {
                    let lr = lr * lr_scale;
                    for ((w, m), g) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *m = momentum * *m + g + weight_decay * *w;
                        *w -= lr * *m;
                    }
                }
                OptimizerConfig::Adamw { lr, beta1, beta2, eps, weight_decay } => {
                    let lr = lr * lr_scale;
                    let v = &mut self.second[i];
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((w, m), v), g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + weight_decay * *w);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
