//! Deterministic mini-batch training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vit_tad_tensor::{Graph, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::model::VitTad;
use crate::optim::{clip_grad_norm, Optimizer, OptimizerConfig};
use crate::rng::named_rng;
use crate::synth::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Linear warm-up length; the rate then decays along a half cosine when `cosine` is set.
    pub warmup_steps: usize,
    pub cosine: bool,
    pub grad_clip: Option<f64>,
    /// Circularly shift each drawn clip by a random spatial offset.
    pub roll_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            steps: 100,
            batch_size: 1,
            warmup_steps: 0,
            cosine: false,
            grad_clip: None,
            roll_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier of the base learning rate at `step` (0-based).
    pub fn lr_scale(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine {
            return 1.0;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let x = (step - self.warmup_steps) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean total loss of the batch before the update.
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub grad_norm: f64,
}

/// Mean loss and gradients of a batch. Per-clip gradients are accumulated in
/// batch order.
pub fn batch_gradients(model: &VitTad, store: &ParamStore, batch: &[&Sample]) -> Result<(StepRecord, Vec<Tensor>)> {
    let mut acc: Option<Vec<Tensor>> = None;
    let (mut loss, mut cls, mut reg) = (0.0, 0.0, 0.0);
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let g = Graph::new();
        let p = store.bind(&g);
        let terms = model.loss(&g, s, &p)?;
        loss += terms.total.value().item() * scale;
        cls += terms.cls * scale;
        reg += terms.reg * scale;
        let grads = p.grads(&g.backward(terms.total)?);
        match acc.as_mut() {
            None => acc = Some(grads.into_iter().map(|t| t.map(|v| v * scale)).collect()),
            Some(a) => {
                for (a, g) in a.iter_mut().zip(grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y * scale;
                    }
                }
            }
        }
    }
    let grads = acc.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok((
        StepRecord {
            step: 0,
            loss,
            cls,
            reg,
            grad_norm: 0.0,
        },
        grads,
    ))
}

/// Runs `cfg.steps` updates. Batches are drawn from a fresh shuffle of
/// `samples` each epoch, seeded by `seed`. `on_step` sees every record.
pub fn train(
    model: &VitTad,
    store: &mut ParamStore,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut rng = named_rng(seed, "shuffle");
    let mut aug_rng = named_rng(seed, "augment");
    let mut opt = Optimizer::new(cfg.optimizer, store);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let s = &samples[order.pop().expect("refilled")];
            batch.push(if cfg.roll_augment {
                let (dy, dx) = (aug_rng.random_range(0..s.clip.height), aug_rng.random_range(0..s.clip.width));
                std::borrow::Cow::Owned(Sample {
                    clip: s.clip.roll_spatial(dy, dx),
                    ..s.clone()
                })
            } else {
                std::borrow::Cow::Borrowed(s)
            });
        }
        let batch: Vec<&Sample> = batch.iter().map(|c| c.as_ref()).collect();
        let (mut rec, mut grads) = batch_gradients(model, store, &batch).map_err(|e| diverged(step, e))?;
        rec.step = step;
        rec.grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => clip_grad_norm(&mut grads, f64::INFINITY),
        };
        if !rec.loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at step {step}")));
        }
        opt.step(store, &grads, cfg.lr_scale(step))?;
        if store.iter().any(|p| !p.tensor.is_finite()) {
            return Err(Error::Training(format!("parameters became non-finite at step {step}")));
        }
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(t) => Error::Training(format!("step {step}: {t}")),
        other => other,
    }
}

/// `step,loss,cls,reg,grad_norm` with one row per record.
pub fn loss_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,cls,reg,grad_norm\n");
    for r in records {
        out.push_str(&format!("{},{:.9},{:.9},{:.9},{:.9}\n", r.step, r.loss, r.cls, r.reg, r.grad_norm));
    }
    out
}
