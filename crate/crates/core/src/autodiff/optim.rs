//! Parameter storage and first-order optimizers.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named, ordered collection of parameters. Each entry is either trainable or
/// frozen; frozen entries are never touched by an optimizer step.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!(
                "parameter {name} registered twice"
            )));
        }
        let id = ParamId(self.entries.len());
        let tensor = tensor.with_requires_grad(trainable);
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    /// Direct mutable access, bypassing the freeze contract. Only for
    /// construction-time initialisation and checkpoint loading.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let e = &mut self.entries[id.0];
        e.trainable = trainable;
        e.tensor =
            std::mem::replace(&mut e.tensor, Tensor::scalar(0.0)).with_requires_grad(trainable);
        if !trainable {
            e.tensor.clear_grad();
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_trainable(id)).collect()
    }

    /// Scalar count of trainable values.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Adds `scale * grads` into every trainable parameter's gradient buffer.
    ///
    /// Trainable parameters that did not take part in the recorded graph get a
    /// zero gradient, so after any backward pass every trainable entry holds a
    /// populated buffer.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (i, e) in self.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            match grads.param(ParamId(i)) {
                Some(g) if scale == 1.0 => e.tensor.accumulate_grad(g)?,
                Some(g) => {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    e.tensor.accumulate_grad(&scaled)?
                }
                None => {
                    if e.tensor.grad().is_none() {
                        let zeros = vec![0.0; e.tensor.numel()];
                        e.tensor.accumulate_grad(&zeros)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

/// Linear warmup followed by cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn cosine(base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {base_lr}"
            )));
        }
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1), got {warmup_ratio}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_ratio,
            total_steps,
            kind: ScheduleKind::Cosine,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    pub fn lr(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            return self.base_lr * step as f64 / warmup as f64;
        }
        let span = self.total_steps.saturating_sub(warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        match self.kind {
            ScheduleKind::Cosine => self.base_lr * 0.5 * (1.0 + (PI * progress).cos()),
        }
    }
}

/// `p <- p - lr(step) * grad(p)` for every trainable parameter, then clears
/// all gradients. Frozen parameters are never written.
pub fn sgd_step(registry: &mut ParamRegistry, schedule: &LrSchedule, step: usize) -> Result<()> {
    let lr = schedule.lr(step);
    for e in &registry.entries {
        if e.trainable && e.tensor.grad().is_none() {
            return Err(Error::Contract(format!(
                "trainable parameter {} has no gradient",
                e.name
            )));
        }
    }
    for e in registry.entries.iter_mut().filter(|e| e.trainable) {
        let grad = e.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
        for (p, g) in e.tensor.data_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    registry.zero_grad();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Stateful optimizer wrapper: plain SGD delegates to [`sgd_step`]; Adam keeps
/// per-parameter moment buffers keyed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    steps_taken: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            moments: HashMap::new(),
            steps_taken: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Forgets moment estimates, e.g. when a new task starts.
    pub fn reset(&mut self) {
        self.moments.clear();
        self.steps_taken = 0;
    }

    pub fn step(
        &mut self,
        registry: &mut ParamRegistry,
        schedule: &LrSchedule,
        step: usize,
    ) -> Result<()> {
        let (beta1, beta2, eps) = match self.kind {
            OptimizerKind::Sgd => return sgd_step(registry, schedule, step),
            OptimizerKind::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
        };
        let lr = schedule.lr(step);
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for id in registry.trainable_ids() {
            if registry.get(id).grad().is_none() {
                return Err(Error::Contract(format!(
                    "trainable parameter {} has no gradient",
                    registry.name(id)
                )));
            }
        }
        for id in registry.trainable_ids() {
            let tensor = registry.get_mut(id);
            let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((p, g), m), v) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
            }
        }
        registry.zero_grad();
        Ok(())
    }
}
