use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::error::{Error, Result};
use crate::model::AdaptPosition;
use crate::pool::{IntrinsicWeighting, PoolDims, TraceWeighting};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ours,
    Sequential,
    Rehearsal,
    Joint,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Ours,
        Method::Sequential,
        Method::Rehearsal,
        Method::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Sequential => "sequential",
            Method::Rehearsal => "rehearsal",
            Method::Joint => "joint",
        }
    }

    /// Whether the method fine-tunes every model weight.
    pub fn is_full_finetune(self) -> bool {
        self != Method::Ours
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    #[default]
    Text,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSharing {
    #[default]
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Adam => OptimizerKind::default(),
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
        }
    }
}

/// Everything that determines one continual run besides the data and the
/// base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Stream positions in training order; empty means the stored order.
    pub task_order: Vec<usize>,
    pub pool_size: usize,
    pub top_m: usize,
    pub rank: usize,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate for pool keys, factors and context weights.
    pub lr: f64,
    /// Learning rate for full-model fine-tuning (sequential, rehearsal, joint).
    pub full_lr: f64,
    pub warmup_ratio: f64,
    pub optimizer: OptimizerChoice,
    pub seed: u64,
    pub encoder_seed: u64,
    pub drop_intrinsic: bool,
    pub drop_contextual: bool,
    pub drop_align_loss: bool,
    pub adapt_position: AdaptPosition,
    pub similarity_source: SimilaritySource,
    pub no_low_rank: bool,
    pub intrinsic_weighting: IntrinsicWeighting,
    pub context_include_current: bool,
    pub trace_weighting: TraceWeighting,
    pub carry_context_weights: bool,
    pub pool_sharing: PoolSharing,
    /// Buffer capacity as a fraction of the train size of the task just left.
    pub rehearsal_fraction: f64,
    /// One buffered instance per this many batch slots.
    pub rehearsal_every: usize,
    pub max_new_tokens: usize,
    /// Evaluate on at most this many instances per task.
    pub eval_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Ours,
            task_order: Vec::new(),
            pool_size: 32,
            top_m: 4,
            rank: 8,
            embed_dim: 64,
            batch_size: 32,
            epochs: 2,
            lr: 1e-2,
            full_lr: 1e-3,
            warmup_ratio: 0.03,
            optimizer: OptimizerChoice::Adam,
            seed: 0,
            encoder_seed: 0,
            drop_intrinsic: false,
            drop_contextual: false,
            drop_align_loss: false,
            adapt_position: AdaptPosition::Output,
            similarity_source: SimilaritySource::Text,
            no_low_rank: false,
            intrinsic_weighting: IntrinsicWeighting::Cosine,
            context_include_current: true,
            trace_weighting: TraceWeighting::Uniform,
            carry_context_weights: false,
            pool_sharing: PoolSharing::PerLayer,
            rehearsal_fraction: 0.01,
            rehearsal_every: 8,
            max_new_tokens: 12,
            eval_limit: None,
        }
    }
}

impl RunConfig {
    pub fn pool_dims(&self, hidden: usize) -> PoolDims {
        PoolDims {
            n: self.pool_size,
            d: hidden,
            r: self.rank,
            e: self.embed_dim,
        }
    }

    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        if self.top_m == 0 || self.top_m > self.pool_size {
            return Err(Error::Config(format!(
                "top_m {} must be in 1..={}",
                self.top_m, self.pool_size
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.full_lr >= 0.0)
            || !self.lr.is_finite()
            || !self.full_lr.is_finite()
        {
            return Err(Error::Config(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        if self.method == Method::Rehearsal {
            if !(0.0..=1.0).contains(&self.rehearsal_fraction) {
                return Err(Error::Config(
                    "rehearsal_fraction must lie in [0, 1]".into(),
                ));
            }
            if self.rehearsal_every < 2 || self.rehearsal_every > self.batch_size {
                return Err(Error::Config(format!(
                    "rehearsal_every must be in 2..={} so each batch keeps fresh data",
                    self.batch_size
                )));
            }
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        self.order(n_tasks).map(|_| ())
    }

    /// Resolved training order over `n_tasks` stream positions.
    pub fn order(&self, n_tasks: usize) -> Result<Vec<usize>> {
        if self.task_order.is_empty() {
            return Ok((0..n_tasks).collect());
        }
        let mut sorted = self.task_order.clone();
        sorted.sort_unstable();
        if sorted != (0..n_tasks).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "task_order {:?} is not a permutation of 0..{n_tasks}",
                self.task_order
            )));
        }
        Ok(self.task_order.clone())
    }

    /// Short label of the task order, e.g. `2-0-1`.
    pub fn order_label(&self, n_tasks: usize) -> String {
        self.order(n_tasks)
            .unwrap_or_default()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }
}
