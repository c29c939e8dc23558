use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamRegistry, Tensor};
use crate::data::InstructionInstance;
use crate::encoder::{FeatureSurrogate, SurrogateEncoder};
use crate::error::{Error, Result};
use crate::model::{
    pretrain_base, EncodedInstance, GraphAdapt, LayerIncrement, PretrainConfig, PretrainReport,
    ToyModel, ToyModelConfig,
};
use crate::pool::{contextual_increment, ContextWeights, LowRankPool, TaskTrace};
use crate::vocab;

use super::config::{PoolSharing, RunConfig, SimilaritySource};
use super::metrics::AccuracyMatrix;

/// A pretrained, fully frozen model.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub registry: ParamRegistry,
    pub model: ToyModel,
    pub seed: u64,
}

impl BaseModel {
    pub fn pretrain(
        config: ToyModelConfig,
        corpus: &[EncodedInstance],
        train: &PretrainConfig,
        seed: u64,
    ) -> Result<(Self, PretrainReport)> {
        let (registry, model, report) = pretrain_base(config, corpus, train, seed)?;
        Ok((
            BaseModel {
                registry,
                model,
                seed,
            },
            report,
        ))
    }

    pub fn config(&self) -> ToyModelConfig {
        self.model.config
    }
}

/// Maps an instance to the query used for pool selection.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryEncoder {
    Text(SurrogateEncoder),
    Feature(FeatureSurrogate),
}

impl QueryEncoder {
    pub fn build(config: &RunConfig, model: &ToyModelConfig) -> Result<Self> {
        match config.similarity_source {
            SimilaritySource::Text => Ok(QueryEncoder::Text(SurrogateEncoder::new(
                config.embed_dim,
                config.encoder_seed,
            )?)),
            SimilaritySource::Feature => {
                if model.feature_dim == 0 {
                    return Err(Error::Config(
                        "feature similarity needs feature_dim > 0".into(),
                    ));
                }
                Ok(QueryEncoder::Feature(FeatureSurrogate::new(
                    model.feature_dim,
                    config.embed_dim,
                    config.encoder_seed,
                )?))
            }
        }
    }

    pub fn query(&self, features: Option<&[f64]>, instruction: &str) -> Result<Vec<f64>> {
        match self {
            QueryEncoder::Text(enc) => enc.encode(instruction),
            QueryEncoder::Feature(enc) => enc.encode(features),
        }
    }
}

/// Reservoir of past training instances for the rehearsal baseline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    capacity: usize,
    seen: u64,
    items: Vec<InstructionInstance>,
}

impl RehearsalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[InstructionInstance] {
        &self.items
    }

    /// Resizes to `capacity` and streams `instances` through reservoir
    /// sampling, so every instance seen so far is kept with equal chance.
    pub fn absorb(
        &mut self,
        instances: &[InstructionInstance],
        capacity: usize,
        rng: &mut ChaCha8Rng,
    ) {
        self.capacity = capacity;
        while self.items.len() > capacity {
            let i = rng.gen_range(0..self.items.len());
            self.items.swap_remove(i);
        }
        for inst in instances {
            self.seen += 1;
            if self.items.len() < capacity {
                self.items.push(inst.clone());
            } else if capacity > 0 {
                let j = rng.gen_range(0..self.seen);
                if (j as usize) < capacity {
                    self.items[j as usize] = inst.clone();
                }
            }
        }
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a InstructionInstance> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

/// Everything produced by a run up to `completed` tasks.
#[derive(Debug, Clone)]
pub struct TrainedState {
    pub config: RunConfig,
    pub base_seed: u64,
    pub registry: ParamRegistry,
    pub model: ToyModel,
    pub pools: Vec<LowRankPool>,
    pub context: Option<ContextWeights>,
    /// `traces[pool][position]`.
    pub traces: Vec<Vec<TaskTrace>>,
    pub encoder: Option<QueryEncoder>,
    pub completed: usize,
    pub global_step: usize,
    pub matrix: AccuracyMatrix,
    pub buffer: Option<RehearsalBuffer>,
}

/// Precomputed per-pool contextual increments for inference.
#[derive(Debug, Clone)]
pub struct InferenceCache {
    deltas: Vec<Option<Tensor>>,
}

impl TrainedState {
    pub fn model_config(&self) -> ToyModelConfig {
        self.model.config
    }

    /// Pool serving layer `layer`.
    pub fn pool_for_layer(&self, layer: usize) -> usize {
        match self.config.pool_sharing {
            PoolSharing::PerLayer => layer,
            PoolSharing::Global => 0,
        }
    }

    /// Scalar count of pool and context parameters.
    pub fn increment_param_count(&self) -> usize {
        self.pools
            .iter()
            .map(LowRankPool::param_count)
            .sum::<usize>()
            + self.context.map_or(0, |c| c.capacity())
    }

    pub fn inference_cache(&self) -> Result<InferenceCache> {
        let mut deltas = Vec::with_capacity(self.pools.len());
        for (p, pool) in self.pools.iter().enumerate() {
            let traces = &self.traces[p];
            if self.config.drop_contextual || traces.len() <= 1 {
                deltas.push(None);
                continue;
            }
            if let Some(live) = traces.iter().find(|t| !t.is_frozen()) {
                return Err(Error::Contract(format!(
                    "inference with live trace of task {}",
                    live.task_id()
                )));
            }
            let ctx = self
                .context
                .ok_or_else(|| Error::Contract("missing context weights".into()))?;
            deltas.push(Some(contextual_increment(
                &ctx,
                &self.registry,
                traces,
                true,
                pool.dims().d,
            )?));
        }
        Ok(InferenceCache { deltas })
    }

    /// Per-pool `(Δθ, selected indices)` for one instance.
    pub fn intrinsic(
        &self,
        features: Option<&[f64]>,
        instruction: &str,
    ) -> Result<Vec<(Option<Tensor>, Vec<usize>)>> {
        let Some(encoder) = &self.encoder else {
            return Ok(Vec::new());
        };
        let q = encoder.query(features, instruction)?;
        let mut out = Vec::with_capacity(self.pools.len());
        for pool in &self.pools {
            let idx = pool.select_top_m(&self.registry, &q, self.config.top_m)?;
            let theta = if self.config.drop_intrinsic {
                None
            } else {
                Some(pool.intrinsic_increment(
                    &self.registry,
                    &q,
                    &idx,
                    self.config.intrinsic_weighting,
                )?)
            };
            out.push((theta, idx));
        }
        Ok(out)
    }

    /// Task-identity-free greedy response.
    pub fn infer_with(
        &self,
        cache: &InferenceCache,
        features: Option<&[f64]>,
        instruction: &str,
    ) -> Result<String> {
        let inst = EncodedInstance::new(features.map(<[f64]>::to_vec), instruction, "");
        let increments = self.intrinsic(features, instruction)?;
        let layers = self.model.layers.len();
        let position = self.config.adapt_position;
        let build = |g: &mut Graph| {
            if increments.is_empty() {
                return GraphAdapt::base();
            }
            let per_pool: Vec<LayerIncrement> = increments
                .iter()
                .zip(&cache.deltas)
                .map(|((theta, _), delta)| LayerIncrement {
                    theta: theta.as_ref().map(|t| g.constant(t)),
                    delta: delta.as_ref().map(|d| g.constant(d)),
                })
                .collect();
            GraphAdapt {
                position,
                layers: (0..layers)
                    .map(|l| per_pool[self.pool_for_layer(l)])
                    .collect(),
            }
        };
        let out = self.model.generate_with(
            &self.registry,
            features,
            &inst.prompt,
            self.config.max_new_tokens,
            build,
        )?;
        Ok(vocab::decode(&out))
    }

    pub fn infer(&self, features: Option<&[f64]>, instruction: &str) -> Result<String> {
        self.infer_with(&self.inference_cache()?, features, instruction)
    }

    /// Exact-match accuracy after whitespace normalisation.
    pub fn evaluate(&self, eval: &[InstructionInstance]) -> Result<f64> {
        evaluate_with(self, &self.inference_cache()?, eval)
    }
}

pub fn evaluate_with(
    state: &TrainedState,
    cache: &InferenceCache,
    eval: &[InstructionInstance],
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for inst in eval {
        let out = state.infer_with(cache, inst.features.as_deref(), &inst.instruction)?;
        if out == vocab::normalize(&inst.response) {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Accuracy of `state` on one task's eval set.
pub fn evaluate(state: &TrainedState, eval: &[InstructionInstance]) -> Result<f64> {
    state.evaluate(eval)
}
