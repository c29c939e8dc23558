//! Tiny causal attention model with an optional one-slot feature prefix.
//!
//! Weights live in a [`ParamRegistry`]; [`ToyModel`] is the set of handles
//! into it plus the architecture config. Any attention projection can be
//! re-parameterised per forward pass as `W' = W0 + Δθ + Δδ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    Graph, LrSchedule, Optimizer, OptimizerKind, ParamId, ParamRegistry, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub feature_dim: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab_size: vocab::SIZE,
            hidden: 64,
            layers: 1,
            heads: 2,
            max_seq_len: 48,
            feature_dim: 8,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < vocab::SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the symbol table ({})",
                self.vocab_size,
                vocab::SIZE
            )));
        }
        Ok(())
    }
}

/// Which attention projection(s) receive the increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptPosition {
    Query,
    Key,
    Value,
    #[default]
    Output,
    All,
}

impl AdaptPosition {
    pub const ALL_CHOICES: [AdaptPosition; 5] = [
        AdaptPosition::Query,
        AdaptPosition::Key,
        AdaptPosition::Value,
        AdaptPosition::Output,
        AdaptPosition::All,
    ];

    fn covers(self, slot: AdaptPosition) -> bool {
        self == AdaptPosition::All || self == slot
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptPosition::Query => "query",
            AdaptPosition::Key => "key",
            AdaptPosition::Value => "value",
            AdaptPosition::Output => "output",
            AdaptPosition::All => "all",
        }
    }
}

impl std::str::FromStr for AdaptPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL_CHOICES
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapt position {s:?}")))
    }
}

/// Increments recorded on a graph for one layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerIncrement {
    pub theta: Option<Var>,
    pub delta: Option<Var>,
}

/// Graph-level adaptation: one [`LayerIncrement`] per layer (or none at all
/// for the frozen base).
#[derive(Debug, Clone, Default)]
pub struct GraphAdapt {
    pub position: AdaptPosition,
    pub layers: Vec<LayerIncrement>,
}

impl GraphAdapt {
    pub fn base() -> Self {
        Self::default()
    }
}

/// Tensor-level adaptation applied identically at every layer.
#[derive(Debug, Clone, Default)]
pub struct AdaptedForwardSpec {
    pub position: AdaptPosition,
    pub delta_theta: Option<Tensor>,
    pub delta_delta: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_in: ParamId,
    pub mlp_in_bias: ParamId,
    pub mlp_out: ParamId,
    pub mlp_out_bias: ParamId,
}

impl LayerIds {
    pub fn all(&self) -> [ParamId; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln2_gain,
            self.ln2_bias,
            self.mlp_in,
            self.mlp_in_bias,
            self.mlp_out,
            self.mlp_out_bias,
        ]
    }
}

/// Handles to the model's weights inside a registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub feature_projector: Option<ParamId>,
    pub layers: Vec<LayerIds>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub head: ParamId,
}

/// Tokenised (features, prompt, response) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub features: Option<Vec<f64>>,
    /// `<bos> instruction <sep>`
    pub prompt: Vec<usize>,
    /// response tokens followed by `<eos>`
    pub response: Vec<usize>,
}

impl EncodedInstance {
    pub fn new(features: Option<Vec<f64>>, instruction: &str, response: &str) -> Self {
        let mut prompt = vec![vocab::BOS];
        prompt.extend(vocab::encode(instruction));
        prompt.push(vocab::SEP);
        let mut resp = vocab::encode(response);
        resp.push(vocab::EOS);
        EncodedInstance {
            features,
            prompt,
            response: resp,
        }
    }

    /// Prompt followed by every response token except the last one.
    pub fn input_tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response[..self.response.len().saturating_sub(1)]);
        t
    }
}

pub const MODEL_PREFIX: &str = "model.";

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("finite samples")
}

impl ToyModel {
    /// Registers freshly initialised weights (all trainable) under `model.*`.
    pub fn init(config: ToyModelConfig, registry: &mut ParamRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let v = config.vocab_size;
        let f = config.feature_dim;
        let proj_std = 1.0 / (d as f64).sqrt();
        let mut reg =
            |name: &str, t: Tensor| registry.register(format!("{MODEL_PREFIX}{name}"), t, true);

        let token_embedding = reg("tok_emb", normal_tensor(&mut rng, &[v, d], 0.1))?;
        let position_embedding = reg(
            "pos_emb",
            normal_tensor(&mut rng, &[config.max_seq_len, d], 0.1),
        )?;
        let feature_projector = if f > 0 {
            Some(reg(
                "feat_proj",
                normal_tensor(&mut rng, &[f, d], 1.0 / (f as f64).sqrt()),
            )?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let ones = Tensor::new(vec![1, d], vec![1.0; d])?;
            let zeros = Tensor::zeros(&[1, d]);
            layers.push(LayerIds {
                ln1_gain: reg(&format!("layer{l}.ln1.gain"), ones.clone())?,
                ln1_bias: reg(&format!("layer{l}.ln1.bias"), zeros.clone())?,
                wq: reg(
                    &format!("layer{l}.attn.wq"),
                    normal_tensor(&mut rng, &[d, d], proj_std),
                )?,
                wk: reg(
                    &format!("layer{l}.attn.wk"),
                    normal_tensor(&mut rng, &[d, d], proj_std),
                )?,
                wv: reg(
                    &format!("layer{l}.attn.wv"),
                    normal_tensor(&mut rng, &[d, d], proj_std),
                )?,
                wo: reg(
                    &format!("layer{l}.attn.wo"),
                    normal_tensor(&mut rng, &[d, d], proj_std),
                )?,
                ln2_gain: reg(&format!("layer{l}.ln2.gain"), ones)?,
                ln2_bias: reg(&format!("layer{l}.ln2.bias"), zeros)?,
                mlp_in: reg(
                    &format!("layer{l}.mlp.w_in"),
                    normal_tensor(&mut rng, &[d, 4 * d], proj_std),
                )?,
                mlp_in_bias: reg(&format!("layer{l}.mlp.b_in"), Tensor::zeros(&[1, 4 * d]))?,
                mlp_out: reg(
                    &format!("layer{l}.mlp.w_out"),
                    normal_tensor(&mut rng, &[4 * d, d], 1.0 / ((4 * d) as f64).sqrt()),
                )?,
                mlp_out_bias: reg(&format!("layer{l}.mlp.b_out"), Tensor::zeros(&[1, d]))?,
            });
        }
        let final_gain = reg("ln_f.gain", Tensor::new(vec![1, d], vec![1.0; d])?)?;
        let final_bias = reg("ln_f.bias", Tensor::zeros(&[1, d]))?;
        let head = reg("head", normal_tensor(&mut rng, &[d, v], proj_std))?;
        Ok(ToyModel {
            config,
            token_embedding,
            position_embedding,
            feature_projector,
            layers,
            final_gain,
            final_bias,
            head,
        })
    }

    /// Rebuilds handles for a registry that already holds `model.*` weights.
    pub fn attach(config: ToyModelConfig, registry: &ParamRegistry) -> Result<Self> {
        config.validate()?;
        let get = |name: &str| {
            registry
                .id(&format!("{MODEL_PREFIX}{name}"))
                .ok_or_else(|| Error::Data(format!("checkpoint lacks weight {MODEL_PREFIX}{name}")))
        };
        let feature_projector = if config.feature_dim > 0 {
            Some(get("feat_proj")?)
        } else {
            None
        };
        let layers = (0..config.layers)
            .map(|l| {
                Ok(LayerIds {
                    ln1_gain: get(&format!("layer{l}.ln1.gain"))?,
                    ln1_bias: get(&format!("layer{l}.ln1.bias"))?,
                    wq: get(&format!("layer{l}.attn.wq"))?,
                    wk: get(&format!("layer{l}.attn.wk"))?,
                    wv: get(&format!("layer{l}.attn.wv"))?,
                    wo: get(&format!("layer{l}.attn.wo"))?,
                    ln2_gain: get(&format!("layer{l}.ln2.gain"))?,
                    ln2_bias: get(&format!("layer{l}.ln2.bias"))?,
                    mlp_in: get(&format!("layer{l}.mlp.w_in"))?,
                    mlp_in_bias: get(&format!("layer{l}.mlp.b_in"))?,
                    mlp_out: get(&format!("layer{l}.mlp.w_out"))?,
                    mlp_out_bias: get(&format!("layer{l}.mlp.b_out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = ToyModel {
            config,
            token_embedding: get("tok_emb")?,
            position_embedding: get("pos_emb")?,
            feature_projector,
            layers,
            final_gain: get("ln_f.gain")?,
            final_bias: get("ln_f.bias")?,
            head: get("head")?,
        };
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            let t = registry.get(id);
            if t.rows() * t.cols() != shape.iter().product::<usize>()
                || t.cols() != *shape.last().unwrap()
            {
                return Err(Error::Data(format!(
                    "weight {} has shape {:?}, expected {shape:?}",
                    registry.name(id),
                    t.shape()
                )));
            }
            Ok(())
        };
        let d = config.hidden;
        expect(model.token_embedding, &[config.vocab_size, d])?;
        expect(model.position_embedding, &[config.max_seq_len, d])?;
        expect(model.head, &[d, config.vocab_size])?;
        for l in &model.layers {
            for w in [l.wq, l.wk, l.wv, l.wo] {
                expect(w, &[d, d])?;
            }
        }
        Ok(model)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        ids.extend(self.feature_projector);
        for l in &self.layers {
            ids.extend(l.all());
        }
        ids.extend([self.final_gain, self.final_bias, self.head]);
        ids
    }

    pub fn set_trainable(&self, registry: &mut ParamRegistry, trainable: bool) {
        for id in self.param_ids() {
            registry.set_trainable(id, trainable);
        }
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn check_length(&self, features: Option<&[f64]>, tokens: &[usize]) -> Result<usize> {
        let n = tokens.len() + usize::from(features.is_some());
        if n > self.config.max_seq_len {
            return Err(Error::Length {
                len: n,
                limit: self.config.max_seq_len,
            });
        }
        if n == 0 {
            return Err(Error::Data("empty input sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(f) = features {
            if self.feature_projector.is_none() || f.len() != self.config.feature_dim {
                return Err(Error::Dimension {
                    op: "forward",
                    detail: format!(
                        "{} features for feature_dim {}",
                        f.len(),
                        self.config.feature_dim
                    ),
                });
            }
        }
        Ok(n)
    }

    fn adapted_weight(
        &self,
        g: &mut Graph,
        base: ParamId,
        slot: AdaptPosition,
        adapt: &GraphAdapt,
        layer: usize,
    ) -> Result<Var> {
        let w = g.param(base);
        let Some(inc) = adapt.layers.get(layer) else {
            return Ok(w);
        };
        if !adapt.position.covers(slot) {
            return Ok(w);
        }
        let mut w = w;
        if let Some(theta) = inc.theta {
            w = g.add(w, theta)?;
        }
        if let Some(delta) = inc.delta {
            w = g.add(w, delta)?;
        }
        Ok(w)
    }

    /// Final hidden states (after the last layer norm), one row per position.
    pub fn hidden_states(
        &self,
        g: &mut Graph,
        features: Option<&[f64]>,
        tokens: &[usize],
        adapt: &GraphAdapt,
    ) -> Result<Var> {
        let n = self.check_length(features, tokens)?;
        let d = self.config.hidden;
        let heads = self.config.heads;
        let head_dim = d / heads;

        let tok_table = g.param(self.token_embedding);
        let tok = g.gather_rows(tok_table, tokens)?;
        let x = match (features, self.feature_projector) {
            (Some(f), Some(proj)) => {
                let fv = g.constant_data(1, f.len(), f.to_vec())?;
                let pw = g.param(proj);
                let prefix = g.matmul(fv, pw)?;
                g.concat_rows(&[prefix, tok])?
            }
            _ => tok,
        };
        let pos_table = g.param(self.position_embedding);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(x, pos)?;

        let scale = 1.0 / (head_dim as f64).sqrt();
        for (l, ids) in self.layers.iter().enumerate() {
            let gain = g.param(ids.ln1_gain);
            let bias = g.param(ids.ln1_bias);
            let h = g.layer_norm(x, gain, bias)?;
            let wq = self.adapted_weight(g, ids.wq, AdaptPosition::Query, adapt, l)?;
            let wk = self.adapted_weight(g, ids.wk, AdaptPosition::Key, adapt, l)?;
            let wv = self.adapted_weight(g, ids.wv, AdaptPosition::Value, adapt, l)?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = g.slice_cols(q, head * head_dim, head_dim)?;
                let kh = g.slice_cols(k, head * head_dim, head_dim)?;
                let vh = g.slice_cols(v, head * head_dim, head_dim)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.causal_softmax(scores)?;
                outs.push(g.matmul(attn, vh)?);
            }
            let merged = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat_cols(&outs)?
            };
            let wo = self.adapted_weight(g, ids.wo, AdaptPosition::Output, adapt, l)?;
            let attn_out = g.matmul(merged, wo)?;
            x = g.add(x, attn_out)?;

            let gain = g.param(ids.ln2_gain);
            let bias = g.param(ids.ln2_bias);
            let h = g.layer_norm(x, gain, bias)?;
            let w_in = g.param(ids.mlp_in);
            let b_in = g.param(ids.mlp_in_bias);
            let w_out = g.param(ids.mlp_out);
            let b_out = g.param(ids.mlp_out_bias);
            let m = g.matmul(h, w_in)?;
            let m = g.add_row(m, b_in)?;
            let m = g.gelu(m)?;
            let m = g.matmul(m, w_out)?;
            let m = g.add_row(m, b_out)?;
            x = g.add(x, m)?;
        }
        let gain = g.param(self.final_gain);
        let bias = g.param(self.final_bias);
        g.layer_norm(x, gain, bias)
    }

    /// Logits for the selected positions (`None` = every position).
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        features: Option<&[f64]>,
        tokens: &[usize],
        adapt: &GraphAdapt,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let h = self.hidden_states(g, features, tokens, adapt)?;
        let h = match rows {
            Some(r) => g.gather_rows(h, r)?,
            None => h,
        };
        let head = g.param(self.head);
        g.matmul(h, head)
    }

    /// Response-only auto-regressive loss on a graph.
    pub fn ar_loss_graph(
        &self,
        g: &mut Graph,
        inst: &EncodedInstance,
        adapt: &GraphAdapt,
    ) -> Result<Var> {
        if inst.response.is_empty() {
            return Err(Error::Data("instance has an empty response".into()));
        }
        let tokens = inst.input_tokens();
        let offset = usize::from(inst.features.is_some());
        let first = offset + inst.prompt.len() - 1;
        let rows: Vec<usize> = (first..first + inst.response.len()).collect();
        let logits = self.logits_graph(g, inst.features.as_deref(), &tokens, adapt, Some(&rows))?;
        g.softmax_cross_entropy(logits, &inst.response)
    }

    /// Next-token loss over every token position (pretraining objective).
    pub fn lm_loss_graph(&self, g: &mut Graph, inst: &EncodedInstance) -> Result<Var> {
        let mut full = inst.prompt.clone();
        full.extend_from_slice(&inst.response);
        let tokens = &full[..full.len() - 1];
        let targets = &full[1..];
        let offset = usize::from(inst.features.is_some());
        let rows: Vec<usize> = (offset..offset + tokens.len()).collect();
        let logits = self.logits_graph(
            g,
            inst.features.as_deref(),
            tokens,
            &GraphAdapt::base(),
            Some(&rows),
        )?;
        g.softmax_cross_entropy(logits, targets)
    }

    fn spec_to_graph(g: &mut Graph, spec: &AdaptedForwardSpec, layers: usize) -> GraphAdapt {
        let theta = spec.delta_theta.as_ref().map(|t| g.constant(t));
        let delta = spec.delta_delta.as_ref().map(|t| g.constant(t));
        GraphAdapt {
            position: spec.position,
            layers: vec![LayerIncrement { theta, delta }; layers],
        }
    }

    /// Logits for every position under a tensor-level adaptation.
    pub fn forward(
        &self,
        registry: &ParamRegistry,
        features: Option<&[f64]>,
        tokens: &[usize],
        spec: &AdaptedForwardSpec,
    ) -> Result<Tensor> {
        let mut g = Graph::new(registry);
        let adapt = Self::spec_to_graph(&mut g, spec, self.layers.len());
        let logits = self.logits_graph(&mut g, features, tokens, &adapt, None)?;
        Ok(g.tensor(logits))
    }

    pub fn ar_loss(
        &self,
        registry: &ParamRegistry,
        inst: &EncodedInstance,
        spec: &AdaptedForwardSpec,
    ) -> Result<f64> {
        let mut g = Graph::new(registry);
        let adapt = Self::spec_to_graph(&mut g, spec, self.layers.len());
        let loss = self.ar_loss_graph(&mut g, inst, &adapt)?;
        Ok(g.scalar(loss))
    }

    /// Greedy decoding; stops at `<eos>` (not returned) or after `max_new`.
    pub fn generate(
        &self,
        registry: &ParamRegistry,
        features: Option<&[f64]>,
        prompt: &[usize],
        spec: &AdaptedForwardSpec,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let layers = self.layers.len();
        self.generate_with(registry, features, prompt, max_new, |g| {
            Self::spec_to_graph(g, spec, layers)
        })
    }

    /// Greedy decoding where `adapt` records the increments on each fresh
    /// graph.
    pub fn generate_with<F>(
        &self,
        registry: &ParamRegistry,
        features: Option<&[f64]>,
        prompt: &[usize],
        max_new: usize,
        adapt: F,
    ) -> Result<Vec<usize>>
    where
        F: Fn(&mut Graph) -> GraphAdapt,
    {
        let prefix = usize::from(features.is_some());
        let needed = prompt.len() + prefix + max_new;
        if needed > self.config.max_seq_len {
            return Err(Error::Length {
                len: needed,
                limit: self.config.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let mut g = Graph::new(registry);
            let adapt = adapt(&mut g);
            let last = tokens.len() + prefix - 1;
            let logits = self.logits_graph(&mut g, features, &tokens, &adapt, Some(&[last]))?;
            let next = argmax(g.value(logits));
            if next == vocab::EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Mean next-token loss of the base model over `corpus`.
pub fn corpus_loss(
    model: &ToyModel,
    registry: &ParamRegistry,
    corpus: &[EncodedInstance],
) -> Result<f64> {
    let mut total = 0.0;
    for inst in corpus {
        let mut g = Graph::new(registry);
        let l = model.lm_loss_graph(&mut g, inst)?;
        total += g.scalar(l);
    }
    Ok(total / corpus.len().max(1) as f64)
}

/// Trains a fresh model on `corpus` with next-token cross-entropy, then
/// freezes every weight. Deterministic given `seed`.
pub fn pretrain_base(
    config: ToyModelConfig,
    corpus: &[EncodedInstance],
    train: &PretrainConfig,
    seed: u64,
) -> Result<(ParamRegistry, ToyModel, PretrainReport)> {
    use rand::Rng;

    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut registry = ParamRegistry::new();
    let model = ToyModel::init(config, &mut registry, seed)?;
    let schedule = LrSchedule::cosine(train.lr, train.warmup_ratio, train.steps.max(1))?;
    let mut opt = Optimizer::new(OptimizerKind::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut batch_loss = 0.0;
        for _ in 0..train.batch_size {
            let inst = &corpus[rng.gen_range(0..corpus.len())];
            let grads = {
                let mut g = Graph::new(&registry);
                let loss = model.lm_loss_graph(&mut g, inst)?;
                batch_loss += g.scalar(loss);
                g.backward(loss)?
            };
            registry.accumulate(&grads, 1.0 / train.batch_size as f64)?;
        }
        losses.push(batch_loss / train.batch_size as f64);
        opt.step(&mut registry, &schedule, step + 1)?;
    }
    model.set_trainable(&mut registry, false);
    let window = losses.len().clamp(1, 50);
    let initial_loss = losses.first().copied().unwrap_or(f64::NAN);
    let final_loss = losses[losses.len().saturating_sub(window)..]
        .iter()
        .sum::<f64>()
        / window as f64;
    Ok((
        registry,
        model,
        PretrainReport {
            initial_loss,
            final_loss,
            losses,
        },
    ))
}
