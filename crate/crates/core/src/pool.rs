//! Proxy-increment pool: keys matched against the instruction embedding,
//! low-rank increments `P_n = A_n·B_n`, per-task selection traces and the
//! weighted contextual sum over earlier tasks.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamRegistry, Tensor, Var};
use crate::error::{Error, Result};

/// Minimum `|Σ cos|` accepted by the intrinsic composition.
pub const DENOM_EPS: f64 = 1e-8;
pub const FACTOR_B_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolDims {
    /// Number of pairs.
    pub n: usize,
    /// Model width.
    pub d: usize,
    /// Factor rank.
    pub r: usize,
    /// Key width.
    pub e: usize,
}

impl PoolDims {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.r == 0 || self.e == 0 {
            return Err(Error::Config(format!(
                "pool dimensions must be positive: {self:?}"
            )));
        }
        if self.r > self.d {
            return Err(Error::Config(format!(
                "rank {} exceeds model width {}",
                self.r, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicWeighting {
    /// Cosine scores normalised by their sum.
    #[default]
    Cosine,
    /// Softmax over the cosine scores.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceWeighting {
    #[default]
    Uniform,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairFactors {
    LowRank {
        a: ParamId,
        b: ParamId,
    },
    /// Dense `D×D` increment, for the ablation without factorisation.
    Full {
        p: ParamId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIds {
    pub key: ParamId,
    pub factors: PairFactors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankPool {
    dims: PoolDims,
    prefix: String,
    low_rank: bool,
    pairs: Vec<PairIds>,
}

fn pair_names(prefix: &str, n: usize) -> (String, String, String, String) {
    (
        format!("{prefix}.{n}.key"),
        format!("{prefix}.{n}.a"),
        format!("{prefix}.{n}.b"),
        format!("{prefix}.{n}.p"),
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::Dimension {
            op: "cosine",
            detail: format!("{} vs {}", q.len(), k.len()),
        });
    }
    let (nq, nk) = (norm(q), norm(k));
    if nq <= crate::autodiff::NORM_EPS || nk <= crate::autodiff::NORM_EPS {
        return Err(Error::DegenerateInput(format!(
            "cosine of vectors with norms {nq:e} and {nk:e}"
        )));
    }
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    Ok((dot / (nq * nk)).clamp(-1.0, 1.0))
}

impl LowRankPool {
    /// Registers a fresh pool: unit keys, `A = 0`, `B ~ N(0, 0.02²)`.
    pub fn init(
        registry: &mut ParamRegistry,
        prefix: &str,
        dims: PoolDims,
        seed: u64,
        low_rank: bool,
    ) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid");
        let small = Normal::new(0.0, FACTOR_B_STD).expect("valid");
        let mut pairs = Vec::with_capacity(dims.n);
        for n in 0..dims.n {
            let (kn, an, bn, pn) = pair_names(prefix, n);
            let mut key: Vec<f64> = (0..dims.e).map(|_| unit.sample(&mut rng)).collect();
            let kn_norm = norm(&key);
            key.iter_mut().for_each(|x| *x /= kn_norm);
            let key = registry.register(kn, Tensor::vector(key), true)?;
            let b: Vec<f64> = (0..dims.r * dims.d)
                .map(|_| small.sample(&mut rng))
                .collect();
            let factors = if low_rank {
                let a = registry.register(an, Tensor::zeros(&[dims.d, dims.r]), true)?;
                let b = registry.register(bn, Tensor::matrix(dims.r, dims.d, b)?, true)?;
                PairFactors::LowRank { a, b }
            } else {
                PairFactors::Full {
                    p: registry.register(pn, Tensor::zeros(&[dims.d, dims.d]), true)?,
                }
            };
            pairs.push(PairIds { key, factors });
        }
        Ok(LowRankPool {
            dims,
            prefix: prefix.to_string(),
            low_rank,
            pairs,
        })
    }

    /// Finds an existing pool's parameters by name.
    pub fn attach(
        registry: &ParamRegistry,
        prefix: &str,
        dims: PoolDims,
        low_rank: bool,
    ) -> Result<Self> {
        dims.validate()?;
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = registry
                .id(name)
                .ok_or_else(|| Error::Contract(format!("missing pool parameter {name}")))?;
            if registry.get(id).shape() != shape {
                return Err(Error::Dimension {
                    op: "pool_attach",
                    detail: format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        registry.get(id).shape()
                    ),
                });
            }
            Ok(id)
        };
        let mut pairs = Vec::with_capacity(dims.n);
        for n in 0..dims.n {
            let (kn, an, bn, pn) = pair_names(prefix, n);
            let key = find(&kn, &[dims.e])?;
            let factors = if low_rank {
                PairFactors::LowRank {
                    a: find(&an, &[dims.d, dims.r])?,
                    b: find(&bn, &[dims.r, dims.d])?,
                }
            } else {
                PairFactors::Full {
                    p: find(&pn, &[dims.d, dims.d])?,
                }
            };
            pairs.push(PairIds { key, factors });
        }
        Ok(LowRankPool {
            dims,
            prefix: prefix.to_string(),
            low_rank,
            pairs,
        })
    }

    pub fn dims(&self) -> PoolDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn is_low_rank(&self) -> bool {
        self.low_rank
    }

    pub fn pair(&self, n: usize) -> PairIds {
        self.pairs[n]
    }

    /// Tunable scalars owned by the pool.
    pub fn param_count(&self) -> usize {
        let PoolDims { n, d, r, e } = self.dims;
        if self.low_rank {
            n * (2 * d * r + e)
        } else {
            n * (d * d + e)
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(self.pairs.len() * 3);
        for p in &self.pairs {
            ids.push(p.key);
            match p.factors {
                PairFactors::LowRank { a, b } => ids.extend([a, b]),
                PairFactors::Full { p } => ids.push(p),
            }
        }
        ids
    }

    pub fn set_trainable(&self, registry: &mut ParamRegistry, trainable: bool) {
        for id in self.param_ids() {
            registry.set_trainable(id, trainable);
        }
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.pairs.len() {
            return Err(Error::Index(format!(
                "pool index {n} with {} pairs",
                self.pairs.len()
            )));
        }
        Ok(())
    }

    pub fn key<'a>(&self, registry: &'a ParamRegistry, n: usize) -> Result<&'a [f64]> {
        self.check_index(n)?;
        Ok(registry.get(self.pairs[n].key).data())
    }

    /// `P_n` at the current parameter values.
    pub fn product(&self, registry: &ParamRegistry, n: usize) -> Result<Tensor> {
        self.check_index(n)?;
        match self.pairs[n].factors {
            PairFactors::LowRank { a, b } => registry.get(a).matmul(registry.get(b)),
            PairFactors::Full { p } => Tensor::new(
                vec![self.dims.d, self.dims.d],
                registry.get(p).data().to_vec(),
            ),
        }
    }

    pub fn products(&self, registry: &ParamRegistry) -> Result<Vec<Tensor>> {
        (0..self.pairs.len())
            .map(|n| self.product(registry, n))
            .collect()
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dims.e {
            return Err(Error::Dimension {
                op: "pool_query",
                detail: format!("query of {} for key width {}", q.len(), self.dims.e),
            });
        }
        Ok(())
    }

    /// `cos(q, k_n)` for every pair.
    pub fn cosines(&self, registry: &ParamRegistry, q: &[f64]) -> Result<Vec<f64>> {
        self.check_query(q)?;
        self.pairs
            .iter()
            .map(|p| cosine(q, registry.get(p.key).data()))
            .collect()
    }

    pub fn select_top_m(
        &self,
        registry: &ParamRegistry,
        q: &[f64],
        m: usize,
    ) -> Result<Vec<usize>> {
        top_m(&self.cosines(registry, q)?, m)
    }

    pub fn intrinsic_increment(
        &self,
        registry: &ParamRegistry,
        q: &[f64],
        indices: &[usize],
        weighting: IntrinsicWeighting,
    ) -> Result<Tensor> {
        self.check_query(q)?;
        let mut cos = Vec::with_capacity(indices.len());
        let mut prods = Vec::with_capacity(indices.len());
        for &i in indices {
            cos.push(cosine(q, self.key(registry, i)?)?);
            prods.push(self.product(registry, i)?);
        }
        let refs: Vec<&Tensor> = prods.iter().collect();
        compose_intrinsic(&cos, &refs, weighting)
    }

    pub fn alignment_loss(
        &self,
        registry: &ParamRegistry,
        q: &[f64],
        indices: &[usize],
    ) -> Result<f64> {
        self.check_query(q)?;
        if indices.is_empty() {
            return Err(Error::Contract(
                "alignment loss over no selected keys".into(),
            ));
        }
        let mut total = 0.0;
        for &i in indices {
            total -= cosine(q, self.key(registry, i)?)?;
        }
        Ok(total)
    }
}

/// Indices of the `m` largest scores, best first; ties go to the lower index.
pub fn top_m(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(Error::Config(format!(
            "cannot select {m} of {} pairs",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    Ok(order)
}

fn mixing_weights(cosines: &[f64], weighting: IntrinsicWeighting) -> Result<Vec<f64>> {
    match weighting {
        IntrinsicWeighting::Cosine => {
            let sum: f64 = cosines.iter().sum();
            if sum.abs() <= DENOM_EPS {
                return Err(Error::DegenerateSelection {
                    sum,
                    cosines: cosines.to_vec(),
                });
            }
            Ok(cosines.iter().map(|c| c / sum).collect())
        }
        IntrinsicWeighting::Softmax => {
            let max = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = cosines.iter().map(|c| (c - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            Ok(exps.into_iter().map(|e| e / z).collect())
        }
    }
}

/// `Σ cos_m·P_m / Σ cos_m` (or the softmax-weighted alternative).
pub fn compose_intrinsic(
    cosines: &[f64],
    products: &[&Tensor],
    weighting: IntrinsicWeighting,
) -> Result<Tensor> {
    if cosines.is_empty() || cosines.len() != products.len() {
        return Err(Error::Contract(format!(
            "{} cosines for {} increments",
            cosines.len(),
            products.len()
        )));
    }
    let w = mixing_weights(cosines, weighting)?;
    let shape = products[0].shape().to_vec();
    let mut out = vec![0.0; products[0].numel()];
    for (wm, p) in w.iter().zip(products) {
        if p.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "compose_intrinsic",
                detail: format!("{:?} vs {shape:?}", p.shape()),
            });
        }
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o += wm * v;
        }
    }
    Tensor::new(shape, out)
}

/// `Σ_l w_l·Z̄_l` over the given averages.
pub fn compose_contextual(weights: &[f64], averages: &[&Tensor], d: usize) -> Result<Tensor> {
    if weights.len() != averages.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} averages",
            weights.len(),
            averages.len()
        )));
    }
    let mut out = vec![0.0; d * d];
    for (w, z) in weights.iter().zip(averages) {
        if z.numel() != d * d {
            return Err(Error::Dimension {
                op: "compose_contextual",
                detail: format!("{:?} for width {d}", z.shape()),
            });
        }
        for (o, v) in out.iter_mut().zip(z.data()) {
            *o += w * v;
        }
    }
    Tensor::new(vec![d, d], out)
}

/// Per-graph cache of key and product nodes so that each is recorded once.
#[derive(Debug, Clone)]
pub struct PoolVars {
    keys: Vec<Option<Var>>,
    products: Vec<Option<Var>>,
}

impl PoolVars {
    pub fn new(pool: &LowRankPool) -> Self {
        PoolVars {
            keys: vec![None; pool.len()],
            products: vec![None; pool.len()],
        }
    }

    pub fn key(&mut self, g: &mut Graph, pool: &LowRankPool, n: usize) -> Result<Var> {
        pool.check_index(n)?;
        Ok(*self.keys[n].get_or_insert_with(|| g.param(pool.pairs[n].key)))
    }

    pub fn product(&mut self, g: &mut Graph, pool: &LowRankPool, n: usize) -> Result<Var> {
        pool.check_index(n)?;
        if let Some(v) = self.products[n] {
            return Ok(v);
        }
        let v = match pool.pairs[n].factors {
            PairFactors::LowRank { a, b } => {
                let a = g.param(a);
                let b = g.param(b);
                g.matmul(a, b)?
            }
            PairFactors::Full { p } => g.param(p),
        };
        self.products[n] = Some(v);
        Ok(v)
    }
}

/// Records the intrinsic increment on `g`. With `detach_weights` the mixing
/// coefficients are constants, so only the selected factors get gradient.
#[allow(clippy::too_many_arguments)]
pub fn intrinsic_increment_graph(
    g: &mut Graph,
    pool: &LowRankPool,
    vars: &mut PoolVars,
    q: &[f64],
    indices: &[usize],
    weighting: IntrinsicWeighting,
    detach_weights: bool,
) -> Result<Var> {
    pool.check_query(q)?;
    if indices.is_empty() {
        return Err(Error::Contract(
            "intrinsic increment over no selected pairs".into(),
        ));
    }
    let qv = g.constant(&Tensor::vector(q.to_vec()));
    let mut cos = Vec::with_capacity(indices.len());
    for &i in indices {
        let k = vars.key(g, pool, i)?;
        let c = g.cosine_sim(qv, k)?;
        cos.push(if detach_weights {
            g.stop_gradient(c)?
        } else {
            c
        });
    }
    let raw: Vec<f64> = cos.iter().map(|&c| g.scalar(c)).collect();
    let weights = match weighting {
        IntrinsicWeighting::Cosine => {
            let sum: f64 = raw.iter().sum();
            if sum.abs() <= DENOM_EPS {
                return Err(Error::DegenerateSelection { sum, cosines: raw });
            }
            cos
        }
        IntrinsicWeighting::Softmax => {
            let mut e = Vec::with_capacity(cos.len());
            for &c in &cos {
                e.push(g.exp(c)?);
            }
            e
        }
    };
    let mut terms = Vec::with_capacity(indices.len());
    for (&i, &w) in indices.iter().zip(&weights) {
        let p = vars.product(g, pool, i)?;
        terms.push(g.mul_scalar(p, w)?);
    }
    let num = g.add_n(&terms)?;
    let den = g.add_n(&weights)?;
    g.div_scalar(num, den)
}

/// `-Σ cos(q, k_m)` with `q` held constant.
pub fn alignment_loss_graph(
    g: &mut Graph,
    pool: &LowRankPool,
    vars: &mut PoolVars,
    q: &[f64],
    indices: &[usize],
) -> Result<Var> {
    pool.check_query(q)?;
    if indices.is_empty() {
        return Err(Error::Contract(
            "alignment loss over no selected keys".into(),
        ));
    }
    let qv = g.constant(&Tensor::vector(q.to_vec()));
    let mut cos = Vec::with_capacity(indices.len());
    for &i in indices {
        let k = vars.key(g, pool, i)?;
        cos.push(g.cosine_sim(qv, k)?);
    }
    let total = g.add_n(&cos)?;
    g.neg(total)
}

/// Pairs selected while learning one task and their averaged increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    task_id: usize,
    selected: BTreeSet<usize>,
    counts: BTreeMap<usize, u64>,
    running_avg: Tensor,
    snapshot_avg: Option<Tensor>,
    frozen: bool,
}

impl TaskTrace {
    pub fn new(task_id: usize, d: usize) -> Self {
        TaskTrace {
            task_id,
            selected: BTreeSet::new(),
            counts: BTreeMap::new(),
            running_avg: Tensor::zeros(&[d, d]),
            snapshot_avg: None,
            frozen: false,
        }
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn selected_indices(&self) -> &BTreeSet<usize> {
        &self.selected
    }

    pub fn selection_counts(&self) -> &BTreeMap<usize, u64> {
        &self.counts
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn running_avg(&self) -> &Tensor {
        &self.running_avg
    }

    pub fn snapshot_avg(&self) -> Option<&Tensor> {
        self.snapshot_avg.as_ref()
    }

    /// Snapshot once frozen, otherwise the live average.
    pub fn average(&self) -> &Tensor {
        self.snapshot_avg.as_ref().unwrap_or(&self.running_avg)
    }

    fn check_live(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract(format!(
                "trace of task {} is frozen",
                self.task_id
            )));
        }
        Ok(())
    }

    /// Adds `indices` to the selection without recomputing the average.
    pub fn record(&mut self, indices: &[usize]) -> Result<()> {
        self.check_live()?;
        for &i in indices {
            self.selected.insert(i);
            *self.counts.entry(i).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Recomputes the running average from the pool's current products.
    pub fn refresh(&mut self, products: &[Tensor], weighting: TraceWeighting) -> Result<()> {
        self.check_live()?;
        let numel = self.running_avg.numel();
        let mut acc = vec![0.0; numel];
        let mut total = 0.0;
        for &i in &self.selected {
            let p = products.get(i).ok_or_else(|| {
                Error::Index(format!("trace index {i} with {} products", products.len()))
            })?;
            if p.numel() != numel {
                return Err(Error::Dimension {
                    op: "trace_refresh",
                    detail: format!("{:?}", p.shape()),
                });
            }
            let w = match weighting {
                TraceWeighting::Uniform => 1.0,
                TraceWeighting::Frequency => self.counts[&i] as f64,
            };
            for (a, v) in acc.iter_mut().zip(p.data()) {
                *a += w * v;
            }
            total += w;
        }
        if total > 0.0 {
            acc.iter_mut().for_each(|a| *a /= total);
        }
        self.running_avg = Tensor::new(self.running_avg.shape().to_vec(), acc)?;
        Ok(())
    }

    pub fn update(
        &mut self,
        indices: &[usize],
        pool: &LowRankPool,
        registry: &ParamRegistry,
        weighting: TraceWeighting,
    ) -> Result<()> {
        self.record(indices)?;
        self.refresh(&pool.products(registry)?, weighting)
    }

    /// Recomputes the average at the current pool values and fixes it.
    pub fn freeze(
        &mut self,
        pool: &LowRankPool,
        registry: &ParamRegistry,
        weighting: TraceWeighting,
    ) -> Result<()> {
        self.check_live()?;
        if self.selected.is_empty() {
            log::warn!(
                "task {} selected no pairs; its contextual average is zero",
                self.task_id
            );
        }
        self.refresh(&pool.products(registry)?, weighting)?;
        self.snapshot_avg = Some(self.running_avg.clone());
        self.frozen = true;
        Ok(())
    }
}

/// Learnable mixing weights `w_l = sigmoid(ρ_l)`, one per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWeights {
    id: ParamId,
    capacity: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ContextWeights {
    pub const PARAM_NAME: &'static str = "context.raw";

    pub fn init(registry: &mut ParamRegistry, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config(
                "context weights need room for at least one task".into(),
            ));
        }
        let id = registry.register(Self::PARAM_NAME, Tensor::zeros(&[capacity]), true)?;
        Ok(ContextWeights { id, capacity })
    }

    pub fn attach(registry: &ParamRegistry) -> Result<Self> {
        let id = registry
            .id(Self::PARAM_NAME)
            .ok_or_else(|| Error::Contract(format!("missing parameter {}", Self::PARAM_NAME)))?;
        Ok(ContextWeights {
            id,
            capacity: registry.get(id).numel(),
        })
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sets `ρ_l = 0` for the first `t` entries.
    pub fn reset(&self, registry: &mut ParamRegistry, t: usize) {
        let data = registry.get_mut(self.id).data_mut();
        data[..t.min(self.capacity)]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    pub fn weights(&self, registry: &ParamRegistry, t: usize) -> Result<Vec<f64>> {
        if t > self.capacity {
            return Err(Error::Index(format!(
                "{t} context weights requested, capacity {}",
                self.capacity
            )));
        }
        Ok(registry.get(self.id).data()[..t]
            .iter()
            .map(|&r| sigmoid(r))
            .collect())
    }
}

/// Which traces enter the contextual sum: every frozen one plus the live
/// last one when `include_current`. Nothing contributes while `t ≤ 1`.
fn contextual_terms(traces: &[TaskTrace], include_current: bool) -> Result<Vec<usize>> {
    let t = traces.len();
    if t <= 1 {
        return Ok(Vec::new());
    }
    if let Some(bad) = traces[..t - 1].iter().find(|tr| !tr.is_frozen()) {
        return Err(Error::Contract(format!(
            "historical trace of task {} is not frozen",
            bad.task_id
        )));
    }
    let last_live = !traces[t - 1].is_frozen();
    let count = if last_live && !include_current {
        t - 1
    } else {
        t
    };
    Ok((0..count).collect())
}

pub fn contextual_increment(
    weights: &ContextWeights,
    registry: &ParamRegistry,
    traces: &[TaskTrace],
    include_current: bool,
    d: usize,
) -> Result<Tensor> {
    let terms = contextual_terms(traces, include_current)?;
    let w = weights.weights(registry, traces.len())?;
    let ws: Vec<f64> = terms.iter().map(|&l| w[l]).collect();
    let zs: Vec<&Tensor> = terms.iter().map(|&l| traces[l].average()).collect();
    compose_contextual(&ws, &zs, d)
}

/// Graph form; averages enter as constants so only `ρ` receives gradient.
/// Returns `None` when the sum is empty.
pub fn contextual_increment_graph(
    g: &mut Graph,
    weights: &ContextWeights,
    traces: &[TaskTrace],
    include_current: bool,
) -> Result<Option<Var>> {
    let terms = contextual_terms(traces, include_current)?;
    if terms.is_empty() {
        return Ok(None);
    }
    if traces.len() > weights.capacity {
        return Err(Error::Index(format!(
            "{} tasks with context capacity {}",
            traces.len(),
            weights.capacity
        )));
    }
    let raw = g.param(weights.id);
    let mut parts = Vec::with_capacity(terms.len());
    for l in terms {
        let r = g.element(raw, l)?;
        let w = g.sigmoid(r)?;
        let z = g.constant(traces[l].average());
        let z = g.stop_gradient(z)?;
        parts.push(g.mul_scalar(z, w)?);
    }
    Ok(Some(g.add_n(&parts)?))
}
