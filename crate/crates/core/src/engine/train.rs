use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LrSchedule, Optimizer, ParamRegistry, Var};
use crate::data::{InstructionInstance, StreamTask};
use crate::error::{Error, Result};
use crate::model::{EncodedInstance, GraphAdapt, LayerIncrement};
use crate::pool::{
    alignment_loss_graph, contextual_increment_graph, intrinsic_increment_graph, top_m,
    ContextWeights, LowRankPool, PoolVars, TaskTrace,
};

use super::checkpoint::{load_state, save_state};
use super::config::{Method, PoolSharing, RunConfig};
use super::derive_seed;
use super::metrics::AccuracyMatrix;
use super::state::{evaluate_with, BaseModel, QueryEncoder, RehearsalBuffer, TrainedState};

pub const LOG_FILE: &str = "log.jsonl";
pub const MATRIX_FILE: &str = "matrix.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One optimizer step of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub position: usize,
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_align")]
    pub l_align: Option<f64>,
    #[serde(rename = "L_ar")]
    pub l_ar: f64,
    pub lr: f64,
    /// Per instance, the indices chosen in the first pool.
    pub selected_indices: Vec<Vec<usize>>,
    /// Mean cosine between queries and their selected keys.
    pub mean_selected_cos: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Where logs, checkpoints and metrics go; nothing is written when `None`.
    pub out_dir: Option<&'a Path>,
    /// Return after this many completed tasks (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainedState,
    pub log: Vec<StepRecord>,
    /// Number of tasks restored from a checkpoint, if the run resumed.
    pub resumed_from: Option<usize>,
}

impl RunOutcome {
    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.state.matrix
    }
}

pub fn checkpoint_path(out_dir: &Path, position: usize) -> PathBuf {
    out_dir
        .join(CHECKPOINT_DIR)
        .join(format!("task_{position:02}.ckpt"))
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn check_stream(stream: &[StreamTask], base: &BaseModel) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::Data("stream has no tasks".into()));
    }
    let f = base.model.config.feature_dim;
    for task in stream {
        task.validate()?;
        for inst in task.train.iter().chain(&task.eval) {
            if let Some(v) = &inst.features {
                if v.len() != f {
                    return Err(Error::Data(format!(
                        "task {} has {}-dim features, model expects {f}",
                        task.name,
                        v.len()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Untrained state for a stream of `n_tasks` tasks: the frozen base plus
/// freshly initialised increments, or a trainable copy for the baselines.
pub fn initial_state(base: &BaseModel, config: &RunConfig, n_tasks: usize) -> Result<TrainedState> {
    config.validate(n_tasks)?;
    let mut registry = base.registry.clone();
    let model = base.model.clone();
    let mcfg = model.config;
    let (mut pools, mut context, mut encoder, mut traces, mut buffer) =
        (Vec::new(), None, None, Vec::new(), None);
    match config.method {
        Method::Ours => {
            let n_pools = match config.pool_sharing {
                PoolSharing::PerLayer => mcfg.layers,
                PoolSharing::Global => 1,
            };
            let dims = config.pool_dims(mcfg.hidden);
            for p in 0..n_pools {
                let prefix = format!("pool.{p}");
                let seed = derive_seed(config.seed, "pool", p as u64, 0);
                pools.push(LowRankPool::init(
                    &mut registry,
                    &prefix,
                    dims,
                    seed,
                    !config.no_low_rank,
                )?);
            }
            context = Some(ContextWeights::init(&mut registry, n_tasks)?);
            encoder = Some(QueryEncoder::build(config, &mcfg)?);
            traces = vec![Vec::new(); n_pools];
        }
        Method::Sequential | Method::Joint => model.set_trainable(&mut registry, true),
        Method::Rehearsal => {
            model.set_trainable(&mut registry, true);
            buffer = Some(RehearsalBuffer::new());
        }
    }
    Ok(TrainedState {
        config: config.clone(),
        base_seed: base.seed,
        registry,
        model,
        pools,
        context,
        traces,
        encoder,
        completed: 0,
        global_step: 0,
        matrix: AccuracyMatrix::new(),
        buffer,
    })
}

fn latest_checkpoint(out_dir: &Path, n_tasks: usize) -> Option<PathBuf> {
    (0..n_tasks)
        .rev()
        .map(|p| checkpoint_path(out_dir, p))
        .find(|p| p.exists())
}

fn read_log(out_dir: &Path, keep_below: usize) -> Result<Vec<StepRecord>> {
    let path = out_dir.join(LOG_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.position < keep_below {
            out.push(rec);
        }
    }
    Ok(out)
}

fn write_log(out_dir: &Path, log: &[StepRecord]) -> Result<()> {
    let path = out_dir.join(LOG_FILE);
    let mut text = String::new();
    for rec in log {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs (or resumes) one configuration over `stream`.
pub fn run(
    stream: &[StreamTask],
    base: &BaseModel,
    config: &RunConfig,
    opts: RunOptions,
) -> Result<RunOutcome> {
    config.validate(stream.len())?;
    check_stream(stream, base)?;
    let order = config.order(stream.len())?;
    let n = stream.len();

    let mut resumed_from = None;
    let mut state = None;
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(path) = latest_checkpoint(dir, n) {
            let s = load_state(&path)?;
            if s.config != *config {
                return Err(Error::Config(format!(
                    "{} holds a run with a different configuration",
                    dir.display()
                )));
            }
            resumed_from = Some(s.completed);
            state = Some(s);
        }
        let resolved = serde_json::json!({
            "run": config,
            "model": base.model.config,
            "base_seed": base.seed,
            "tasks": order.iter().map(|&i| stream[i].name.clone()).collect::<Vec<_>>(),
        });
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&resolved)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
    }
    let mut state = match state {
        Some(s) => s,
        None => initial_state(base, config, n)?,
    };
    let mut log = match opts.out_dir {
        Some(dir) => read_log(dir, state.completed)?,
        None => Vec::new(),
    };

    while state.completed < n {
        if opts.stop_after.is_some_and(|s| state.completed >= s) {
            break;
        }
        let p = state.completed;
        if config.method == Method::Joint {
            let all: Vec<&InstructionInstance> =
                order.iter().flat_map(|&i| stream[i].train.iter()).collect();
            train_full_phase(&mut state, &all, order[0], 0, &mut log)?;
            let cache = state.inference_cache()?;
            let mut finals = Vec::with_capacity(n);
            for &i in &order {
                finals.push(evaluate_with(
                    &state,
                    &cache,
                    eval_slice(&stream[i], config),
                )?);
            }
            for k in 1..=n {
                state.matrix.push_row(finals[..k].to_vec())?;
            }
            state.completed = n;
        } else {
            let task = &stream[order[p]];
            match config.method {
                Method::Ours => train_task_ours(&mut state, task, order[p], p, &mut log)?,
                _ => {
                    let fresh: Vec<&InstructionInstance> = task.train.iter().collect();
                    train_full_phase(&mut state, &fresh, order[p], p, &mut log)?;
                    if let Some(buffer) = &mut state.buffer {
                        let cap =
                            (config.rehearsal_fraction * task.train.len() as f64).ceil() as usize;
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            config.seed,
                            "reservoir",
                            p as u64,
                            0,
                        ));
                        buffer.absorb(&task.train, cap, &mut rng);
                    }
                }
            }
            let cache = state.inference_cache()?;
            let mut row = Vec::with_capacity(p + 1);
            for &i in &order[..=p] {
                row.push(evaluate_with(
                    &state,
                    &cache,
                    eval_slice(&stream[i], config),
                )?);
            }
            state.matrix.push_row(row)?;
            state.completed = p + 1;
        }
        if let Some(dir) = opts.out_dir {
            write_log(dir, &log)?;
            save_state(&state, &checkpoint_path(dir, state.completed - 1))?;
        }
    }
    if let Some(dir) = opts.out_dir {
        if state.completed == n {
            let names: Vec<String> = order.iter().map(|&i| stream[i].name.clone()).collect();
            write_metrics(dir, &state, &names)?;
        }
    }
    Ok(RunOutcome {
        state,
        log,
        resumed_from,
    })
}

/// Runs the dual-increment method.
pub fn train_continual(
    stream: &[StreamTask],
    base: &BaseModel,
    config: &RunConfig,
) -> Result<RunOutcome> {
    if config.method != Method::Ours {
        return Err(Error::Config(format!(
            "train_continual needs method ours, got {}",
            config.method
        )));
    }
    run(stream, base, config, RunOptions::default())
}

/// Runs one of the full fine-tuning baselines.
pub fn run_baseline(
    stream: &[StreamTask],
    base: &BaseModel,
    config: &RunConfig,
) -> Result<RunOutcome> {
    if !config.method.is_full_finetune() {
        return Err(Error::Config(format!(
            "{} is not a baseline method",
            config.method
        )));
    }
    run(stream, base, config, RunOptions::default())
}

fn eval_slice<'a>(task: &'a StreamTask, config: &RunConfig) -> &'a [InstructionInstance] {
    let n = config
        .eval_limit
        .map_or(task.eval.len(), |l| l.min(task.eval.len()));
    &task.eval[..n.max(1)]
}

fn shuffled(n: usize, seed: u64, position: usize, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", position as u64, epoch as u64));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Model-side form of a stream instance.
pub fn encode_instance(inst: &InstructionInstance) -> EncodedInstance {
    EncodedInstance::new(inst.features.clone(), &inst.instruction, &inst.response)
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let total = g.add_n(terms)?;
    g.scale(total, 1.0 / terms.len() as f64)
}

/// Full-model fine-tuning over `fresh` (plus replayed instances when a
/// buffer is present).
fn train_full_phase(
    state: &mut TrainedState,
    fresh: &[&InstructionInstance],
    task_id: usize,
    position: usize,
    log: &mut Vec<StepRecord>,
) -> Result<()> {
    let config = state.config.clone();
    let replay = state.buffer.as_ref().is_some_and(|b| !b.is_empty());
    let replay_n = if replay {
        config.batch_size / config.rehearsal_every
    } else {
        0
    };
    let fresh_n = config.batch_size - replay_n;
    let steps_per_epoch = ceil_div(fresh.len(), fresh_n);
    let schedule = LrSchedule::cosine(
        config.full_lr,
        config.warmup_ratio,
        config.epochs * steps_per_epoch,
    )?;
    let mut opt = Optimizer::new(config.optimizer.kind());
    let mut local = 0;
    for epoch in 0..config.epochs {
        let order = shuffled(fresh.len(), config.seed, position, epoch);
        let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            "replay",
            position as u64,
            epoch as u64,
        ));
        for chunk in order.chunks(fresh_n) {
            let mut batch: Vec<&InstructionInstance> = chunk.iter().map(|&i| fresh[i]).collect();
            if let Some(buffer) = state.buffer.as_ref().filter(|_| replay) {
                batch.extend(buffer.sample(replay_n, &mut replay_rng));
            }
            let grads;
            let l_ar;
            {
                let mut g = Graph::new(&state.registry);
                let mut terms = Vec::with_capacity(batch.len());
                for inst in &batch {
                    terms.push(state.model.ar_loss_graph(
                        &mut g,
                        &encode_instance(inst),
                        &GraphAdapt::base(),
                    )?);
                }
                let loss = batch_mean(&mut g, &terms)?;
                l_ar = g.scalar(loss);
                grads = g.backward(loss)?;
            }
            state.registry.accumulate(&grads, 1.0)?;
            local += 1;
            state.global_step += 1;
            opt.step(&mut state.registry, &schedule, local)?;
            log.push(StepRecord {
                task: task_id,
                position,
                epoch,
                step: state.global_step,
                l_align: None,
                l_ar,
                lr: schedule.lr(local),
                selected_indices: Vec::new(),
                mean_selected_cos: None,
            });
        }
    }
    Ok(())
}

fn train_task_ours(
    state: &mut TrainedState,
    task: &StreamTask,
    task_id: usize,
    position: usize,
    log: &mut Vec<StepRecord>,
) -> Result<()> {
    let config = state.config.clone();
    let d = state.model.config.hidden;
    for traces in &mut state.traces {
        traces.push(TaskTrace::new(task_id, d));
    }
    let context = state
        .context
        .ok_or_else(|| Error::Contract("missing context weights".into()))?;
    if config.carry_context_weights {
        context.reset(&mut state.registry, 0);
    } else {
        context.reset(&mut state.registry, position + 1);
    }
    let steps_per_epoch = ceil_div(task.train.len(), config.batch_size);
    let schedule = LrSchedule::cosine(
        config.lr,
        config.warmup_ratio,
        config.epochs * steps_per_epoch,
    )?;
    let mut opt = Optimizer::new(config.optimizer.kind());
    let mut local = 0;
    for epoch in 0..config.epochs {
        let order = shuffled(task.train.len(), config.seed, position, epoch);
        for chunk in order.chunks(config.batch_size) {
            local += 1;
            state.global_step += 1;
            let (l_ar, l_align, selected, mean_cos) =
                step_ours(state, task, chunk, position, &context)?;
            opt.step(&mut state.registry, &schedule, local)?;
            log.push(StepRecord {
                task: task_id,
                position,
                epoch,
                step: state.global_step,
                l_align,
                l_ar,
                lr: schedule.lr(local),
                selected_indices: selected,
                mean_selected_cos: Some(mean_cos),
            });
        }
    }
    let TrainedState {
        registry,
        pools,
        traces,
        ..
    } = state;
    for (pool, traces) in pools.iter().zip(traces.iter_mut()) {
        traces[position].freeze(pool, registry, config.trace_weighting)?;
    }
    Ok(())
}

type StepStats = (f64, Option<f64>, Vec<Vec<usize>>, f64);

/// Loss nodes recorded for one training instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceLoss {
    pub l_ar: Var,
    pub l_align: Option<Var>,
}

/// Records `L_ar` and `L_align` for one instance given its per-pool
/// selections. `traces[p]` holds pool `p`'s traces up to the current task.
#[allow(clippy::too_many_arguments)]
fn instance_graph(
    g: &mut Graph,
    config: &RunConfig,
    model: &crate::model::ToyModel,
    pools: &[LowRankPool],
    vars: &mut [PoolVars],
    traces: &[&[TaskTrace]],
    context: &ContextWeights,
    q: &[f64],
    selected: &[Vec<usize>],
    inst: &InstructionInstance,
) -> Result<InstanceLoss> {
    let mut per_pool = Vec::with_capacity(pools.len());
    let mut aligns = Vec::new();
    for (p, pool) in pools.iter().enumerate() {
        let idx = &selected[p];
        let theta = if config.drop_intrinsic {
            None
        } else {
            Some(intrinsic_increment_graph(
                g,
                pool,
                &mut vars[p],
                q,
                idx,
                config.intrinsic_weighting,
                true,
            )?)
        };
        let delta = if config.drop_contextual {
            None
        } else {
            contextual_increment_graph(g, context, traces[p], config.context_include_current)?
        };
        if !config.drop_align_loss {
            aligns.push(alignment_loss_graph(g, pool, &mut vars[p], q, idx)?);
        }
        per_pool.push(LayerIncrement { theta, delta });
    }
    let layer_pool = |l: usize| match config.pool_sharing {
        PoolSharing::PerLayer => l,
        PoolSharing::Global => 0,
    };
    let adapt = GraphAdapt {
        position: config.adapt_position,
        layers: (0..model.layers.len())
            .map(|l| per_pool[layer_pool(l)])
            .collect(),
    };
    let l_ar = model.ar_loss_graph(g, &encode_instance(inst), &adapt)?;
    let l_align = if aligns.is_empty() {
        None
    } else {
        Some(g.add_n(&aligns)?)
    };
    Ok(InstanceLoss { l_ar, l_align })
}

impl TrainedState {
    /// Records the training losses of `inst` on `g` against the current
    /// traces, as the step at task `position` would, without updating them.
    pub fn instance_losses(
        &self,
        g: &mut Graph,
        vars: &mut [PoolVars],
        inst: &InstructionInstance,
        position: usize,
    ) -> Result<InstanceLoss> {
        let encoder = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Contract("missing query encoder".into()))?;
        let context = self
            .context
            .as_ref()
            .ok_or_else(|| Error::Contract("missing context weights".into()))?;
        let q = encoder.query(inst.features.as_deref(), &inst.instruction)?;
        let selected: Vec<Vec<usize>> = self
            .pools
            .iter()
            .map(|p| p.select_top_m(&self.registry, &q, self.config.top_m))
            .collect::<Result<_>>()?;
        let traces: Vec<&[TaskTrace]> = self
            .traces
            .iter()
            .map(|t| &t[..(position + 1).min(t.len())])
            .collect();
        instance_graph(
            g,
            &self.config,
            &self.model,
            &self.pools,
            vars,
            &traces,
            context,
            &q,
            &selected,
            inst,
        )
    }
}

/// Records one batch graph, back-propagates, and leaves the gradients in the
/// registry.
fn step_ours(
    state: &mut TrainedState,
    task: &StreamTask,
    chunk: &[usize],
    position: usize,
    context: &ContextWeights,
) -> Result<StepStats> {
    let TrainedState {
        config,
        registry,
        model,
        pools,
        traces,
        encoder,
        ..
    } = state;
    let encoder = encoder
        .as_ref()
        .ok_or_else(|| Error::Contract("missing query encoder".into()))?;
    let products: Vec<_> = pools
        .iter()
        .map(|p| p.products(registry))
        .collect::<Result<_>>()?;
    for (p, tr) in traces.iter_mut().enumerate() {
        tr[position].refresh(&products[p], config.trace_weighting)?;
    }

    let grads;
    let (mut ar_sum, mut align_sum, mut cos_sum, mut cos_n) = (0.0, 0.0, 0.0, 0usize);
    let mut selected_log = Vec::with_capacity(chunk.len());
    {
        let registry: &ParamRegistry = registry;
        let mut g = Graph::new(registry);
        let mut vars: Vec<PoolVars> = pools.iter().map(PoolVars::new).collect();
        let mut terms = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let inst = &task.train[i];
            let ctx = |e: Error| e.context(format!("task {} instance {i}", task.name));
            let q = encoder
                .query(inst.features.as_deref(), &inst.instruction)
                .map_err(ctx)?;
            let mut selected = Vec::with_capacity(pools.len());
            for (p, pool) in pools.iter().enumerate() {
                let cos = pool.cosines(registry, &q).map_err(ctx)?;
                let idx = top_m(&cos, config.top_m)?;
                cos_sum += idx.iter().map(|&j| cos[j]).sum::<f64>();
                cos_n += idx.len();
                let trace = &mut traces[p][position];
                let before = trace.selected_indices().len();
                trace.record(&idx)?;
                if trace.selected_indices().len() != before
                    || config.trace_weighting != Default::default()
                {
                    trace.refresh(&products[p], config.trace_weighting)?;
                }
                selected.push(idx);
            }
            let views: Vec<&[TaskTrace]> = traces.iter().map(|t| &t[..=position]).collect();
            let losses = instance_graph(
                &mut g, config, model, pools, &mut vars, &views, context, &q, &selected, inst,
            )
            .map_err(ctx)?;
            ar_sum += g.scalar(losses.l_ar);
            let total = match losses.l_align {
                Some(a) => {
                    align_sum += g.scalar(a);
                    g.add(losses.l_ar, a)?
                }
                None => losses.l_ar,
            };
            terms.push(total);
            selected_log.push(selected.swap_remove(0));
        }
        let loss = batch_mean(&mut g, &terms)?;
        grads = g.backward(loss)?;
    }
    registry.accumulate(&grads, 1.0)?;
    let b = chunk.len() as f64;
    let l_align = if config.drop_align_loss {
        None
    } else {
        Some(align_sum / b)
    };
    Ok((
        ar_sum / b,
        l_align,
        selected_log,
        cos_sum / cos_n.max(1) as f64,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `matrix.json` and `metrics.csv` for a completed run.
pub fn write_metrics(out_dir: &Path, state: &TrainedState, task_names: &[String]) -> Result<()> {
    let m = &state.matrix;
    let t = m.len();
    let joint = state.config.method == Method::Joint;
    let mut aa = Vec::with_capacity(t);
    let mut af = Vec::with_capacity(t);
    for k in 1..=t {
        aa.push(m.average_accuracy(k)?);
        af.push(if k >= 2 && !joint {
            Some(m.average_forgetting(k)?)
        } else {
            None
        });
    }
    let order = state.config.order_label(t);
    let doc = serde_json::json!({
        "method": state.config.method,
        "order": order,
        "seed": state.config.seed,
        "tasks": task_names,
        "matrix": m,
        "AA": aa,
        "AF": af,
    });
    let path = out_dir.join(MATRIX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join(METRICS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut text = String::from("method,order,seed,task");
    for j in 1..=t {
        text.push_str(&format!(",a_{j}"));
    }
    text.push_str(",AA,AF\n");
    for k in 1..=t {
        text.push_str(&format!(
            "{},{},{},{}",
            state.config.method,
            order,
            state.config.seed,
            task_names[k - 1]
        ));
        for j in 1..=t {
            text.push(',');
            text.push_str(&fmt_opt(m.get(k, j)));
        }
        text.push_str(&format!(",{},{}\n", aa[k - 1], fmt_opt(af[k - 1])));
    }
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

/// Rebuilds the accuracy matrix from per-task checkpoints.
pub fn accuracy_matrix(
    stream: &[StreamTask],
    checkpoints: &[TrainedState],
) -> Result<AccuracyMatrix> {
    let mut m = AccuracyMatrix::new();
    for (k, state) in checkpoints.iter().enumerate() {
        if state.completed != k + 1 {
            return Err(Error::Contract(format!(
                "checkpoint {} covers {} tasks, expected {}",
                k + 1,
                state.completed,
                k + 1
            )));
        }
        let order = state.config.order(stream.len())?;
        let cache = state.inference_cache()?;
        let mut row = Vec::with_capacity(k + 1);
        for &i in &order[..=k] {
            row.push(evaluate_with(
                state,
                &cache,
                eval_slice(&stream[i], &state.config),
            )?);
        }
        m.push_row(row)?;
    }
    Ok(m)
}

/// Loads every per-task checkpoint of a run directory, in order.
pub fn load_checkpoints(out_dir: &Path, n_tasks: usize) -> Result<Vec<TrainedState>> {
    let mut out = Vec::new();
    for p in 0..n_tasks {
        let path = checkpoint_path(out_dir, p);
        if !path.exists() {
            return Err(Error::Contract(format!(
                "missing checkpoint {}",
                path.display()
            )));
        }
        out.push(load_state(&path)?);
    }
    Ok(out)
}
