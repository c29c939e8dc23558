//! Seeded finite-difference cases, one function per differentiable
//! operation. Each returns the largest relative error between the
//! backward pass and central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualinc::autodiff::{finite_diff_grad, max_rel_err, Graph, ParamId, ParamRegistry, Tensor};
use dualinc::model::{
    AdaptPosition, AdaptedForwardSpec, EncodedInstance, GraphAdapt, LayerIncrement, ToyModel,
    ToyModelConfig,
};
use dualinc::pool::{
    alignment_loss_graph, contextual_increment, contextual_increment_graph,
    intrinsic_increment_graph, ContextWeights, IntrinsicWeighting, LowRankPool, PoolDims, PoolVars,
    TaskTrace, TraceWeighting,
};
use dualinc::vocab;

pub const CASES: u64 = 50;
pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn with_param(reg: &ParamRegistry, id: ParamId, value: &Tensor) -> ParamRegistry {
    let mut r = reg.clone();
    r.get_mut(id).data_mut().copy_from_slice(value.data());
    r
}

pub fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
    let a = random(&mut r, &[m, k]);
    let b = random(&mut r, &[k, n]);
    let w = random(&mut r, &[m, n]);
    let mut g = Graph::standalone();
    let av = g.leaf(&a.clone().with_requires_grad(true));
    let bv = g.leaf(&b.clone().with_requires_grad(true));
    let wv = g.constant(&w);
    let c = g.matmul(av, bv).unwrap();
    let cw = g.mul(c, wv).unwrap();
    let loss = g.sum(cw).unwrap();
    let grads = g.backward(loss).unwrap();
    let fa = finite_diff_grad(|t| Ok(weighted_sum(&t.matmul(&b)?, &w)), &a, H).unwrap();
    let fb = finite_diff_grad(|t| Ok(weighted_sum(&a.matmul(t)?, &w)), &b, H).unwrap();
    max_rel_err(grads.leaf(av).unwrap(), fa.data())
        .max(max_rel_err(grads.leaf(bv).unwrap(), fb.data()))
}

fn cross_entropy_direct(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / targets.len() as f64
}

pub fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, v) = (r.gen_range(1..6), r.gen_range(2..9));
    let mut logits = random(&mut r, &[n, v]);
    logits.data_mut().iter_mut().for_each(|x| *x *= 3.0);
    let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
    let mut g = Graph::standalone();
    let lv = g.leaf(&logits.clone().with_requires_grad(true));
    let loss = g.softmax_cross_entropy(lv, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    let fd = finite_diff_grad(|t| Ok(cross_entropy_direct(t, &targets)), &logits, H).unwrap();
    max_rel_err(grads.leaf(lv).unwrap(), fd.data())
}

fn cosine_direct(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn cosine(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(2..9);
    let a = random(&mut r, &[n]);
    let b = random(&mut r, &[n]);
    let mut g = Graph::standalone();
    let av = g.leaf(&a.clone().with_requires_grad(true));
    let bv = g.leaf(&b.clone().with_requires_grad(true));
    let c = g.cosine_sim(av, bv).unwrap();
    let grads = g.backward(c).unwrap();
    let fa = finite_diff_grad(|t| Ok(cosine_direct(t.data(), b.data())), &a, H).unwrap();
    let fb = finite_diff_grad(|t| Ok(cosine_direct(a.data(), t.data())), &b, H).unwrap();
    max_rel_err(grads.leaf(av).unwrap(), fa.data())
        .max(max_rel_err(grads.leaf(bv).unwrap(), fb.data()))
}

/// Pool with random keys and non-zero factors.
fn random_pool(r: &mut ChaCha8Rng, dims: PoolDims) -> (ParamRegistry, LowRankPool) {
    let mut reg = ParamRegistry::new();
    let pool = LowRankPool::init(&mut reg, "p", dims, r.gen(), true).unwrap();
    for id in pool.param_ids() {
        let shape = reg.get(id).shape().to_vec();
        let t = random(r, &shape);
        reg.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    (reg, pool)
}

fn unit(r: &mut ChaCha8Rng, e: usize) -> Vec<f64> {
    let v = random(r, &[e]).into_data();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Intrinsic composition, differentiated through keys and factors.
pub fn intrinsic(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = PoolDims {
        n: 6,
        d: 3,
        r: 2,
        e: 4,
    };
    let weighting = if seed.is_multiple_of(2) {
        IntrinsicWeighting::Cosine
    } else {
        IntrinsicWeighting::Softmax
    };
    loop {
        let (reg, pool) = random_pool(&mut r, dims);
        let q = unit(&mut r, dims.e);
        let idx = pool.select_top_m(&reg, &q, 3).unwrap();
        let sum: f64 = pool
            .cosines(&reg, &q)
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(i, _)| idx.contains(i))
            .map(|(_, c)| c)
            .sum();
        if weighting == IntrinsicWeighting::Cosine && sum.abs() < 0.5 {
            continue;
        }
        let w = random(&mut r, &[dims.d, dims.d]);
        let grads = {
            let mut g = Graph::new(&reg);
            let mut vars = PoolVars::new(&pool);
            let theta =
                intrinsic_increment_graph(&mut g, &pool, &mut vars, &q, &idx, weighting, false)
                    .unwrap();
            let wv = g.constant(&w);
            let prod = g.mul(theta, wv).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap()
        };
        let mut worst: f64 = 0.0;
        for &i in &idx {
            for id in pool
                .param_ids()
                .into_iter()
                .filter(|id| reg.name(*id).starts_with(&format!("p.{i}.")))
            {
                let fd = finite_diff_grad(
                    |t| {
                        let r2 = with_param(&reg, id, t);
                        Ok(weighted_sum(
                            &pool.intrinsic_increment(&r2, &q, &idx, weighting)?,
                            &w,
                        ))
                    },
                    reg.get(id),
                    H,
                )
                .unwrap();
                worst = worst.max(max_rel_err(grads.param(id).unwrap(), fd.data()));
            }
        }
        return worst;
    }
}

/// Contextual composition, differentiated through the raw weights.
pub fn contextual(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = PoolDims {
        n: 5,
        d: 3,
        r: 2,
        e: 4,
    };
    let (mut reg, pool) = random_pool(&mut r, dims);
    let t = r.gen_range(2..5);
    let ctx = ContextWeights::init(&mut reg, t).unwrap();
    let raw = random(&mut r, &[t]);
    reg.get_mut(ctx.id())
        .data_mut()
        .copy_from_slice(&raw.data().iter().map(|x| 2.0 * x).collect::<Vec<_>>());
    let mut traces = Vec::new();
    for l in 0..t {
        let mut tr = TaskTrace::new(l, dims.d);
        let picks: Vec<usize> = (0..2).map(|_| r.gen_range(0..dims.n)).collect();
        tr.update(&picks, &pool, &reg, TraceWeighting::Uniform)
            .unwrap();
        if l + 1 < t {
            tr.freeze(&pool, &reg, TraceWeighting::Uniform).unwrap();
        }
        traces.push(tr);
    }
    let w = random(&mut r, &[dims.d, dims.d]);
    let grads = {
        let mut g = Graph::new(&reg);
        let delta = contextual_increment_graph(&mut g, &ctx, &traces, true)
            .unwrap()
            .unwrap();
        let wv = g.constant(&w);
        let prod = g.mul(delta, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap()
    };
    let fd = finite_diff_grad(
        |v| {
            let r2 = with_param(&reg, ctx.id(), v);
            Ok(weighted_sum(
                &contextual_increment(&ctx, &r2, &traces, true, dims.d)?,
                &w,
            ))
        },
        reg.get(ctx.id()),
        H,
    )
    .unwrap();
    max_rel_err(grads.param(ctx.id()).unwrap(), fd.data())
}

pub fn tiny_model() -> ToyModelConfig {
    ToyModelConfig {
        hidden: 8,
        heads: 2,
        max_seq_len: 24,
        feature_dim: 3,
        ..Default::default()
    }
}

/// Random frozen model and a random instance with a short response.
pub fn random_instance(r: &mut ChaCha8Rng, feature_dim: usize) -> EncodedInstance {
    let word = |r: &mut ChaCha8Rng| r.gen_range(vocab::UNK + 1..vocab::SIZE);
    let mut prompt = vec![vocab::BOS];
    prompt.extend((0..r.gen_range(1..6)).map(|_| word(r)));
    prompt.push(vocab::SEP);
    let mut response: Vec<usize> = (0..r.gen_range(1..4)).map(|_| word(r)).collect();
    response.push(vocab::EOS);
    let features = r
        .gen_bool(0.5)
        .then(|| (0..feature_dim).map(|_| r.gen_range(-1.0..1.0)).collect());
    EncodedInstance {
        features,
        prompt,
        response,
    }
}

/// Adapted forward pass, differentiated through both increments.
pub fn adapted_forward(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = tiny_model();
    let mut reg = ParamRegistry::new();
    let model = ToyModel::init(cfg, &mut reg, seed).unwrap();
    model.set_trainable(&mut reg, false);
    let inst = random_instance(&mut r, cfg.feature_dim);
    let position = AdaptPosition::ALL_CHOICES[seed as usize % AdaptPosition::ALL_CHOICES.len()];
    let mut theta = random(&mut r, &[cfg.hidden, cfg.hidden]);
    let mut delta = random(&mut r, &[cfg.hidden, cfg.hidden]);
    theta.data_mut().iter_mut().for_each(|x| *x *= 0.3);
    delta.data_mut().iter_mut().for_each(|x| *x *= 0.3);
    let (gt, gd) = {
        let mut g = Graph::new(&reg);
        let tv = g.leaf(&theta.clone().with_requires_grad(true));
        let dv = g.leaf(&delta.clone().with_requires_grad(true));
        let adapt = GraphAdapt {
            position,
            layers: vec![LayerIncrement {
                theta: Some(tv),
                delta: Some(dv),
            }],
        };
        let loss = model.ar_loss_graph(&mut g, &inst, &adapt).unwrap();
        let grads = g.backward(loss).unwrap();
        (
            grads.leaf(tv).unwrap().to_vec(),
            grads.leaf(dv).unwrap().to_vec(),
        )
    };
    let spec = |t: &Tensor, d: &Tensor| AdaptedForwardSpec {
        position,
        delta_theta: Some(t.clone()),
        delta_delta: Some(d.clone()),
    };
    let ft = finite_diff_grad(|t| model.ar_loss(&reg, &inst, &spec(t, &delta)), &theta, H).unwrap();
    let fd = finite_diff_grad(|d| model.ar_loss(&reg, &inst, &spec(&theta, d)), &delta, H).unwrap();
    max_rel_err(&gt, ft.data()).max(max_rel_err(&gd, fd.data()))
}

/// Alignment loss, differentiated through the selected keys.
pub fn alignment(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = PoolDims {
        n: 6,
        d: 3,
        r: 2,
        e: 5,
    };
    let (reg, pool) = random_pool(&mut r, dims);
    let q = unit(&mut r, dims.e);
    let m = r.gen_range(1..=4);
    let idx = pool.select_top_m(&reg, &q, m).unwrap();
    let grads = {
        let mut g = Graph::new(&reg);
        let mut vars = PoolVars::new(&pool);
        let loss = alignment_loss_graph(&mut g, &pool, &mut vars, &q, &idx).unwrap();
        g.backward(loss).unwrap()
    };
    let mut worst: f64 = 0.0;
    for &i in &idx {
        let id = pool.pair(i).key;
        let fd = finite_diff_grad(
            |t| {
                let r2 = with_param(&reg, id, t);
                pool.alignment_loss(&r2, &q, &idx)
            },
            reg.get(id),
            H,
        )
        .unwrap();
        worst = worst.max(max_rel_err(grads.param(id).unwrap(), fd.data()));
    }
    worst
}

pub type Case = fn(u64) -> f64;

/// Every operation with its case function, for suites that sweep them all.
pub const OPERATIONS: [(&str, Case); 7] = [
    ("matmul", matmul),
    ("softmax_cross_entropy", cross_entropy),
    ("cosine_sim", cosine),
    ("intrinsic_increment", intrinsic),
    ("contextual_increment", contextual),
    ("adapted_forward", adapted_forward),
    ("alignment_loss", alignment),
];

/// Worst error over the seeded cases of one operation.
pub fn sweep(case: fn(u64) -> f64) -> f64 {
    (0..CASES).map(case).fold(0.0, f64::max)
}
