mod common;

use std::collections::BTreeSet;
use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{quick_config, small_base, stream, two_task_stream};
use dualinc::autodiff::{Graph, ParamId, ParamRegistry};
use dualinc::data::{InstructionInstance, StreamTask, TaskFamily};
use dualinc::engine::{
    accuracy_matrix, initial_state, load_checkpoints, load_state, run, run_baseline, save_state,
    state_bytes, train_continual, AccuracyMatrix, BaseModel, Method, RehearsalBuffer, RunConfig,
    RunOptions, RunOutcome, TrainedState, MATRIX_FILE, METRICS_FILE,
};
use dualinc::model::{pretrain_base, EncodedInstance, PretrainConfig, ToyModel};
use dualinc::pool::{PairFactors, PoolVars};
use dualinc::{vocab, Error};

/// Share of eval instances whose selection meets their task's trace on the
/// two-task fixture must stay at or above this.
const TRACE_HIT_BOUND: f64 = 0.9;

fn run_quick(tasks: &[StreamTask], config: &RunConfig) -> RunOutcome {
    run(tasks, small_base(), config, RunOptions::default()).unwrap()
}

fn registries_equal(a: &ParamRegistry, b: &ParamRegistry) -> bool {
    a.len() == b.len() && a.ids().all(|id| a.get(id).bitwise_eq(b.get(id)))
}

fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
    AccuracyMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

fn key_ids(state: &TrainedState) -> BTreeSet<ParamId> {
    state
        .pools
        .iter()
        .flat_map(|p| (0..p.len()).map(move |n| p.pair(n).key))
        .collect()
}

fn factor_ids(state: &TrainedState) -> BTreeSet<ParamId> {
    let mut out = BTreeSet::new();
    for p in &state.pools {
        for n in 0..p.len() {
            match p.pair(n).factors {
                PairFactors::LowRank { a, b } => {
                    out.insert(a);
                    out.insert(b);
                }
                PairFactors::Full { p } => {
                    out.insert(p);
                }
            }
        }
    }
    out
}

fn grad_ids(state: &TrainedState, inst: &InstructionInstance, align: bool) -> BTreeSet<ParamId> {
    let mut g = Graph::new(&state.registry);
    let mut vars: Vec<PoolVars> = state.pools.iter().map(PoolVars::new).collect();
    let losses = state.instance_losses(&mut g, &mut vars, inst, 1).unwrap();
    let loss = if align {
        losses.l_align.unwrap()
    } else {
        losses.l_ar
    };
    g.backward(loss).unwrap().param_ids().collect()
}

#[test]
fn forgetting_hand_examples() {
    let m = matrix(&[&[0.8], &[0.7, 0.9], &[0.6, 0.85, 0.95]]);
    assert!((m.forgetting(3, 1).unwrap() - 0.2).abs() < 1e-12);
    assert!((m.forgetting(3, 2).unwrap() - 0.05).abs() < 1e-12);
    assert!((m.average_forgetting(3).unwrap() - 0.125).abs() < 1e-12);
    let m = matrix(&[&[0.9], &[0.6, 0.8]]);
    assert!((m.average_forgetting(2).unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn average_accuracy_matches_reported_rows() {
    let m = matrix(&[
        &[0.0],
        &[0.0, 0.0],
        &[0.0; 3],
        &[0.1530, 0.1782, 0.6071, 0.5450],
    ]);
    assert!((m.average_accuracy(4).unwrap() - 0.370825).abs() < 1e-12);
    let row = [
        0.5867, 0.4999, 0.5766, 0.6253, 0.4232, 0.1625, 0.6433, 0.7491,
    ];
    let rows: Vec<Vec<f64>> = (1..=8).map(|k| row[..k].to_vec()).collect();
    let m = AccuracyMatrix::from_rows(rows).unwrap();
    assert!((m.average_accuracy(8).unwrap() - 0.533325).abs() < 1e-12);
    let m = matrix(&[&[0.4], &[0.4, 0.4], &[0.4, 0.4, 0.4]]);
    assert!((m.average_accuracy(3).unwrap() - 0.4).abs() < 1e-12);
}

#[test]
fn forgetting_contracts() {
    let m = matrix(&[&[0.2], &[0.2, 0.5], &[0.2, 0.5, 0.7]]);
    assert_eq!(m.average_forgetting(3).unwrap(), 0.0);
    assert!(matches!(m.average_forgetting(1), Err(Error::Contract(_))));
    assert!(matches!(m.average_forgetting(4), Err(Error::Contract(_))));
    let mut m = AccuracyMatrix::new();
    assert!(matches!(m.push_row(vec![1.2]), Err(Error::Contract(_))));
    assert!(matches!(
        m.push_row(vec![0.1, 0.2]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn single_task_has_no_contextual_increment() {
    let tasks = &two_task_stream()[..1];
    let with = run_quick(tasks, &quick_config(Method::Ours));
    let without = run_quick(
        tasks,
        &RunConfig {
            drop_contextual: true,
            ..quick_config(Method::Ours)
        },
    );
    assert!(registries_equal(
        &with.state.registry,
        &without.state.registry
    ));
    assert_eq!(with.state.matrix, without.state.matrix);
    assert_eq!(with.state.matrix.len(), 1);
}

#[test]
fn traces_freeze_at_task_boundaries() {
    let tasks = two_task_stream();
    let config = quick_config(Method::Ours);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path()),
        stop_after: Some(1),
    };
    let first = run(&tasks, small_base(), &config, opts).unwrap();
    assert_eq!(first.state.traces[0].len(), 1);
    assert!(first.state.traces[0][0].is_frozen());
    assert!(!first.state.traces[0][0].selected_indices().is_empty());
    let full = run(&tasks, small_base(), &config, RunOptions::default()).unwrap();
    let traces = &full.state.traces[0];
    assert_eq!(traces.len(), 2);
    assert!(traces.iter().all(|t| t.is_frozen()));
    assert_eq!(traces[0], first.state.traces[0][0]);
}

#[test]
fn increment_parameter_count_matches_registry() {
    let tasks = two_task_stream();
    let config = quick_config(Method::Ours);
    let state = initial_state(small_base(), &config, tasks.len()).unwrap();
    let d = small_base().model.config.hidden;
    let pools = small_base().model.config.layers;
    let closed = config.pool_size * (2 * d * config.rank + config.embed_dim) * pools + tasks.len();
    assert_eq!(state.increment_param_count(), closed);
    assert_eq!(state.registry.trainable_count(), closed);
    let trained = run_quick(&tasks, &config).state;
    assert_eq!(trained.registry.trainable_count(), closed);
}

#[test]
fn base_weights_stay_bitwise_frozen() {
    let base = small_base();
    let state = run_quick(&two_task_stream(), &quick_config(Method::Ours)).state;
    for id in base.model.param_ids() {
        assert!(state.registry.get(id).bitwise_eq(base.registry.get(id)));
        assert!(!state.registry.is_trainable(id));
    }
}

#[test]
fn inference_is_deterministic() {
    let tasks = two_task_stream();
    let state = run_quick(&tasks, &quick_config(Method::Ours)).state;
    for inst in tasks.iter().flat_map(|t| &t.eval) {
        let a = state
            .infer(inst.features.as_deref(), &inst.instruction)
            .unwrap();
        let b = state
            .infer(inst.features.as_deref(), &inst.instruction)
            .unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn eval_selections_meet_their_task_trace() {
    let tasks = two_task_stream();
    let state = run_quick(&tasks, &quick_config(Method::Ours)).state;
    let (mut hits, mut total) = (0usize, 0usize);
    for (position, task) in tasks.iter().enumerate() {
        let trace = state.traces[0][position].selected_indices();
        for inst in &task.eval {
            let sel = state
                .intrinsic(inst.features.as_deref(), &inst.instruction)
                .unwrap();
            total += 1;
            hits += usize::from(sel[0].1.iter().any(|i| trace.contains(i)));
        }
    }
    let share = hits as f64 / total as f64;
    println!("trace hit share {share:.3}");
    assert!(share >= TRACE_HIT_BOUND, "share {share}");
}

#[test]
fn joint_equals_sequential_for_one_task() {
    let tasks = &stream(&[TaskFamily::SortTokens, TaskFamily::Parity], 32, 8, 2)[..1];
    let seq = run_baseline(tasks, small_base(), &quick_config(Method::Sequential)).unwrap();
    let joint = run_baseline(tasks, small_base(), &quick_config(Method::Joint)).unwrap();
    assert!(registries_equal(&seq.state.registry, &joint.state.registry));
    assert_eq!(seq.state.matrix, joint.state.matrix);
}

#[test]
fn sequential_changes_the_model() {
    let base = small_base();
    let state = run_baseline(&two_task_stream(), base, &quick_config(Method::Sequential))
        .unwrap()
        .state;
    assert!(base
        .model
        .param_ids()
        .into_iter()
        .any(|id| !state.registry.get(id).bitwise_eq(base.registry.get(id))));
}

#[test]
fn rehearsal_buffer_holds_one_percent() {
    let tasks = two_task_stream();
    let config = quick_config(Method::Rehearsal);
    let opts = RunOptions {
        out_dir: None,
        stop_after: Some(1),
    };
    let state = run(&tasks, small_base(), &config, opts).unwrap().state;
    let buffer = state.buffer.as_ref().unwrap();
    let expected = (0.01 * tasks[0].train.len() as f64).ceil() as usize;
    assert_eq!(buffer.capacity(), expected);
    assert_eq!(buffer.len(), expected);
    assert!(tasks[0].train.contains(&buffer.items()[0]));
}

#[test]
fn ours_is_not_a_baseline() {
    let r = run_baseline(
        &two_task_stream(),
        small_base(),
        &quick_config(Method::Ours),
    );
    assert!(matches!(r, Err(Error::Config(_))));
    let r = train_continual(
        &two_task_stream(),
        small_base(),
        &quick_config(Method::Joint),
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn ours_keeps_no_past_instances() {
    let tasks = two_task_stream();
    let state = run_quick(&tasks, &quick_config(Method::Ours)).state;
    assert!(state.buffer.is_none());
    let bytes = state_bytes(&state).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    for inst in tasks.iter().flat_map(|t| &t.train) {
        assert!(!text.contains(&inst.instruction), "{}", inst.instruction);
    }
    for trace in &state.traces[0] {
        let avg = trace.average();
        assert_eq!(avg.shape(), &[16, 16]);
    }
}

#[test]
fn overfit_model_scores_one() {
    let eval: Vec<InstructionInstance> = ["a b", "c d", "e f"]
        .iter()
        .map(|s| InstructionInstance {
            features: None,
            instruction: format!("reverse the sequence : {s}"),
            response: s.split(' ').rev().collect::<Vec<_>>().join(" "),
        })
        .collect();
    let corpus: Vec<EncodedInstance> = eval.iter().map(dualinc::engine::encode_instance).collect();
    let train = PretrainConfig {
        steps: 200,
        batch_size: 3,
        lr: 1e-2,
        warmup_ratio: 0.0,
    };
    let (registry, model, _) = pretrain_base(common::small_model(), &corpus, &train, 0).unwrap();
    let base = BaseModel {
        registry,
        model,
        seed: 0,
    };
    let state = initial_state(&base, &quick_config(Method::Sequential), 1).unwrap();
    assert_eq!(state.evaluate(&eval).unwrap(), 1.0);
}

fn binomial_upper_tail(n: u64, p: f64, above: u64) -> f64 {
    let ln_choose = |k: u64| -> f64 {
        (1..=k)
            .map(|i| ((n - k + i) as f64).ln() - (i as f64).ln())
            .sum()
    };
    ((above + 1)..=n)
        .map(|k| (ln_choose(k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp())
        .sum()
}

#[test]
fn untrained_model_is_near_chance() {
    // one response token out of a 64-way vocabulary, then end of sequence
    let p = 1.0 / vocab::SIZE as f64;
    assert!(binomial_upper_tail(200, p, 20) < 1e-3);
    let words: Vec<&str> = (vocab::UNK + 1..vocab::SIZE).map(vocab::symbol).collect();
    let eval: Vec<InstructionInstance> = (0..200)
        .map(|i| InstructionInstance {
            features: None,
            instruction: "which signal is this".into(),
            response: words[(i * 7) % words.len()].to_string(),
        })
        .collect();
    for seed in 0..10 {
        let mut registry = ParamRegistry::new();
        let model = ToyModel::init(common::small_model(), &mut registry, seed).unwrap();
        model.set_trainable(&mut registry, false);
        let base = BaseModel {
            registry,
            model,
            seed,
        };
        let state = initial_state(&base, &quick_config(Method::Sequential), 1).unwrap();
        let acc = state.evaluate(&eval).unwrap();
        assert!(acc <= 0.10, "seed {seed}: {acc}");
    }
}

#[test]
fn accuracy_ignores_eval_order() {
    let tasks = two_task_stream();
    let state = run_quick(&tasks, &quick_config(Method::Ours)).state;
    let mut eval = tasks[0].eval.clone();
    let a = state.evaluate(&eval).unwrap();
    eval.reverse();
    assert_eq!(a.to_bits(), state.evaluate(&eval).unwrap().to_bits());
    assert!(matches!(state.evaluate(&[]), Err(Error::Data(_))));
}

#[test]
fn state_round_trip_is_bitwise() {
    let tasks = two_task_stream();
    for method in Method::ALL {
        let state = run_quick(&tasks, &quick_config(method)).state;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_state(&state, &path).unwrap();
        let loaded = load_state(&path).unwrap();
        assert_eq!(state_bytes(&loaded).unwrap(), fs::read(&path).unwrap());
        for inst in tasks.iter().flat_map(|t| &t.eval) {
            assert_eq!(
                state
                    .infer(inst.features.as_deref(), &inst.instruction)
                    .unwrap(),
                loaded
                    .infer(inst.features.as_deref(), &inst.instruction)
                    .unwrap()
            );
        }
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let state = initial_state(small_base(), &quick_config(Method::Ours), 2).unwrap();
    let bytes = state_bytes(&state).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");

    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(
            matches!(load_state(&path), Err(Error::Corrupt { .. })),
            "cut {cut}"
        );
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() - 100;
    flipped[mid] ^= 1;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_state(&path), Err(Error::Corrupt { .. })));

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&path, &versioned).unwrap();
    assert!(matches!(
        load_state(&path),
        Err(Error::Version { found: 99, .. })
    ));
}

#[test]
fn interrupted_run_resumes_to_identical_results() {
    let tasks = two_task_stream();
    for method in [Method::Ours, Method::Rehearsal] {
        let config = quick_config(method);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let straight = run(
            &tasks,
            small_base(),
            &config,
            RunOptions {
                out_dir: Some(a.path()),
                stop_after: None,
            },
        )
        .unwrap();
        let partial = run(
            &tasks,
            small_base(),
            &config,
            RunOptions {
                out_dir: Some(b.path()),
                stop_after: Some(1),
            },
        )
        .unwrap();
        assert_eq!(partial.state.completed, 1);
        let resumed = run(
            &tasks,
            small_base(),
            &config,
            RunOptions {
                out_dir: Some(b.path()),
                stop_after: None,
            },
        )
        .unwrap();
        assert_eq!(resumed.resumed_from, Some(1));
        assert_eq!(
            state_bytes(&straight.state).unwrap(),
            state_bytes(&resumed.state).unwrap()
        );
        assert_eq!(straight.log, resumed.log);
        for file in [METRICS_FILE, MATRIX_FILE] {
            assert_eq!(
                fs::read(a.path().join(file)).unwrap(),
                fs::read(b.path().join(file)).unwrap()
            );
        }
    }
}

#[test]
fn resuming_with_another_config_fails() {
    let tasks = two_task_stream();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path()),
        stop_after: Some(1),
    };
    run(&tasks, small_base(), &quick_config(Method::Ours), opts).unwrap();
    let other = RunConfig {
        seed: 5,
        ..quick_config(Method::Ours)
    };
    assert!(matches!(
        run(&tasks, small_base(), &other, opts),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoints_rebuild_the_matrix() {
    let tasks = two_task_stream();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(
        &tasks,
        small_base(),
        &quick_config(Method::Ours),
        RunOptions {
            out_dir: Some(dir.path()),
            stop_after: None,
        },
    )
    .unwrap();
    let checkpoints = load_checkpoints(dir.path(), tasks.len()).unwrap();
    let m = accuracy_matrix(&tasks, &checkpoints).unwrap();
    assert_eq!(&m, outcome.matrix());
    assert!(m.rows().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert!(matches!(
        accuracy_matrix(&tasks, &checkpoints[1..]),
        Err(Error::Contract(_))
    ));
    fs::remove_file(dualinc::engine::checkpoint_path(dir.path(), 1)).unwrap();
    assert!(matches!(
        load_checkpoints(dir.path(), tasks.len()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn logged_metrics_match_the_serialized_matrix() {
    let tasks = stream(
        &[
            TaskFamily::Reverse,
            TaskFamily::CopyMasked,
            TaskFamily::FeatureClassify,
        ],
        24,
        8,
        4,
    );
    let dir = tempfile::tempdir().unwrap();
    run(
        &tasks,
        small_base(),
        &quick_config(Method::Ours),
        RunOptions {
            out_dir: Some(dir.path()),
            stop_after: None,
        },
    )
    .unwrap();
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(MATRIX_FILE)).unwrap()).unwrap();
    let m: AccuracyMatrix = serde_json::from_value(doc["matrix"].clone()).unwrap();
    for k in 1..=3 {
        let aa = doc["AA"][k - 1].as_f64().unwrap();
        assert!((aa - m.average_accuracy(k).unwrap()).abs() < 1e-12);
        if k >= 2 {
            let af = doc["AF"][k - 1].as_f64().unwrap();
            assert!((af - m.average_forgetting(k).unwrap()).abs() < 1e-12);
        } else {
            assert!(doc["AF"][0].is_null());
        }
    }
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,order,seed,task,a_1,a_2,a_3,AA,AF"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn losses_reach_only_their_own_parameters() {
    let tasks = two_task_stream();
    let mut state = run_quick(&tasks, &quick_config(Method::Ours)).state;
    let keys = key_ids(&state);
    let factors = factor_ids(&state);
    let context = state.context.unwrap().id();
    let inst = &tasks[1].train[0];

    let ar = grad_ids(&state, inst, false);
    assert!(ar.is_disjoint(&keys));
    assert!(ar.contains(&context));
    assert!(!ar.is_disjoint(&factors));
    assert!(ar.iter().all(|id| factors.contains(id) || *id == context));

    let align = grad_ids(&state, inst, true);
    assert!(!align.is_empty());
    assert!(align.is_subset(&keys));

    state.config.drop_intrinsic = true;
    assert_eq!(grad_ids(&state, inst, false), BTreeSet::from([context]));
}

#[test]
fn dropping_the_alignment_loss_is_logged() {
    let tasks = two_task_stream();
    let config = RunConfig {
        drop_align_loss: true,
        ..quick_config(Method::Ours)
    };
    let log = run_quick(&tasks, &config).log;
    assert!(log.iter().all(|r| r.l_align.is_none()));
    let cos: Vec<f64> = log.iter().filter_map(|r| r.mean_selected_cos).collect();
    assert!(cos.iter().all(|c| c.is_finite()));
    println!(
        "selected cosine without alignment: first {:.3} last {:.3}",
        cos[0],
        cos[cos.len() - 1]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn reservoir_inclusion_is_uniform(seed in any::<u64>()) {
        let items: Vec<InstructionInstance> = (0..20)
            .map(|i| InstructionInstance {
                features: None,
                instruction: format!("item {i}"),
                response: "x".into(),
            })
            .collect();
        let trials = 4000;
        let mut counts = [0usize; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..trials {
            let mut buffer = RehearsalBuffer::new();
            buffer.absorb(&items, 5, &mut rng);
            prop_assert_eq!(buffer.len(), 5);
            for kept in buffer.items() {
                counts[items.iter().position(|i| i == kept).unwrap()] += 1;
            }
        }
        // inclusion probability 1/4; 5 sigma of the per-item binomial
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            prop_assert!((c as f64 - trials as f64 * 0.25).abs() < 5.0 * sigma);
        }
    }
}
