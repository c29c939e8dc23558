#![allow(dead_code)]

pub mod gradcheck;

use std::sync::OnceLock;

use dualinc::data::{
    generate_tasks, pretraining_corpus, StreamTask, TaskFamily, TaskFamilySpec,
    PRETRAIN_CORPUS_SEED,
};
use dualinc::engine::{encode_instance, BaseModel, Method, RunConfig};
use dualinc::model::{EncodedInstance, PretrainConfig, ToyModelConfig};

pub const FEATURE_DIM: usize = 8;

pub fn small_model() -> ToyModelConfig {
    ToyModelConfig {
        hidden: 16,
        heads: 2,
        ..Default::default()
    }
}

pub fn corpus(n_per_family: usize) -> Vec<EncodedInstance> {
    pretraining_corpus(PRETRAIN_CORPUS_SEED, n_per_family, FEATURE_DIM)
        .unwrap()
        .iter()
        .map(encode_instance)
        .collect()
}

/// Briefly pretrained narrow model for fast engine tests.
pub fn small_base() -> &'static BaseModel {
    static BASE: OnceLock<BaseModel> = OnceLock::new();
    BASE.get_or_init(|| {
        let train = PretrainConfig {
            steps: 150,
            batch_size: 8,
            ..Default::default()
        };
        BaseModel::pretrain(small_model(), &corpus(50), &train, 7)
            .unwrap()
            .0
    })
}

/// Default-size model pretrained with the reference recipe.
pub fn reference_base() -> &'static BaseModel {
    static BASE: OnceLock<BaseModel> = OnceLock::new();
    BASE.get_or_init(|| {
        BaseModel::pretrain(
            ToyModelConfig::default(),
            &corpus(2000),
            &PretrainConfig::default(),
            1,
        )
        .unwrap()
        .0
    })
}

pub fn stream(
    families: &[TaskFamily],
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Vec<StreamTask> {
    let specs: Vec<TaskFamilySpec> = families
        .iter()
        .map(|&f| TaskFamilySpec::new(f, n_train, n_eval))
        .collect();
    generate_tasks(&specs, seed, FEATURE_DIM).unwrap()
}

pub fn two_task_stream() -> Vec<StreamTask> {
    stream(
        &[TaskFamily::Reverse, TaskFamily::FeatureClassify],
        48,
        12,
        3,
    )
}

/// Small pool and batch so a run over [`two_task_stream`] takes well under
/// a second.
pub fn quick_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        pool_size: 8,
        top_m: 2,
        rank: 2,
        embed_dim: 16,
        batch_size: 8,
        epochs: 1,
        max_new_tokens: 6,
        ..Default::default()
    }
}
