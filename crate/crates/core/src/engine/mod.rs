//! Continual runs: the dual-increment method, the full fine-tuning
//! baselines, evaluation, metrics and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod state;
mod train;

use sha2::{Digest, Sha256};

pub use checkpoint::{
    base_model_bytes, load_base_model, load_state, save_base_model, save_state, state_bytes,
    CHECKPOINT_VERSION, MAGIC,
};
pub use config::{Method, OptimizerChoice, PoolSharing, RunConfig, SimilaritySource};
pub use metrics::{average_accuracy, average_forgetting, AccuracyMatrix};
pub use state::{
    evaluate, evaluate_with, BaseModel, InferenceCache, QueryEncoder, RehearsalBuffer, TrainedState,
};
pub use train::{
    accuracy_matrix, checkpoint_path, encode_instance, initial_state, load_checkpoints, run,
    run_baseline, train_continual, write_metrics, InstanceLoss, RunOptions, RunOutcome, StepRecord,
    CHECKPOINT_DIR, CONFIG_FILE, LOG_FILE, MATRIX_FILE, METRICS_FILE,
};

/// Independent sub-seed for one (purpose, a, b) triple.
pub fn derive_seed(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
