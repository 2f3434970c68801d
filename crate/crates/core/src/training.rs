//! Pre-training under the four regimes, fine-tuning, transfer, Adam,
//! checkpoints and learning-rate search.

mod checkpoint;
mod config;
mod data;
mod finetune;
mod optim;
mod pretrain;
mod search;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use config::{AttributeKind, Regime, RegimeConfig};
pub use data::{
    author_examples, author_representation, doc_examples, last_token_representation, pooled_hidden, AuthorExample,
    DocExample, DocSelection, TargetSpec,
};
pub use finetune::{finetune, prepare_task, FinetuneConfig, FinetuneOutcome, FinetuneRecord, TaskData, TaskModel, TaskSpec, TASK_HEAD};
pub use optim::{adam_step, Adam};
pub use pretrain::{
    epoch_order, predict_attribute, pretrain, steps_per_epoch, train_step, transfer_state, DevRecord, NoObserver,
    PretrainOptions, PretrainOutcome, StepLog, TrainObserver, TrainState, ATTR_HEAD,
};
pub use search::{lr_search, LrSearchResult, LrSpace};

/// SplitMix64 over the parts: independent, reproducible seeds for each
/// (run, purpose, step, item) combination.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
