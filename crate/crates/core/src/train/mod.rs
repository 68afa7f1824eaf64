//! Pretraining and fine-tuning loops, task tables, metrics and model
//! checkpoints.
//!
//! Every random choice in both loops is drawn from a stream derived from the
//! run seed, a purpose tag and the step index, so reruns with equal seeds
//! produce identical parameters and metric streams.

mod finetune;
mod head;
mod metrics;
mod pretrain;
mod task;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use finetune::{evaluate, finetune, resolve_entities, Entity, FinetuneConfig, FinetuneOutcome, Metric, Regime, TaskModel};
pub use head::{HeadMeta, TaskHead, HEAD_PREFIX};
pub use metrics::{append_metrics, auc_roc, mae, metrics_to_jsonl, read_metrics, MetricsRecord};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome, PretrainSampler};
pub use task::{load_task, write_task, LabelKind, Split, TaskMeta, TaskRow, TaskTable};

use crate::backbone::{Backbone, BackboneMeta, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::graph::schema_graph;
use crate::relational::DatabaseSchema;
use crate::seeding::derive_seed;
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamStore};

/// Why a training loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxSteps,
    EarlyStopping,
    TimeLimitExceeded,
}

/// Metadata stored in every checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub backbone: BackboneMeta,
    #[serde(default)]
    pub head: Option<HeadMeta>,
}

impl ModelMeta {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.manifest.meta.clone())
            .map_err(|e| Error::CorruptPayload(format!("checkpoint metadata: {e}")))
    }
}

pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const TRAIN_SAMPLE: u64 = 3;
    pub const TRAIN_NEGATIVES: u64 = 4;
    pub const TRAIN_CORRUPT: u64 = 5;
    pub const VAL_SAMPLE: u64 = 6;
    pub const VAL_NEGATIVES: u64 = 7;
    pub const VAL_CORRUPT: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const EVAL: u64 = 10;
}

pub(crate) fn stream_seed(seed: u64, tag: u64, i: u64) -> u64 {
    derive_seed(derive_seed(seed, tag), i)
}

pub(crate) fn stream_rng(seed: u64, tag: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, i))
}

/// Rebuilds the backbone stored in `ck` for a database with `schema`.
/// Fails with `VersionMismatch` when the checkpoint was trained on a
/// different architecture or schema.
pub fn load_backbone(schema: &DatabaseSchema, ck: &Checkpoint) -> Result<(Backbone, ParamStore)> {
    let meta = ModelMeta::from_checkpoint(ck)?;
    let graph = schema_graph(schema);
    if meta.backbone.config.hash(&graph) != ck.manifest.config_hash {
        return Err(Error::VersionMismatch(
            "checkpoint architecture or schema differs from the requested one".into(),
        ));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = Backbone::new(schema, meta.backbone.stats, meta.backbone.config, &mut store, &mut rng)
        .map_err(|e| Error::VersionMismatch(e.to_string()))?;
    store.load_values(&ck.params, BACKBONE_PREFIX)?;
    Ok((backbone, store))
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<std::path::Path>) -> Result<()> {
    write_checkpoint(ck, path)
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Checkpoint> {
    read_checkpoint(path)
}
