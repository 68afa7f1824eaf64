use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{HeadMeta, TaskHead, HEAD_PREFIX};
use super::metrics::{auc_roc, mae, MetricsRecord};
use super::streams::*;
use super::task::{LabelKind, Split, TaskTable};
use super::{load_backbone, stream_rng, stream_seed, ModelMeta, StopReason};
use crate::backbone::{apply_bn_updates, Backbone, BackboneConfig, Mode, BACKBONE_PREFIX};
use crate::encoders::fit_encoders;
use crate::error::{Error, Result};
use crate::graph::{schema_graph, HeteroGraph, NodeId, NodeType};
use crate::relational::DatabaseSchema;
use crate::sampler::{neighbor_sample, NeighborSamplerConfig};
use crate::tensor::{AdamState, Checkpoint, Manifest, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Fresh backbone trained together with the head.
    #[serde(rename = "baseline")]
    Baseline,
    /// Pretrained backbone kept fixed; only the head trains.
    #[serde(rename = "frozen")]
    FrozenPretrained,
    /// Pretrained backbone trained together with the head.
    #[serde(rename = "finetune")]
    PretrainedFinetuned,
}

impl Regime {
    pub fn needs_checkpoint(self) -> bool {
        self != Regime::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::FrozenPretrained => "frozen",
            Regime::PretrainedFinetuned => "finetune",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Regime::Baseline),
            "frozen" => Ok(Regime::FrozenPretrained),
            "finetune" => Ok(Regime::PretrainedFinetuned),
            other => Err(Error::Config(format!(
                "unknown regime {other:?}; expected baseline, frozen or finetune"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub val_every: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub fanout: usize,
    pub regime: Regime,
    pub head_hidden: usize,
    pub seed: u64,
    pub eval_batch_size: usize,
    pub time_limit_seconds: Option<f64>,
    pub record_wall_clock: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-4,
            max_steps: 2000,
            val_every: 100,
            patience: 5,
            batch_size: 512,
            fanout: 128,
            regime: Regime::Baseline,
            head_hidden: 128,
            seed: 0,
            eval_batch_size: 512,
            time_limit_seconds: None,
            record_wall_clock: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.max_steps,
            self.val_every,
            self.patience,
            self.batch_size,
            self.fanout,
            self.head_hidden,
            self.eval_batch_size,
        ];
        if positive.contains(&0) || !(self.lr > 0.0) {
            return Err(Error::Config("fine-tuning settings must be positive".into()));
        }
        Ok(())
    }
}

/// A task row resolved to its entity node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entity {
    pub index: usize,
    pub label: f64,
    pub cutoff: Option<i64>,
    pub split: Split,
}

/// Maps task rows to nodes of the entity table.
pub fn resolve_entities(g: &HeteroGraph, task: &TaskTable) -> Result<(NodeType, Vec<Entity>)> {
    let t = g
        .schema
        .node_type_by_name(&task.meta.entity_table)
        .ok_or_else(|| Error::UnknownTable(task.meta.entity_table.clone()))?;
    let entities = task
        .rows
        .iter()
        .map(|r| {
            let index = g.node_by_key(t, &r.entity_key).ok_or_else(|| {
                Error::Integrity(format!(
                    "task key {:?} is not a primary key of {}",
                    r.entity_key, task.meta.entity_table
                ))
            })?;
            Ok(Entity {
                index,
                label: r.label,
                cutoff: r.timestamp,
                split: r.split,
            })
        })
        .collect::<Result<_>>()?;
    Ok((t, entities))
}

/// Validation or test score of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    AucRoc(f64),
    Mae(f64),
}

impl Metric {
    pub fn value(self) -> f64 {
        match self {
            Metric::AucRoc(x) | Metric::Mae(x) => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::AucRoc(_) => "auc_roc",
            Metric::Mae(_) => "mae",
        }
    }

    /// Higher AUC and lower MAE are better.
    pub fn better_than(self, other: Metric) -> bool {
        match (self, other) {
            (Metric::AucRoc(a), Metric::AucRoc(b)) => a > b,
            (Metric::Mae(a), Metric::Mae(b)) => a < b,
            _ => false,
        }
    }

    fn record(self, r: &mut MetricsRecord) {
        match self {
            Metric::AucRoc(x) => r.auc_roc = Some(x),
            Metric::Mae(x) => r.mae = Some(x),
        }
    }
}

/// Backbone plus task head with their parameters.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub backbone: Backbone,
    pub head: TaskHead,
    pub store: ParamStore,
    pub meta: HeadMeta,
}

impl TaskModel {
    /// Predictions in task units: probabilities for binary tasks, values in
    /// label units for regression. Entities are processed in chunks of
    /// `batch_size`, each with its own neighborhood sample.
    pub fn predict(&self, g: &HeteroGraph, entities: &[Entity], fanout: usize, batch_size: usize) -> Result<Vec<f64>> {
        let t = g
            .schema
            .node_type_by_name(&self.meta.entity_table)
            .ok_or_else(|| Error::UnknownTable(self.meta.entity_table.clone()))?;
        let chunks: Vec<&[Entity]> = entities.chunks(batch_size.max(1)).collect();
        let outs = crate::par::map_range(chunks.len(), |c| -> Result<Vec<f64>> {
            let sampler = sampler_config(chunks[c], self.backbone.config.num_layers, fanout, stream_seed(0, EVAL, c as u64));
            let seeds: Vec<NodeId> = chunks[c].iter().map(|e| NodeId::new(t, e.index)).collect();
            let sub = neighbor_sample(g, &seeds, &sampler)?;
            let mut tape = Tape::inference();
            let out = self.backbone.embed(&mut tape, &self.store, g, &sub, Mode::Eval)?;
            let x = tape.gather_rows(out.h[t.0], sub.seeds.iter().map(|s| s.index).collect())?;
            let y = self.head.forward(&mut tape, &self.store, x, Mode::Eval, &mut Vec::new())?;
            Ok(tape
                .value(y)
                .data()
                .iter()
                .map(|&v| match self.meta.label_kind {
                    LabelKind::Binary => sigmoid(v),
                    LabelKind::Regression => v * self.meta.label_std + self.meta.label_mean,
                })
                .collect())
        });
        let mut all = Vec::with_capacity(entities.len());
        for o in outs {
            all.extend(o?);
        }
        Ok(all)
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Result<Checkpoint> {
        let meta = ModelMeta {
            backbone: self.backbone.meta(),
            head: Some(self.meta.clone()),
        };
        Ok(Checkpoint {
            manifest: Manifest {
                config_hash: self.backbone.config_hash(),
                step,
                rng_seed: seed,
                rng_word_pos: step.to_string(),
                meta: serde_json::to_value(&meta).map_err(|e| Error::Config(e.to_string()))?,
            },
            params: self.store.clone(),
        })
    }

    pub fn from_checkpoint(schema: &DatabaseSchema, ck: &Checkpoint) -> Result<Self> {
        let meta = ModelMeta::from_checkpoint(ck)?;
        let head_meta = meta
            .head
            .ok_or_else(|| Error::VersionMismatch("checkpoint has no task head".into()))?;
        let (backbone, mut store) = load_backbone(schema, ck)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = TaskHead::new(&mut store, backbone.config.hidden_dim, head_meta.head_hidden, &mut rng)?;
        store.load_values(&ck.params, HEAD_PREFIX)?;
        Ok(TaskModel {
            backbone,
            head,
            store,
            meta: head_meta,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sampler_config(batch: &[Entity], depth: usize, fanout: usize, rng_seed: u64) -> NeighborSamplerConfig {
    let time_cutoffs = batch
        .iter()
        .any(|e| e.cutoff.is_some())
        .then(|| batch.iter().map(|e| e.cutoff.unwrap_or(i64::MAX)).collect());
    NeighborSamplerConfig {
        fanout,
        depth,
        time_cutoffs,
        rng_seed,
    }
}

/// Scores `model` on the rows of `split`.
pub fn evaluate(
    model: &TaskModel,
    g: &HeteroGraph,
    task: &TaskTable,
    split: Split,
    fanout: usize,
    batch_size: usize,
) -> Result<Metric> {
    let (_, entities) = resolve_entities(g, task)?;
    let rows: Vec<Entity> = entities.into_iter().filter(|e| e.split == split).collect();
    score(model, g, &rows, fanout, batch_size)
}

fn score(model: &TaskModel, g: &HeteroGraph, rows: &[Entity], fanout: usize, batch_size: usize) -> Result<Metric> {
    if rows.is_empty() {
        return Err(Error::Empty);
    }
    let pred = model.predict(g, rows, fanout, batch_size)?;
    match model.meta.label_kind {
        LabelKind::Binary => {
            let labels: Vec<bool> = rows.iter().map(|e| e.label == 1.0).collect();
            auc_roc(&pred, &labels).map(Metric::AucRoc)
        }
        LabelKind::Regression => {
            let target: Vec<f64> = rows.iter().map(|e| e.label).collect();
            mae(&pred, &target).map(Metric::Mae)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// The best-validation model.
    pub model: TaskModel,
    pub metrics: Vec<MetricsRecord>,
    pub best_step: usize,
    pub best_val: Metric,
    pub steps_run: usize,
    pub stop: StopReason,
}

/// Trains a task head (and, unless frozen, the backbone) on the train split
/// with early stopping on the validation split.
///
/// Baseline builds a fresh backbone from `backbone_cfg`; the pretrained
/// regimes restore it from `init`, which must have been trained with the
/// same architecture on the same schema.
pub fn finetune(
    g: &HeteroGraph,
    task: &TaskTable,
    init: Option<&Checkpoint>,
    backbone_cfg: &BackboneConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    task.validate()?;
    match (cfg.regime.needs_checkpoint(), init.is_some()) {
        (true, false) => {
            return Err(Error::RegimeMismatch(format!(
                "regime {} needs a pretrained checkpoint",
                cfg.regime.as_str()
            )))
        }
        (false, true) => {
            return Err(Error::RegimeMismatch(
                "the baseline regime trains from scratch and takes no checkpoint".into(),
            ))
        }
        _ => {}
    }
    let start = Instant::now();
    let db = g.database();
    let (backbone, mut store) = match init {
        Some(ck) => {
            if backbone_cfg.hash(&schema_graph(&db.schema)) != ck.manifest.config_hash {
                return Err(Error::VersionMismatch(
                    "checkpoint was trained with a different backbone configuration".into(),
                ));
            }
            load_backbone(&db.schema, ck)?
        }
        None => {
            let mut store = ParamStore::new();
            let mut rng = stream_rng(cfg.seed, INIT, 0);
            let stats = fit_encoders(db, backbone_cfg.text_buckets);
            let bb = Backbone::new(&db.schema, stats, backbone_cfg.clone(), &mut store, &mut rng)?;
            (bb, store)
        }
    };
    let mut head_rng = stream_rng(cfg.seed, HEAD_INIT, 0);
    let head = TaskHead::new(&mut store, backbone.config.hidden_dim, cfg.head_hidden, &mut head_rng)?;
    let frozen = cfg.regime == Regime::FrozenPretrained;
    if frozen {
        store.set_trainable(BACKBONE_PREFIX, false);
    }

    let (entity_type, entities) = resolve_entities(g, task)?;
    let train: Vec<Entity> = entities.iter().copied().filter(|e| e.split == Split::Train).collect();
    let val: Vec<Entity> = entities.iter().copied().filter(|e| e.split == Split::Val).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("the task needs train and validation rows".into()));
    }
    let kind = task.meta.label_kind;
    let (label_mean, label_std) = match kind {
        LabelKind::Binary => (0.0, 1.0),
        LabelKind::Regression => {
            let n = train.len() as f64;
            let m = train.iter().map(|e| e.label).sum::<f64>() / n;
            let v = train.iter().map(|e| (e.label - m) * (e.label - m)).sum::<f64>() / n;
            (m, if v > 0.0 { v.sqrt() } else { 1.0 })
        }
    };
    let mut model = TaskModel {
        backbone,
        head,
        store: ParamStore::new(),
        meta: HeadMeta {
            task: task.meta.name.clone(),
            entity_table: task.meta.entity_table.clone(),
            label_kind: kind,
            head_hidden: cfg.head_hidden,
            label_mean,
            label_std,
        },
    };

    let clock = |r: &mut MetricsRecord| {
        if cfg.record_wall_clock {
            r.wall_clock = Some(start.elapsed().as_secs_f64());
        }
    };
    let mut adam = AdamState::new(&store, cfg.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut metrics = Vec::new();
    let mut best: Option<(Metric, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut train_losses = Vec::new();
    let mut stop = StopReason::MaxSteps;
    let mut steps_run = 0;
    let depth = model.backbone.config.num_layers;
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size.min(train.len()));
        while batch.len() < cfg.batch_size.min(train.len()) {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE, epoch));
                epoch += 1;
            }
            batch.push(train[order.pop().expect("non-empty")]);
        }
        let sampler = sampler_config(&batch, depth, cfg.fanout, stream_seed(cfg.seed, TRAIN_SAMPLE, step as u64));
        let seeds: Vec<NodeId> = batch.iter().map(|e| NodeId::new(entity_type, e.index)).collect();
        let sub = neighbor_sample(g, &seeds, &sampler)?;

        let mut tape = Tape::new();
        let mode = if frozen { Mode::Eval } else { Mode::Train };
        let out = model.backbone.embed(&mut tape, &store, g, &sub, mode)?;
        let x = tape.gather_rows(out.h[entity_type.0], sub.seeds.iter().map(|s| s.index).collect())?;
        let mut updates = out.bn_updates;
        let y = model.head.forward(&mut tape, &store, x, Mode::Train, &mut updates)?;
        let loss = match kind {
            LabelKind::Binary => tape.bce_with_logits(y, batch.iter().map(|e| e.label).collect())?,
            LabelKind::Regression => {
                let target = batch.iter().map(|e| (e.label - label_mean) / label_std).collect();
                tape.mse(y, Tensor::matrix(batch.len(), 1, target)?)?
            }
        };
        train_losses.push(tape.value(loss).item());
        let grads = tape.backward(loss, &store)?;
        adam.step(&mut store, &grads)?;
        apply_bn_updates(&mut store, &updates);
        steps_run = step;

        if step % cfg.val_every == 0 || step == cfg.max_steps {
            model.store = store.clone();
            let m = score(&model, g, &val, cfg.fanout, cfg.eval_batch_size)?;
            let mut tr = MetricsRecord::new(step as u64, "train");
            tr.loss = Some(train_losses.iter().sum::<f64>() / train_losses.len() as f64);
            train_losses.clear();
            clock(&mut tr);
            let mut vr = MetricsRecord::new(step as u64, "val");
            m.record(&mut vr);
            clock(&mut vr);
            metrics.extend([tr, vr]);
            if best.as_ref().is_none_or(|b| m.better_than(b.0)) {
                best = Some((m, step, store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stop = StopReason::EarlyStopping;
                    break;
                }
            }
        }
        if cfg
            .time_limit_seconds
            .is_some_and(|limit| start.elapsed().as_secs_f64() > limit)
        {
            stop = StopReason::TimeLimitExceeded;
            break;
        }
    }
    let (best_val, best_step, best_store) = match best {
        Some(b) => b,
        None => {
            model.store = store.clone();
            (score(&model, g, &val, cfg.fanout, cfg.eval_batch_size)?, steps_run, store)
        }
    };
    model.store = best_store;
    Ok(FinetuneOutcome {
        model,
        metrics,
        best_step,
        best_val,
        steps_run,
        stop,
    })
}
