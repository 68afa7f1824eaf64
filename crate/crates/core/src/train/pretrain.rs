use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use super::streams::*;
use super::{stream_rng, stream_seed, ModelMeta, StopReason};
use crate::backbone::{apply_bn_updates, subgraph_rows, Backbone, BackboneConfig, BnUpdate, Mode};
use crate::contrastive::{
    combined_loss_with_plan, corrupt_rows_with, fit_marginals, plan_negatives, ContrastiveParams, CorruptionConfig,
    LossTerms, NegativeConfig, NegativePlan, TableMarginals,
};
use crate::encoders::fit_encoders;
use crate::error::{Error, Result};
use crate::graph::{build_graph, HeteroGraph, NodeType};
use crate::relational::{Database, Row};
use crate::sampler::{hg_sample, pick_seed_type, HgSamplerConfig, Subgraph};
use crate::tensor::{AdamState, Checkpoint, Manifest, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSampler {
    pub per_type_budget: usize,
    pub iterations: usize,
    pub seed_count: usize,
    /// Seed table; defaults to the table with the most foreign keys.
    pub seed_table: Option<String>,
}

impl Default for PretrainSampler {
    fn default() -> Self {
        PretrainSampler {
            per_type_budget: 64,
            iterations: 3,
            seed_count: 64,
            seed_table: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub val_every: usize,
    pub patience: usize,
    pub val_samples: usize,
    pub seed: u64,
    pub sampler: PretrainSampler,
    pub corruption: CorruptionConfig,
    pub negatives: NegativeConfig,
    pub time_limit_seconds: Option<f64>,
    pub record_wall_clock: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            max_steps: 2000,
            val_every: 50,
            patience: 10,
            val_samples: 50,
            seed: 0,
            sampler: PretrainSampler::default(),
            corruption: CorruptionConfig::default(),
            negatives: NegativeConfig::default(),
            time_limit_seconds: None,
            record_wall_clock: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.max_steps,
            self.val_every,
            self.patience,
            self.val_samples,
            self.sampler.per_type_budget,
            self.sampler.iterations,
            self.sampler.seed_count,
            self.negatives.n_max,
        ];
        if positive.contains(&0) || !(self.lr > 0.0) {
            return Err(Error::Config("pretraining settings must be positive".into()));
        }
        self.corruption.validate()
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters of the best validation round.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub stop: StopReason,
}

/// A sampled subgraph with its corrupted rows and negatives.
struct Prepared {
    sub: Subgraph,
    corrupted: Vec<Vec<Row>>,
    plan: NegativePlan,
}

struct Ctx<'a> {
    g: &'a HeteroGraph,
    backbone: &'a Backbone,
    contrastive: &'a ContrastiveParams,
    marginals: &'a [TableMarginals],
    cfg: &'a PretrainConfig,
    seed_type: NodeType,
}

impl Ctx<'_> {
    fn prepare(&self, tags: [u64; 3], i: u64) -> Result<Prepared> {
        let cfg = self.cfg;
        let sampler = HgSamplerConfig {
            per_type_budget: cfg.sampler.per_type_budget,
            iterations: cfg.sampler.iterations,
            seed_type: self.seed_type,
            seed_count: cfg.sampler.seed_count,
            rng_seed: stream_seed(cfg.seed, tags[0], i),
        };
        let sub = hg_sample(self.g, &sampler)?;
        let rows = subgraph_rows(self.g, &sub)?;
        let mut rng = stream_rng(cfg.corruption.rng_seed, tags[2], i);
        let corrupted = rows
            .iter()
            .enumerate()
            .map(|(t, r)| {
                let table = &self.g.database().schema.tables()[t];
                corrupt_rows_with(r, table, &self.marginals[t], cfg.corruption.p, &mut rng).map(|c| c.rows)
            })
            .collect::<Result<_>>()?;
        let plan = plan_negatives(self.g, &sub, cfg.negatives.n_max, &mut stream_rng(cfg.seed, tags[1], i))?;
        Ok(Prepared { sub, corrupted, plan })
    }

    fn loss(&self, tape: &mut Tape, store: &ParamStore, p: &Prepared, mode: Mode) -> Result<(LossTerms, Vec<BnUpdate>)> {
        let clean = self.backbone.embed(tape, store, self.g, &p.sub, mode)?;
        let corrupt = self.backbone.forward(tape, store, &p.sub, &p.corrupted, mode)?;
        let terms = combined_loss_with_plan(
            tape,
            store,
            &self.g.schema,
            &p.sub,
            &clean.h,
            &corrupt.h,
            self.contrastive,
            &p.plan,
        )?;
        Ok((terms, clean.bn_updates))
    }

    fn validate(&self, store: &ParamStore, val: &[Prepared]) -> Result<f64> {
        let losses = crate::par::map(val, |p| {
            let mut tape = Tape::inference();
            self.loss(&mut tape, store, p, Mode::Eval)
                .map(|(t, _)| tape.value(t.total).item())
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / val.len() as f64)
    }
}

/// Contrastive pretraining of a fresh backbone on `db`.
///
/// Validation averages the combined loss over `val_samples` subgraphs drawn
/// once before training (with their own corruption and negatives) and
/// scored in evaluation mode. Training stops after `max_steps`, after
/// `patience` validation rounds without improvement, or when the time limit
/// is exceeded; the returned checkpoint holds the best-validation
/// parameters.
pub fn pretrain(db: &Database, backbone_cfg: &BackboneConfig, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let g = build_graph(db)?;
    let stats = fit_encoders(db, backbone_cfg.text_buckets);
    let marginals = fit_marginals(db)?;
    let mut store = ParamStore::new();
    let mut init = stream_rng(cfg.seed, INIT, 0);
    let backbone = Backbone::new(&db.schema, stats, backbone_cfg.clone(), &mut store, &mut init)?;
    let contrastive = ContrastiveParams::new(&backbone.graph, backbone_cfg.hidden_dim, &mut store, &mut init)?;
    let seed_type = match &cfg.sampler.seed_table {
        Some(name) => g
            .schema
            .node_type_by_name(name)
            .ok_or_else(|| Error::UnknownSeedType(name.clone()))?,
        None => pick_seed_type(&db.schema).ok_or(Error::EmptyGraph)?,
    };
    let ctx = Ctx {
        g: &g,
        backbone: &backbone,
        contrastive: &contrastive,
        marginals: &marginals,
        cfg,
        seed_type,
    };

    let val_tags = [VAL_SAMPLE, VAL_NEGATIVES, VAL_CORRUPT];
    let val = crate::par::map_range(cfg.val_samples, |i| ctx.prepare(val_tags, i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let clock = |r: &mut MetricsRecord| {
        if cfg.record_wall_clock {
            r.wall_clock = Some(start.elapsed().as_secs_f64());
        }
    };

    let mut metrics = Vec::new();
    let initial = ctx.validate(&store, &val)?;
    let mut rec = MetricsRecord::new(0, "val");
    rec.loss = Some(initial);
    clock(&mut rec);
    metrics.push(rec);

    let mut adam = AdamState::new(&store, cfg.lr);
    let (mut best_loss, mut best_step, mut best_store) = (initial, 0, store.clone());
    let mut since_best = 0;
    let mut train_losses = Vec::new();
    let mut stop = StopReason::MaxSteps;
    let mut steps_run = 0;
    let train_tags = [TRAIN_SAMPLE, TRAIN_NEGATIVES, TRAIN_CORRUPT];
    for step in 1..=cfg.max_steps {
        let p = ctx.prepare(train_tags, step as u64)?;
        let mut tape = Tape::new();
        let (terms, updates) = ctx.loss(&mut tape, &store, &p, Mode::Train)?;
        train_losses.push(tape.value(terms.total).item());
        if tape.requires_grad(terms.total) {
            let grads = tape.backward(terms.total, &store)?;
            adam.step(&mut store, &grads)?;
        }
        apply_bn_updates(&mut store, &updates);
        steps_run = step;

        if step % cfg.val_every == 0 || step == cfg.max_steps {
            let v = ctx.validate(&store, &val)?;
            let mut tr = MetricsRecord::new(step as u64, "train");
            tr.loss = Some(train_losses.iter().sum::<f64>() / train_losses.len() as f64);
            train_losses.clear();
            clock(&mut tr);
            let mut vr = MetricsRecord::new(step as u64, "val");
            vr.loss = Some(v);
            clock(&mut vr);
            metrics.extend([tr, vr]);
            if v < best_loss {
                (best_loss, best_step, best_store) = (v, step, store.clone());
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

    let meta = ModelMeta {
        backbone: backbone.meta(),
        head: None,
    };
    let checkpoint = Checkpoint {
        manifest: Manifest {
            config_hash: backbone.config_hash(),
            step: best_step as u64,
            rng_seed: cfg.seed,
            rng_word_pos: steps_run.to_string(),
            meta: serde_json::to_value(&meta).map_err(|e| Error::Config(e.to_string()))?,
        },
        params: best_store,
    };
    Ok(PretrainOutcome {
        checkpoint,
        metrics,
        initial_val_loss: initial,
        best_val_loss: best_loss,
        best_step,
        steps_run,
        stop,
    })
}
