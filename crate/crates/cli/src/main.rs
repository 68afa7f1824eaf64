//! `rdl`: validate relational datasets, generate synthetic ones, pretrain
//! backbones, fine-tune task heads and evaluate checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rdl_core::backbone::BackboneConfig;
use rdl_core::datagen::{gen_synth_db, SynthConfig};
use rdl_core::graph::build_graph;
use rdl_core::relational::{load_database, load_schema, read_database, temporal_prune, validate_integrity, Database};
use rdl_core::sampler::{hg_sample, pick_seed_type, HgSamplerConfig};
use rdl_core::train::{
    evaluate, finetune, load_checkpoint, load_task, metrics_to_jsonl, pretrain, save_checkpoint, FinetuneConfig,
    ModelMeta, PretrainConfig, Regime, Split, TaskModel,
};
use rdl_core::Error;

/// Environment variable capping the worker thread count.
const THREADS_VAR: &str = "RDL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "rdl", version, about = "Contrastive pretraining for relational databases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check primary and foreign key integrity of a dataset.
    Validate(DataArgs),
    /// Write a seeded synthetic database with two planted tasks.
    GenSynth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain a backbone with the contrastive objective.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        /// Override the configured step budget.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Drop rows newer than this epoch-seconds cutoff before training.
        #[arg(long)]
        cutoff: Option<i64>,
    },
    /// Train a task head, optionally on top of a pretrained backbone.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
        /// Task CSV; its description is read from the sibling `.toml`.
        #[arg(long)]
        task: PathBuf,
        /// baseline, frozen or finetune; defaults to the configured regime.
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Pretrained checkpoint; required by the frozen and finetune regimes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the configured step budget.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score a fine-tuned checkpoint on one split of a task.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Task CSV; its description is read from the sibling `.toml`.
        #[arg(long)]
        task: PathBuf,
        /// Checkpoint written by `finetune`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Run configuration TOML.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Draw one pretraining subgraph and print its per-type census.
    InspectSample {
        #[command(flatten)]
        data: DataArgs,
        /// Sampler seed; defaults to the configured pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run configuration TOML.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding the CSV tables.
    #[arg(long)]
    data: PathBuf,
    /// Schema file; defaults to `<data>/schema.toml`.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Run seed; overrides the value in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Run configuration TOML with optional [backbone], [pretrain], [finetune] and [synth] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Contents of a `--config` TOML file. Flags override these values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    backbone: BackboneConfig,
    pretrain: PretrainConfig,
    finetune: FinetuneConfig,
    synth: SynthConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.backbone.validate()?;
        Ok(cfg)
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    config: serde_json::Value,
    seed: u64,
    threads: usize,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn hash_files(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths.iter().map(|p| hash_file(p)).collect()
}

impl DataArgs {
    fn schema_path(&self) -> PathBuf {
        self.schema.clone().unwrap_or_else(|| self.data.join("schema.toml"))
    }

    fn load(&self) -> Result<Database> {
        let schema = load_schema(self.schema_path())?;
        Ok(load_database(schema, &self.data)?)
    }

    /// Schema file plus one CSV per table.
    fn files(&self, db: &Database) -> Vec<PathBuf> {
        let mut files = vec![self.schema_path()];
        files.extend(db.schema.tables().iter().map(|t| self.data.join(format!("{}.csv", t.name))));
        files
    }
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    write_atomic(&out.join("manifest.json"), text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = rdl_core::par::init_from_env(THREADS_VAR).unwrap_or_else(rdl_core::par::current_threads);
    match cli.command {
        Command::Validate(data) => {
            let schema = load_schema(data.schema_path())?;
            let db = read_database(schema, &data.data)?;
            let report = validate_integrity(&db);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.is_clean() {
                return Err(Error::Integrity(report.to_string()).into());
            }
        }
        Command::GenSynth { common } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.synth.rng_seed = seed;
            }
            create_dir(&common.out)?;
            let data = gen_synth_db(&cfg.synth, &common.out)?;
            eprintln!(
                "wrote {} rows and {} task rows to {}",
                data.db.total_rows(),
                data.binary.rows.len(),
                common.out.display()
            );
        }
        Command::Pretrain {
            data,
            common,
            max_steps,
            cutoff,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.pretrain.seed = seed;
            }
            if let Some(n) = max_steps {
                cfg.pretrain.max_steps = n;
            }
            let mut db = data.load()?;
            let inputs = hash_files(&data.files(&db))?;
            if let Some(c) = cutoff {
                db = temporal_prune(&db, c);
            }
            create_dir(&common.out)?;
            let outcome = pretrain(&db, &cfg.backbone, &cfg.pretrain)?;
            let ck_path = common.out.join("checkpoint.rdl");
            let metrics_path = common.out.join("metrics.jsonl");
            save_checkpoint(&outcome.checkpoint, &ck_path)?;
            write_atomic(&metrics_path, metrics_to_jsonl(&outcome.metrics).as_bytes())?;
            write_manifest(
                &common.out,
                &RunManifest {
                    command: "pretrain".into(),
                    version: env!("CARGO_PKG_VERSION"),
                    config: serde_json::json!({
                        "backbone": cfg.backbone,
                        "pretrain": cfg.pretrain,
                        "cutoff": cutoff,
                    }),
                    seed: cfg.pretrain.seed,
                    threads,
                    inputs,
                    outputs: hash_files(&[ck_path, metrics_path])?,
                },
            )?;
            eprintln!(
                "pretrained {} steps ({:?}); validation loss {:.4} -> {:.4} at step {}",
                outcome.steps_run, outcome.stop, outcome.initial_val_loss, outcome.best_val_loss, outcome.best_step
            );
        }
        Command::Finetune {
            data,
            common,
            task,
            regime,
            checkpoint,
            max_steps,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.finetune.seed = seed;
            }
            if let Some(n) = max_steps {
                cfg.finetune.max_steps = n;
            }
            if let Some(r) = regime {
                cfg.finetune.regime = r;
            }
            if cfg.finetune.regime.needs_checkpoint() != checkpoint.is_some() {
                return Err(Error::RegimeMismatch(format!(
                    "regime {} {} a --checkpoint",
                    cfg.finetune.regime.as_str(),
                    if checkpoint.is_some() { "does not take" } else { "requires" }
                ))
                .into());
            }
            let db = data.load()?;
            let task_table = load_task(&task)?;
            let mut inputs = data.files(&db);
            inputs.push(task.clone());
            let init = match &checkpoint {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_checkpoint(p)?)
                }
                None => None,
            };
            let inputs = hash_files(&inputs)?;
            let g = build_graph(&db)?;
            let backbone_cfg = match &init {
                Some(ck) => ModelMeta::from_checkpoint(ck)?.backbone.config,
                None => cfg.backbone.clone(),
            };
            create_dir(&common.out)?;
            let outcome = finetune(&g, &task_table, init.as_ref(), &backbone_cfg, &cfg.finetune)?;
            let test = evaluate(
                &outcome.model,
                &g,
                &task_table,
                Split::Test,
                cfg.finetune.fanout,
                cfg.finetune.eval_batch_size,
            )
            .ok();
            let ck_path = common.out.join("model.rdl");
            let metrics_path = common.out.join("metrics.jsonl");
            save_checkpoint(
                &outcome.model.to_checkpoint(outcome.best_step as u64, cfg.finetune.seed)?,
                &ck_path,
            )?;
            write_atomic(&metrics_path, metrics_to_jsonl(&outcome.metrics).as_bytes())?;
            write_manifest(
                &common.out,
                &RunManifest {
                    command: "finetune".into(),
                    version: env!("CARGO_PKG_VERSION"),
                    config: serde_json::json!({
                        "backbone": backbone_cfg,
                        "finetune": cfg.finetune,
                    }),
                    seed: cfg.finetune.seed,
                    threads,
                    inputs,
                    outputs: hash_files(&[ck_path, metrics_path])?,
                },
            )?;
            let summary = serde_json::json!({
                "regime": cfg.finetune.regime,
                "best_step": outcome.best_step,
                "val": { outcome.best_val.name(): outcome.best_val.value() },
                "test": test.map(|m| serde_json::json!({ m.name(): m.value() })),
            });
            println!("{summary}");
        }
        Command::Evaluate {
            data,
            task,
            checkpoint,
            split,
            config,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let db = data.load()?;
            let task_table = load_task(&task)?;
            let ck = load_checkpoint(&checkpoint)?;
            let model = TaskModel::from_checkpoint(&db.schema, &ck)?;
            let g = build_graph(&db)?;
            let m = evaluate(
                &model,
                &g,
                &task_table,
                split,
                cfg.finetune.fanout,
                cfg.finetune.eval_batch_size,
            )?;
            println!(
                "{}",
                serde_json::json!({ "split": split.as_str(), m.name(): m.value() })
            );
        }
        Command::InspectSample { data, seed, config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let db = data.load()?;
            let g = build_graph(&db)?;
            let seed_type = match &cfg.pretrain.sampler.seed_table {
                Some(name) => g
                    .schema
                    .node_type_by_name(name)
                    .ok_or_else(|| Error::UnknownSeedType(name.clone()))?,
                None => pick_seed_type(&db.schema).ok_or(Error::EmptyGraph)?,
            };
            let sampler = HgSamplerConfig {
                per_type_budget: cfg.pretrain.sampler.per_type_budget,
                iterations: cfg.pretrain.sampler.iterations,
                seed_type,
                seed_count: cfg.pretrain.sampler.seed_count,
                rng_seed: seed.unwrap_or(cfg.pretrain.seed),
            };
            let sub = hg_sample(&g, &sampler)?;
            println!("{}", serde_json::to_string_pretty(&sub.census(&g))?);
        }
    }
    Ok(())
}

/// 1 for usage and configuration errors, 2 for bad input data, 3 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::RegimeMismatch(_)) => 1,
        Some(
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::Integrity(_)
            | Error::UnknownColumn { .. }
            | Error::UnknownTable(_)
            | Error::KeyColumnNotAllowed { .. }
            | Error::UnknownSeedType(_)
            | Error::EmptyMarginal { .. }
            | Error::VersionMismatch(_)
            | Error::CorruptPayload(_),
        ) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
