//! Seeded synthetic databases with a planted relational signal.
//!
//! The default shape is three tables: `users`, `items` and `events`, where
//! each event references one user and one item and carries a timestamp. Task
//! labels for a user are a noisy monotone function of the mean `num_0` of the
//! items that user interacted with up to the task timestamp, so they can only
//! be recovered by looking two hops away from the user.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{save_schema, write_database, Attribute, Database, DatabaseSchema, Row, SemanticType, TableSchema, Value};
use crate::seeding::derive_seed;
use crate::train::{write_task, LabelKind, Split, TaskMeta, TaskRow, TaskTable};

/// Feature columns generated for one table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnPlan {
    pub numerical: usize,
    pub categorical: usize,
    pub multi_categorical: usize,
    pub text: usize,
    pub timestamp: usize,
}

impl Default for ColumnPlan {
    fn default() -> Self {
        ColumnPlan {
            numerical: 2,
            categorical: 1,
            multi_categorical: 0,
            text: 0,
            timestamp: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rng_seed: u64,
    pub users: usize,
    pub items: usize,
    pub events: usize,
    pub user_columns: ColumnPlan,
    pub item_columns: ColumnPlan,
    pub event_columns: ColumnPlan,
    /// Weight of the planted aggregate in the latent label, in `[0, 1]`.
    pub signal_strength: f64,
    /// Probability that a non-key feature cell is left empty.
    pub null_rate: f64,
    pub categories: usize,
    /// First event time, epoch seconds.
    pub start_time: i64,
    pub span_days: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rng_seed: 0,
            users: 400,
            items: 150,
            events: 4000,
            user_columns: ColumnPlan {
                numerical: 2,
                categorical: 1,
                multi_categorical: 0,
                text: 1,
                timestamp: 1,
            },
            item_columns: ColumnPlan {
                numerical: 2,
                categorical: 1,
                multi_categorical: 1,
                text: 0,
                timestamp: 0,
            },
            event_columns: ColumnPlan {
                numerical: 1,
                categorical: 1,
                multi_categorical: 0,
                text: 0,
                timestamp: 0,
            },
            signal_strength: 0.9,
            null_rate: 0.05,
            categories: 6,
            start_time: 1_577_836_800,
            span_days: 365,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.events == 0 || self.categories == 0 || self.span_days <= 0 {
            return Err(Error::Config("synthetic table sizes must be positive".into()));
        }
        if self.item_columns.numerical == 0 {
            return Err(Error::Config("items need at least one numerical column".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) || !(0.0..1.0).contains(&self.null_rate) {
            return Err(Error::Config(
                "signal_strength must lie in [0, 1] and null_rate in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

const WORDS: [&str; 12] = [
    "red", "green", "blue", "fast", "slow", "new", "old", "big", "small", "light", "dark", "plain",
];

/// Everything `gen_synth_db` produces, in memory.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub db: Database,
    pub binary: TaskTable,
    pub regression: TaskTable,
    /// The noiseless planted aggregate per task row (z-scored), aligned with
    /// the rows of both task tables.
    pub planted: Vec<f64>,
}

fn schema_for(cfg: &SynthConfig) -> Result<DatabaseSchema> {
    fn features(plan: &ColumnPlan, attrs: &mut Vec<Attribute>) {
        let groups = [
            (plan.numerical, "num", SemanticType::Numerical),
            (plan.categorical, "cat", SemanticType::Categorical),
            (plan.multi_categorical, "tags", SemanticType::MultiCategorical),
            (plan.text, "text", SemanticType::Text),
            (plan.timestamp, "time", SemanticType::Timestamp),
        ];
        for (n, prefix, stype) in groups {
            for i in 0..n {
                attrs.push(Attribute::new(format!("{prefix}_{i}"), stype.clone()));
            }
        }
    }
    let table = |name: &str, key: &str, fks: &[(&str, &str)], plan: &ColumnPlan, time: bool| {
        let mut attributes = vec![Attribute::new(key, SemanticType::PrimaryKey)];
        for (col, target) in fks {
            let mut a = Attribute::new(*col, SemanticType::ForeignKey((*target).into()));
            a.nullable = false;
            attributes.push(a);
        }
        if time {
            let mut a = Attribute::new("ts", SemanticType::Timestamp);
            a.nullable = false;
            attributes.push(a);
        }
        features(plan, &mut attributes);
        TableSchema {
            name: name.into(),
            attributes,
            time_attribute: time.then(|| "ts".into()),
        }
    };
    DatabaseSchema::new(vec![
        table("users", "user_id", &[], &cfg.user_columns, false),
        table("items", "item_id", &[], &cfg.item_columns, false),
        table(
            "events",
            "event_id",
            &[("user_id", "users"), ("item_id", "items")],
            &cfg.event_columns,
            true,
        ),
    ])
}

fn feature_value<R: Rng>(stype: &SemanticType, cfg: &SynthConfig, rng: &mut R) -> Value {
    match stype {
        SemanticType::Numerical => Value::Number(rng.sample::<f64, _>(StandardNormal)),
        SemanticType::Categorical => Value::Category(format!("c{}", rng.gen_range(0..cfg.categories))),
        SemanticType::MultiCategorical => {
            let n = rng.gen_range(1..=3.min(cfg.categories));
            let tags: BTreeSet<String> = (0..n).map(|_| format!("t{}", rng.gen_range(0..cfg.categories))).collect();
            Value::MultiCategory(tags)
        }
        SemanticType::Text => {
            let n = rng.gen_range(1..=4);
            let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
            Value::Text(words.join(" "))
        }
        SemanticType::Timestamp => Value::Time(cfg.start_time + rng.gen_range(0..cfg.span_days * 86_400)),
        SemanticType::PrimaryKey | SemanticType::ForeignKey(_) => Value::Null,
    }
}

/// Fills the feature columns of `table` (everything after the first `skip`
/// attributes) with random values; `protect` lists columns never nulled.
fn fill_features<R: Rng>(table: &TableSchema, skip: usize, protect: &[&str], cfg: &SynthConfig, rng: &mut R) -> Vec<Value> {
    table.attributes[skip..]
        .iter()
        .map(|a| {
            let v = feature_value(&a.stype, cfg, rng);
            if rng.gen_bool(cfg.null_rate) && !protect.contains(&a.name.as_str()) {
                Value::Null
            } else {
                v
            }
        })
        .collect()
}

/// Generates the synthetic database and both task tables in memory.
pub fn synth_data(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let schema = schema_for(cfg)?;
    let [users_t, items_t, events_t] = [0, 1, 2].map(|i| &schema.tables()[i]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, 1));

    let users: Vec<Row> = (0..cfg.users)
        .map(|i| {
            let mut values = vec![Value::Key(format!("u{i}"))];
            values.extend(fill_features(users_t, 1, &[], cfg, &mut rng));
            Row::new(values)
        })
        .collect();
    let mut item_signal = Vec::with_capacity(cfg.items);
    let items: Vec<Row> = (0..cfg.items)
        .map(|i| {
            let mut values = vec![Value::Key(format!("i{i}"))];
            values.extend(fill_features(items_t, 1, &["num_0"], cfg, &mut rng));
            item_signal.push(values[1].as_number().expect("num_0 is numeric"));
            Row::new(values)
        })
        .collect();

    let span = cfg.span_days * 86_400;
    let mut event_plan: Vec<(usize, usize, i64)> = (0..cfg.events)
        .map(|_| {
            (
                rng.gen_range(0..cfg.users),
                rng.gen_range(0..cfg.items),
                cfg.start_time + rng.gen_range(0..span),
            )
        })
        .collect();
    event_plan.sort_by_key(|e| e.2);
    let events: Vec<Row> = event_plan
        .iter()
        .enumerate()
        .map(|(i, &(u, it, ts))| {
            let mut values = vec![
                Value::Key(format!("e{i}")),
                Value::Key(format!("u{u}")),
                Value::Key(format!("i{it}")),
                Value::Time(ts),
            ];
            values.extend(fill_features(events_t, 4, &[], cfg, &mut rng));
            Row::new(values)
        })
        .collect();
    let db = Database::from_rows(schema, vec![users, items, events])?;

    // Each user gets a task timestamp in the second half of the span; the
    // label aggregates only events up to it.
    let mut task_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, 2));
    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); cfg.users];
    for &(u, it, ts) in &event_plan {
        per_user[u].push((ts, it));
    }
    let mut raw = Vec::new();
    for (u, evs) in per_user.iter().enumerate() {
        let cutoff = cfg.start_time + span / 2 + task_rng.gen_range(0..span / 2);
        let seen: Vec<f64> = evs.iter().filter(|e| e.0 <= cutoff).map(|e| item_signal[e.1]).collect();
        if !seen.is_empty() {
            raw.push((u, cutoff, seen.iter().sum::<f64>() / seen.len() as f64));
        }
    }
    let n = raw.len().max(1) as f64;
    let mean = raw.iter().map(|r| r.2).sum::<f64>() / n;
    let std = (raw.iter().map(|r| (r.2 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    let s = cfg.signal_strength;
    let noise = (1.0 - s * s).max(0.0).sqrt();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut task_rng);
    let mut split = vec![Split::Train; raw.len()];
    for (rank, &i) in order.iter().enumerate() {
        let f = rank as f64 / raw.len() as f64;
        split[i] = if f < 0.6 {
            Split::Train
        } else if f < 0.8 {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut planted = Vec::with_capacity(raw.len());
    let mut bin_rows = Vec::with_capacity(raw.len());
    let mut reg_rows = Vec::with_capacity(raw.len());
    for (i, &(u, cutoff, agg)) in raw.iter().enumerate() {
        let z = (agg - mean) / std;
        let latent = s * z + noise * task_rng.sample::<f64, _>(StandardNormal);
        planted.push(z);
        let row = |label| TaskRow {
            entity_key: format!("u{u}"),
            label,
            timestamp: Some(cutoff),
            split: split[i],
        };
        bin_rows.push(row(if latent > 0.0 { 1.0 } else { 0.0 }));
        reg_rows.push(row(10.0 + 2.0 * latent));
    }
    let meta = |name: &str, label_kind| TaskMeta {
        name: name.into(),
        entity_table: "users".into(),
        entity_fk_column: "user_id".into(),
        label_kind,
    };
    Ok(SynthData {
        db,
        binary: TaskTable::new(meta("user_label", LabelKind::Binary), bin_rows)?,
        regression: TaskTable::new(meta("user_value", LabelKind::Regression), reg_rows)?,
        planted,
    })
}

/// Writes `schema.toml`, one CSV per table and `tasks/user_label.{csv,toml}`
/// plus `tasks/user_value.{csv,toml}` into `out_dir`.
pub fn gen_synth_db(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthData> {
    let out = out_dir.as_ref();
    let data = synth_data(cfg)?;
    std::fs::create_dir_all(out.join("tasks")).map_err(|e| Error::io(out, e))?;
    save_schema(&data.db.schema, out.join("schema.toml"))?;
    write_database(&data.db, out)?;
    write_task(&data.binary, out.join("tasks").join("user_label.csv"))?;
    write_task(&data.regression, out.join("tasks").join("user_value.csv"))?;
    Ok(data)
}
