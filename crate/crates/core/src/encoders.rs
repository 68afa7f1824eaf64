//! Attribute encoders: one learned map per non-key column from raw cells to
//! a `d0`-dimensional vector.
//!
//! | type              | encoding                                               |
//! |-------------------|--------------------------------------------------------|
//! | numerical         | z-score, then `x w + b`                                |
//! | categorical       | embedding row; unseen values use an extra OOV row     |
//! | multi-categorical | sum of embedding rows (OOV row for unseen tokens)      |
//! | text              | mean of hashed-token bucket embeddings                 |
//! | timestamp         | sin/cos of day-of-week and day-of-year plus z-score,   |
//! |                   | then a linear map                                      |
//!
//! Null cells (and text without tokens) use a learned per-attribute vector.

use std::borrow::Borrow;
use std::collections::{BTreeSet, HashMap};
use std::f64::consts::TAU;

use chrono::{DateTime, Datelike};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{Database, DatabaseSchema, Row, SemanticType, Value};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_TEXT_BUCKETS: usize = 2048;
const TIME_FEATURES: usize = 5;

/// Statistics fitted on training rows for one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnStats {
    Numerical { mean: f64, std: f64 },
    Categorical { vocab: Vec<String> },
    MultiCategorical { vocab: Vec<String> },
    Text { buckets: usize },
    Timestamp { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedColumn {
    pub attribute: String,
    pub column: usize,
    pub stats: ColumnStats,
}

/// Fitted statistics for every feature column, per table in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStats {
    pub tables: Vec<Vec<FittedColumn>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 1.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

/// Fits normalizers and vocabularies on every row of `db`.
pub fn fit_encoders(db: &Database, text_buckets: usize) -> EncoderStats {
    let tables = db
        .tables()
        .map(|(schema, rows)| {
            schema
                .feature_indices()
                .into_iter()
                .map(|c| {
                    let attr = &schema.attributes[c];
                    let cells = rows.iter().map(|r| &r.values[c]);
                    let stats = match attr.stype {
                        SemanticType::Numerical => {
                            let xs: Vec<f64> =
                                cells.filter_map(Value::as_number).filter(|x| x.is_finite()).collect();
                            let (mean, std) = mean_std(&xs);
                            ColumnStats::Numerical { mean, std }
                        }
                        SemanticType::Timestamp => {
                            let xs: Vec<f64> = cells.filter_map(Value::as_time).map(|t| t as f64).collect();
                            let (mean, std) = mean_std(&xs);
                            ColumnStats::Timestamp { mean, std }
                        }
                        SemanticType::Categorical => {
                            let vocab: BTreeSet<String> = cells
                                .filter_map(|v| match v {
                                    Value::Category(s) => Some(s.clone()),
                                    _ => None,
                                })
                                .collect();
                            ColumnStats::Categorical {
                                vocab: vocab.into_iter().collect(),
                            }
                        }
                        SemanticType::MultiCategorical => {
                            let mut vocab = BTreeSet::new();
                            for v in cells {
                                if let Value::MultiCategory(s) = v {
                                    vocab.extend(s.iter().cloned());
                                }
                            }
                            ColumnStats::MultiCategorical {
                                vocab: vocab.into_iter().collect(),
                            }
                        }
                        SemanticType::Text => ColumnStats::Text {
                            buckets: text_buckets.max(1),
                        },
                        SemanticType::PrimaryKey | SemanticType::ForeignKey(_) => {
                            unreachable!("feature columns exclude keys")
                        }
                    };
                    FittedColumn {
                        attribute: attr.name.clone(),
                        column: c,
                        stats,
                    }
                })
                .collect()
        })
        .collect();
    EncoderStats { tables }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Cyclical calendar features and the z-scored raw time.
pub fn time_features(t: i64, mean: f64, std: f64) -> [f64; TIME_FEATURES] {
    let days = t.div_euclid(86_400);
    // 1970-01-01 was a Thursday; 0 = Monday.
    let dow = (days + 3).rem_euclid(7) as f64;
    let doy = DateTime::from_timestamp(t, 0).map_or(0, |d| d.ordinal0()) as f64;
    [
        (TAU * dow / 7.0).sin(),
        (TAU * dow / 7.0).cos(),
        (TAU * doy / 365.25).sin(),
        (TAU * doy / 365.25).cos(),
        (t as f64 - mean) / std,
    ]
}

#[derive(Clone, Debug)]
enum Kind {
    Affine { mean: f64, std: f64, w: ParamId, b: ParamId },
    Time { mean: f64, std: f64, w: ParamId, b: ParamId },
    Embedding { index: HashMap<String, usize>, table: ParamId },
    Bag { index: HashMap<String, usize>, table: ParamId },
    Hashed { buckets: usize, table: ParamId },
}

#[derive(Clone, Debug)]
struct ColumnEncoder {
    column: usize,
    kind: Kind,
    null: ParamId,
}

/// Parameterized encoders for every feature column of a schema.
#[derive(Clone, Debug)]
pub struct AttributeEncoders {
    pub dim: usize,
    pub stats: EncoderStats,
    tables: Vec<Vec<ColumnEncoder>>,
}

impl AttributeEncoders {
    /// Registers encoder parameters under `prefix` in `store`.
    pub fn new<R: Rng>(
        schema: &DatabaseSchema,
        stats: EncoderStats,
        dim: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if stats.tables.len() != schema.tables().len() {
            return Err(Error::UnfittedEncoder(format!(
                "statistics cover {} tables, schema has {}",
                stats.tables.len(),
                schema.tables().len()
            )));
        }
        let mut tables = Vec::with_capacity(stats.tables.len());
        for (table, fitted) in schema.tables().iter().zip(&stats.tables) {
            if fitted.iter().map(|f| f.column).collect::<Vec<_>>() != table.feature_indices() {
                return Err(Error::UnfittedEncoder(format!(
                    "statistics do not match the columns of {}",
                    table.name
                )));
            }
            let mut cols = Vec::with_capacity(fitted.len());
            for f in fitted {
                let base = format!("{prefix}.{}.{}", table.name, f.attribute);
                let index_of = |vocab: &[String]| -> HashMap<String, usize> {
                    vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
                };
                let kind = match &f.stats {
                    ColumnStats::Numerical { mean, std } => Kind::Affine {
                        mean: *mean,
                        std: *std,
                        w: store.glorot(format!("{base}.w"), 1, dim, rng)?,
                        b: store.zeros(format!("{base}.b"), 1, dim)?,
                    },
                    ColumnStats::Timestamp { mean, std } => Kind::Time {
                        mean: *mean,
                        std: *std,
                        w: store.glorot(format!("{base}.w"), TIME_FEATURES, dim, rng)?,
                        b: store.zeros(format!("{base}.b"), 1, dim)?,
                    },
                    ColumnStats::Categorical { vocab } => Kind::Embedding {
                        index: index_of(vocab),
                        table: store.glorot(format!("{base}.emb"), vocab.len() + 1, dim, rng)?,
                    },
                    ColumnStats::MultiCategorical { vocab } => Kind::Bag {
                        index: index_of(vocab),
                        table: store.glorot(format!("{base}.emb"), vocab.len() + 1, dim, rng)?,
                    },
                    ColumnStats::Text { buckets } => Kind::Hashed {
                        buckets: *buckets,
                        table: store.glorot(format!("{base}.emb"), *buckets, dim, rng)?,
                    },
                };
                let null = store.glorot(format!("{base}.null"), 1, dim, rng)?;
                cols.push(ColumnEncoder {
                    column: f.column,
                    kind,
                    null,
                });
            }
            tables.push(cols);
        }
        Ok(AttributeEncoders { dim, stats, tables })
    }

    /// Number of feature columns of table `t`.
    pub fn width(&self, t: usize) -> usize {
        self.tables.get(t).map_or(0, Vec::len)
    }

    /// One `n x dim` matrix per feature column of table `t`, in column order.
    pub fn encode_attributes<R: Borrow<Row>>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: usize,
        rows: &[R],
    ) -> Result<Vec<Var>> {
        let cols = self
            .tables
            .get(t)
            .ok_or_else(|| Error::UnfittedEncoder(format!("no encoders for table {t}")))?;
        cols.iter()
            .map(|c| self.encode_column(tape, store, c, rows))
            .collect()
    }

    fn encode_column<R: Borrow<Row>>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        c: &ColumnEncoder,
        rows: &[R],
    ) -> Result<Var> {
        let n = rows.len();
        let d = self.dim;
        let cell = |i: usize| -> &Value { &rows[i].borrow().values[c.column] };
        let mut present = vec![true; n];
        let enc = match &c.kind {
            Kind::Affine { mean, std, w, b } => {
                let mut x = vec![0.0; n];
                for i in 0..n {
                    match cell(i).as_number().filter(|v| v.is_finite()) {
                        Some(v) => x[i] = (v - mean) / std,
                        None => present[i] = false,
                    }
                }
                let x = tape.constant(Tensor::matrix(n, 1, x)?);
                let (w, b) = (tape.param(store, *w), tape.param(store, *b));
                let y = tape.matmul(x, w)?;
                tape.add_row(y, b)?
            }
            Kind::Time { mean, std, w, b } => {
                let mut x = vec![0.0; n * TIME_FEATURES];
                for i in 0..n {
                    match cell(i).as_time() {
                        Some(ts) => x[i * TIME_FEATURES..(i + 1) * TIME_FEATURES]
                            .copy_from_slice(&time_features(ts, *mean, *std)),
                        None => present[i] = false,
                    }
                }
                let x = tape.constant(Tensor::matrix(n, TIME_FEATURES, x)?);
                let (w, b) = (tape.param(store, *w), tape.param(store, *b));
                let y = tape.matmul(x, w)?;
                tape.add_row(y, b)?
            }
            Kind::Embedding { index, table } => {
                let oov = index.len();
                let idx = (0..n)
                    .map(|i| match cell(i) {
                        Value::Category(s) => index.get(s).copied().unwrap_or(oov),
                        _ => {
                            present[i] = false;
                            0
                        }
                    })
                    .collect();
                let table = tape.param(store, *table);
                tape.embedding_lookup(table, idx)?
            }
            Kind::Bag { index, table } => {
                let oov = index.len();
                let mut idx = Vec::new();
                let mut owner = Vec::new();
                for i in 0..n {
                    match cell(i) {
                        Value::MultiCategory(set) => {
                            for s in set {
                                idx.push(index.get(s).copied().unwrap_or(oov));
                                owner.push(i);
                            }
                        }
                        _ => present[i] = false,
                    }
                }
                let table = tape.param(store, *table);
                let e = tape.embedding_lookup(table, idx)?;
                tape.scatter_add_rows(e, owner, n)?
            }
            Kind::Hashed { buckets, table } => {
                let mut idx = Vec::new();
                let mut owner = Vec::new();
                let mut weight = Vec::new();
                for i in 0..n {
                    let tokens: Vec<usize> = match cell(i) {
                        Value::Text(s) => tokenize(s)
                            .map(|tok| (fnv1a(tok.as_bytes()) % *buckets as u64) as usize)
                            .collect(),
                        _ => Vec::new(),
                    };
                    if tokens.is_empty() {
                        present[i] = false;
                        continue;
                    }
                    let k = 1.0 / tokens.len() as f64;
                    for b in tokens {
                        idx.push(b);
                        owner.push(i);
                        weight.push(k);
                    }
                }
                let table = tape.param(store, *table);
                let e = tape.embedding_lookup(table, idx)?;
                let e = tape.scale_rows(e, weight)?;
                tape.scatter_add_rows(e, owner, n)?
            }
        };
        if present.iter().all(|&p| p) {
            return Ok(enc);
        }
        let keep: Vec<f64> = present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let fill: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let enc = tape.scale_rows(enc, keep)?;
        let null = tape.param(store, c.null);
        let nulls = tape.gather_rows(null, vec![0; n])?;
        let nulls = tape.scale_rows(nulls, fill)?;
        debug_assert_eq!(tape.shape(enc), &[n, d]);
        tape.add(enc, nulls)
    }
}
