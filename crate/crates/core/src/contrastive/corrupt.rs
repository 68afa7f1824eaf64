use std::borrow::Borrow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{column_marginal, ColumnMarginal, Database, Row, TableSchema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub p: f64,
    pub rng_seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { p: 0.4, rng_seed: 0 }
    }
}

impl CorruptionConfig {
    pub fn new(p: f64, rng_seed: u64) -> Result<Self> {
        let cfg = CorruptionConfig { p, rng_seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("corruption probability {} outside [0, 1]", self.p)));
        }
        Ok(())
    }
}

/// Marginals of one table aligned with its attributes; `None` for keys.
pub type TableMarginals = Vec<Option<ColumnMarginal>>;

/// Marginals of every feature column, per table in schema order.
pub fn fit_marginals(db: &Database) -> Result<Vec<TableMarginals>> {
    db.tables()
        .map(|(schema, _)| {
            schema
                .attributes
                .iter()
                .map(|a| {
                    if a.stype.is_key() {
                        Ok(None)
                    } else {
                        column_marginal(db, &schema.name, &a.name).map(Some)
                    }
                })
                .collect()
        })
        .collect()
}

/// Corrupted rows and which cells were selected for resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub rows: Vec<Row>,
    pub selected: Vec<Vec<bool>>,
}

impl Corrupted {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().flatten().filter(|&&s| s).count()
    }
}

/// Corrupts `rows` with a generator seeded from `cfg.rng_seed`.
pub fn corrupt_rows<R: Borrow<Row>>(
    rows: &[R],
    table: &TableSchema,
    marginals: &[Option<ColumnMarginal>],
    cfg: &CorruptionConfig,
) -> Result<Vec<Row>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    Ok(corrupt_rows_with(rows, table, marginals, cfg.p, &mut rng)?.rows)
}

/// Selects each non-key cell with probability `p` and replaces it with a
/// uniform draw from its column's observed values.
pub fn corrupt_rows_with<R: Borrow<Row>, G: Rng>(
    rows: &[R],
    table: &TableSchema,
    marginals: &[Option<ColumnMarginal>],
    p: f64,
    rng: &mut G,
) -> Result<Corrupted> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("corruption probability {p} outside [0, 1]")));
    }
    let features = table.feature_indices();
    let mut pools = Vec::with_capacity(features.len());
    for &c in &features {
        let attr = &table.attributes[c];
        let pool = marginals
            .get(c)
            .and_then(Option::as_ref)
            .map(|m| m.observed_values.as_slice())
            .unwrap_or(&[]);
        if pool.is_empty() && p > 0.0 {
            return Err(Error::EmptyMarginal {
                table: table.name.clone(),
                attribute: attr.name.clone(),
            });
        }
        pools.push(pool);
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut selected = Vec::with_capacity(rows.len());
    for row in rows {
        let mut row = row.borrow().clone();
        let mut mask = vec![false; table.attributes.len()];
        for (&c, pool) in features.iter().zip(&pools) {
            if rng.gen_bool(p) {
                row.values[c] = pool[rng.gen_range(0..pool.len())].clone();
                mask[c] = true;
            }
        }
        out.push(row);
        selected.push(mask);
    }
    Ok(Corrupted { rows: out, selected })
}
