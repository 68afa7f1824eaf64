use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ColumnMarginal, Database, Row, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// A primary key value held by more than one row.
    DuplicatePrimaryKey {
        table: String,
        key: String,
        rows: Vec<usize>,
    },
    /// A foreign key value with no matching primary key in its target table.
    DanglingForeignKey {
        table: String,
        row: usize,
        column: String,
        value: String,
        target_table: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub violations: Vec<Violation>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn duplicate_keys(&self) -> usize {
        self.violations
            .iter()
            .filter(|v| matches!(v, Violation::DuplicatePrimaryKey { .. }))
            .count()
    }

    pub fn dangling_keys(&self) -> usize {
        self.violations
            .iter()
            .filter(|v| matches!(v, Violation::DanglingForeignKey { .. }))
            .count()
    }
}

impl fmt::Display for IntegrityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        write!(
            f,
            "{} duplicate primary key(s), {} dangling foreign key(s)",
            self.duplicate_keys(),
            self.dangling_keys()
        )?;
        for v in self.violations.iter().take(10) {
            match v {
                Violation::DuplicatePrimaryKey { table, key, rows } => {
                    write!(f, "; {table}: key {key:?} on rows {rows:?}")?
                }
                Violation::DanglingForeignKey {
                    table,
                    row,
                    column,
                    value,
                    target_table,
                } => write!(
                    f,
                    "; {table} row {row}: {column}={value:?} not in {target_table}"
                )?,
            }
        }
        if self.violations.len() > 10 {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

fn primary_keys(db: &Database) -> Vec<HashSet<&str>> {
    db.tables()
        .map(|(ts, rows)| {
            let pk = ts.primary_key_index();
            rows.iter()
                .filter_map(|r| r.values[pk].as_key())
                .collect()
        })
        .collect()
}

/// Lists every duplicated primary key and every dangling foreign key.
pub fn validate_integrity(db: &Database) -> IntegrityReport {
    let mut violations = Vec::new();
    for (ts, rows) in db.tables() {
        let pk = ts.primary_key_index();
        let mut seen: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut order = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if let Some(k) = row.values[pk].as_key() {
                let e = seen.entry(k).or_default();
                if e.is_empty() {
                    order.push(k);
                }
                e.push(i);
            }
        }
        for k in order {
            let rows = &seen[k];
            if rows.len() > 1 {
                violations.push(Violation::DuplicatePrimaryKey {
                    table: ts.name.clone(),
                    key: k.to_string(),
                    rows: rows.clone(),
                });
            }
        }
    }

    let pks = primary_keys(db);
    for (ts, rows) in db.tables() {
        for (col, target) in ts.foreign_keys() {
            let t = db.schema.table_index(target).expect("validated schema");
            for (i, row) in rows.iter().enumerate() {
                if let Some(v) = row.values[col].as_key() {
                    if !pks[t].contains(v) {
                        violations.push(Violation::DanglingForeignKey {
                            table: ts.name.clone(),
                            row: i,
                            column: ts.attributes[col].name.clone(),
                            value: v.to_string(),
                            target_table: target.to_string(),
                        });
                    }
                }
            }
        }
    }
    IntegrityReport { violations }
}

/// Deduplicated non-null values of a non-key column in first-occurrence order.
pub fn column_marginal(db: &Database, table: &str, attribute: &str) -> Result<ColumnMarginal> {
    let unknown = || Error::UnknownColumn {
        table: table.to_string(),
        attribute: attribute.to_string(),
    };
    let ts = db.schema.table(table).ok_or_else(unknown)?;
    let col = ts.attribute_index(attribute).ok_or_else(unknown)?;
    if ts.attributes[col].stype.is_key() {
        return Err(Error::KeyColumnNotAllowed {
            table: table.to_string(),
            attribute: attribute.to_string(),
        });
    }
    let mut seen = HashSet::new();
    let mut observed_values = Vec::new();
    for row in db.rows(table).expect("table exists") {
        let v = &row.values[col];
        if !v.is_null() && seen.insert(v) {
            observed_values.push(v.clone());
        }
    }
    Ok(ColumnMarginal {
        table: table.to_string(),
        attribute: attribute.to_string(),
        observed_values,
    })
}

/// Drops rows whose time attribute lies after `cutoff`, then repeatedly drops
/// rows whose foreign keys reference a removed row until nothing dangles.
pub fn temporal_prune(db: &Database, cutoff: i64) -> Database {
    let (schema, mut tables) = db.clone().into_parts();
    for (ts, rows) in schema.tables().iter().zip(tables.iter_mut()) {
        if let Some(ti) = ts.time_index() {
            rows.retain(|r| match r.values[ti] {
                Value::Time(t) => t <= cutoff,
                _ => true,
            });
        }
    }
    loop {
        let pks: Vec<HashSet<String>> = schema
            .tables()
            .iter()
            .zip(&tables)
            .map(|(ts, rows)| {
                let pk = ts.primary_key_index();
                rows.iter()
                    .filter_map(|r| r.values[pk].as_key().map(str::to_string))
                    .collect()
            })
            .collect();
        let mut changed = false;
        for (ts, rows) in schema.tables().iter().zip(tables.iter_mut()) {
            let fks: Vec<(usize, usize)> = ts
                .foreign_keys()
                .map(|(c, t)| (c, schema.table_index(t).expect("validated schema")))
                .collect();
            if fks.is_empty() {
                continue;
            }
            let before = rows.len();
            rows.retain(|r: &Row| {
                fks.iter().all(|&(c, t)| match r.values[c].as_key() {
                    Some(k) => pks[t].contains(k),
                    None => true,
                })
            });
            changed |= rows.len() != before;
        }
        if !changed {
            break;
        }
    }
    Database::from_rows(schema, tables).expect("pruning preserves row shapes")
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    fn db(parents: &[&str], children: &[(&str, Option<&str>, i64)]) -> Database {
        let p = parents
            .iter()
            .map(|k| Row::new(vec![key(k), Value::Number(1.0)]))
            .collect();
        let c = children
            .iter()
            .map(|(id, pid, ts)| {
                Row::new(vec![
                    key(id),
                    pid.map(key).unwrap_or(Value::Null),
                    Value::Time(*ts),
                    Value::Category("a".into()),
                ])
            })
            .collect();
        Database::from_rows(parent_child_schema(), vec![p, c]).unwrap()
    }

    #[test]
    fn clean_db_has_empty_report() {
        let d = db(&["p1", "p2"], &[("c1", Some("p1"), 1), ("c2", None, 2)]);
        assert!(validate_integrity(&d).is_clean());
    }

    #[test]
    fn one_duplicate_pk_one_entry() {
        let d = db(&["d7", "d7", "d8"], &[]);
        let r = validate_integrity(&d);
        assert_eq!(r.duplicate_keys(), 1);
        assert_eq!(r.violations.len(), 1);
    }

    #[test]
    fn two_dangling_fks_two_entries() {
        let d = db(
            &["p1"],
            &[("c1", Some("x"), 1), ("c2", Some("p1"), 1), ("c3", Some("y"), 1)],
        );
        assert_eq!(validate_integrity(&d).dangling_keys(), 2);
    }

    #[test]
    fn marginal_dedups_and_drops_null() {
        let schema = parent_child_schema();
        let kinds = ["A", "B", "A", "", "C"];
        let c = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| {
                Row::new(vec![
                    key(&format!("c{i}")),
                    Value::Null,
                    Value::Time(0),
                    if k.is_empty() {
                        Value::Null
                    } else {
                        Value::Category(k.to_string())
                    },
                ])
            })
            .collect();
        let d = Database::from_rows(schema, vec![vec![], c]).unwrap();
        let m = column_marginal(&d, "child", "kind").unwrap();
        let expect: Vec<Value> = ["A", "B", "C"]
            .iter()
            .map(|s| Value::Category(s.to_string()))
            .collect();
        assert_eq!(m.observed_values, expect);
    }

    #[test]
    fn marginal_of_all_null_column_is_empty() {
        let p = vec![Row::new(vec![key("p"), Value::Null])];
        let d = Database::from_rows(parent_child_schema(), vec![p, vec![]]).unwrap();
        assert!(column_marginal(&d, "parent", "score")
            .unwrap()
            .observed_values
            .is_empty());
    }

    #[test]
    fn marginal_rejects_keys_and_unknown_columns() {
        let d = db(&["p"], &[]);
        assert!(matches!(
            column_marginal(&d, "child", "parent_id"),
            Err(Error::KeyColumnNotAllowed { .. })
        ));
        assert!(matches!(
            column_marginal(&d, "child", "nope"),
            Err(Error::UnknownColumn { .. })
        ));
    }

    #[test]
    fn prune_cutoffs() {
        let d = db(&["p1"], &[("c1", Some("p1"), 10), ("c2", Some("p1"), 20)]);
        assert_eq!(temporal_prune(&d, 20), d);
        let early = temporal_prune(&d, 5);
        assert!(early.rows("child").unwrap().is_empty());
        assert_eq!(early.rows("parent").unwrap().len(), 1);
        assert_eq!(temporal_prune(&d, 15).rows("child").unwrap().len(), 1);
    }
}
