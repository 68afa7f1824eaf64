//! Relational databases: schemas with semantic column types, typed rows,
//! primary/foreign key integrity, column marginals and temporal pruning.

mod integrity;
mod io;
mod schema;

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use integrity::{column_marginal, temporal_prune, validate_integrity, IntegrityReport, Violation};
pub use io::{load_database, read_database, write_database};
pub(crate) use io::parse_timestamp;
pub use schema::{load_schema, parse_schema, save_schema, schema_to_toml};

/// Semantic type of a column. Decides both parsing and encoding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SemanticType {
    Numerical,
    Categorical,
    MultiCategorical,
    Text,
    Timestamp,
    PrimaryKey,
    /// Foreign key referencing the primary key of the named table.
    ForeignKey(String),
}

impl SemanticType {
    pub fn is_key(&self) -> bool {
        matches!(self, SemanticType::PrimaryKey | SemanticType::ForeignKey(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub stype: SemanticType,
    pub nullable: bool,
}

impl Attribute {
    pub fn new(name: impl Into<String>, stype: SemanticType) -> Self {
        let nullable = !matches!(stype, SemanticType::PrimaryKey);
        Attribute {
            name: name.into(),
            stype,
            nullable,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub attributes: Vec<Attribute>,
    pub time_attribute: Option<String>,
}

impl TableSchema {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Column position of the primary key. Valid schemas always have one.
    pub fn primary_key_index(&self) -> usize {
        self.attributes
            .iter()
            .position(|a| a.stype == SemanticType::PrimaryKey)
            .expect("validated schema has a primary key")
    }

    /// `(column index, target table)` for every foreign key, in column order.
    pub fn foreign_keys(&self) -> impl Iterator<Item = (usize, &str)> {
        self.attributes
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match &a.stype {
                SemanticType::ForeignKey(t) => Some((i, t.as_str())),
                _ => None,
            })
    }

    pub fn foreign_key_count(&self) -> usize {
        self.foreign_keys().count()
    }

    /// Column positions of non-key attributes, i.e. the feature columns.
    pub fn feature_indices(&self) -> Vec<usize> {
        self.attributes
            .iter()
            .enumerate()
            .filter(|(_, a)| !a.stype.is_key())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn time_index(&self) -> Option<usize> {
        self.time_attribute
            .as_deref()
            .and_then(|t| self.attribute_index(t))
    }
}

/// An ordered set of tables. Construct through [`DatabaseSchema::new`] so
/// the invariants are checked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    tables: Vec<TableSchema>,
}

impl DatabaseSchema {
    pub fn new(tables: Vec<TableSchema>) -> Result<Self> {
        let schema = DatabaseSchema { tables };
        schema.validate()?;
        Ok(schema)
    }

    pub fn tables(&self) -> &[TableSchema] {
        &self.tables
    }

    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for t in &self.tables {
            if t.name.is_empty() {
                return Err(Error::Schema("table with empty name".into()));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::Schema(format!("duplicate table {}", t.name)));
            }
        }
        for t in &self.tables {
            let mut attrs = BTreeSet::new();
            for a in &t.attributes {
                if !attrs.insert(a.name.as_str()) {
                    return Err(Error::Schema(format!(
                        "duplicate attribute {}.{}",
                        t.name, a.name
                    )));
                }
                if let SemanticType::ForeignKey(target) = &a.stype {
                    if !names.contains(target.as_str()) {
                        return Err(Error::Schema(format!(
                            "foreign key {}.{} targets unknown table {}",
                            t.name, a.name, target
                        )));
                    }
                }
            }
            let pks = t
                .attributes
                .iter()
                .filter(|a| a.stype == SemanticType::PrimaryKey)
                .count();
            if pks != 1 {
                return Err(Error::Schema(format!(
                    "table {} has {} primary key attributes, expected exactly one",
                    t.name, pks
                )));
            }
            if let Some(time) = &t.time_attribute {
                match t.attributes.iter().find(|a| &a.name == time) {
                    Some(a) if a.stype == SemanticType::Timestamp => {}
                    Some(_) => {
                        return Err(Error::Schema(format!(
                            "time attribute {}.{} is not a timestamp",
                            t.name, time
                        )))
                    }
                    None => {
                        return Err(Error::Schema(format!(
                            "time attribute {}.{} does not exist",
                            t.name, time
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// A single cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Value {
    Null,
    Number(f64),
    Category(String),
    MultiCategory(BTreeSet<String>),
    Text(String),
    /// Seconds since the Unix epoch.
    Time(i64),
    Key(String),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_key(&self) -> Option<&str> {
        match self {
            Value::Key(k) => Some(k),
            _ => None,
        }
    }

    pub fn as_time(&self) -> Option<i64> {
        match self {
            Value::Time(t) => Some(*t),
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    /// Whether the tag is admissible for a column of type `stype`.
    pub fn matches(&self, stype: &SemanticType) -> bool {
        matches!(
            (self, stype),
            (Value::Null, _)
                | (Value::Number(_), SemanticType::Numerical)
                | (Value::Category(_), SemanticType::Categorical)
                | (Value::MultiCategory(_), SemanticType::MultiCategorical)
                | (Value::Text(_), SemanticType::Text)
                | (Value::Time(_), SemanticType::Timestamp)
                | (Value::Key(_), SemanticType::PrimaryKey)
                | (Value::Key(_), SemanticType::ForeignKey(_))
        )
    }
}

// Numbers compare bitwise so that Value can be hashed and deduplicated.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Null, Null) => true,
            (Number(a), Number(b)) => a.to_bits() == b.to_bits(),
            (Category(a), Category(b)) => a == b,
            (MultiCategory(a), MultiCategory(b)) => a == b,
            (Text(a), Text(b)) => a == b,
            (Time(a), Time(b)) => a == b,
            (Key(a), Key(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Value::Null => {}
            Value::Number(x) => x.to_bits().hash(state),
            Value::Category(s) | Value::Text(s) | Value::Key(s) => s.hash(state),
            Value::MultiCategory(s) => s.hash(state),
            Value::Time(t) => t.hash(state),
        }
    }
}

/// A tuple of values aligned with its table's attributes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub values: Vec<Value>,
}

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Row { values }
    }
}

/// Schema plus rows, stored per table in schema order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Database {
    pub schema: DatabaseSchema,
    tables: Vec<Vec<Row>>,
}

impl Database {
    /// Assembles a database from rows given in schema order. Row shapes and
    /// value tags are checked; integrity is not (see [`validate_integrity`]).
    pub fn from_rows(schema: DatabaseSchema, tables: Vec<Vec<Row>>) -> Result<Self> {
        if tables.len() != schema.tables().len() {
            return Err(Error::Schema(format!(
                "expected rows for {} tables, got {}",
                schema.tables().len(),
                tables.len()
            )));
        }
        for (ts, rows) in schema.tables().iter().zip(&tables) {
            for (r, row) in rows.iter().enumerate() {
                if row.values.len() != ts.attributes.len() {
                    return Err(Error::parse(
                        format!("{} row {}", ts.name, r),
                        format!(
                            "expected {} values, got {}",
                            ts.attributes.len(),
                            row.values.len()
                        ),
                    ));
                }
                for (v, a) in row.values.iter().zip(&ts.attributes) {
                    if !v.matches(&a.stype) {
                        return Err(Error::parse(
                            format!("{} row {} column {}", ts.name, r, a.name),
                            format!("value {v:?} does not match type {:?}", a.stype),
                        ));
                    }
                    if let Value::Key(k) = v {
                        if k.is_empty() {
                            return Err(Error::parse(
                                format!("{} row {} column {}", ts.name, r, a.name),
                                "empty key",
                            ));
                        }
                    }
                }
            }
        }
        Ok(Database { schema, tables })
    }

    pub fn rows(&self, table: &str) -> Option<&[Row]> {
        self.schema
            .table_index(table)
            .map(|i| self.tables[i].as_slice())
    }

    pub fn rows_at(&self, table_index: usize) -> &[Row] {
        &self.tables[table_index]
    }

    pub fn tables(&self) -> impl Iterator<Item = (&TableSchema, &[Row])> {
        self.schema
            .tables()
            .iter()
            .zip(self.tables.iter().map(Vec::as_slice))
    }

    pub fn total_rows(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }

    pub(crate) fn into_parts(self) -> (DatabaseSchema, Vec<Vec<Row>>) {
        (self.schema, self.tables)
    }
}

/// The deduplicated non-null values of one column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMarginal {
    pub table: String,
    pub attribute: String,
    pub observed_values: Vec<Value>,
}
