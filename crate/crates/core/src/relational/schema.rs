//! TOML schema files.
//!
//! ```toml
//! [[tables]]
//! name = "events"
//! primary_key = "event_id"
//! time_attribute = "ts"
//! attributes = [
//!   { name = "event_id", stype = "primary_key" },
//!   { name = "user_id", stype = "foreign_key" },
//!   { name = "ts", stype = "timestamp", nullable = false },
//!   { name = "amount", stype = "numerical" },
//! ]
//! foreign_keys = [{ column = "user_id", target_table = "users" }]
//! ```
//!
//! `stype` is one of `numerical`, `categorical`, `multi_categorical`, `text`,
//! `timestamp`, `primary_key`, `foreign_key`. Every `foreign_key` column needs
//! a matching `foreign_keys` entry. `nullable` defaults to true except for the
//! primary key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attribute, DatabaseSchema, SemanticType, TableSchema};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    tables: Vec<TableSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableSpec {
    name: String,
    primary_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_attribute: Option<String>,
    attributes: Vec<AttrSpec>,
    #[serde(default)]
    foreign_keys: Vec<FkSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttrSpec {
    name: String,
    stype: StypeTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nullable: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StypeTag {
    Numerical,
    Categorical,
    MultiCategorical,
    Text,
    Timestamp,
    PrimaryKey,
    ForeignKey,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FkSpec {
    column: String,
    target_table: String,
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<DatabaseSchema> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schema(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn parse_schema(text: &str) -> Result<DatabaseSchema> {
    let file: SchemaFile =
        toml::from_str(text).map_err(|e| Error::parse("schema", e.to_string()))?;
    let mut tables = Vec::with_capacity(file.tables.len());
    for spec in file.tables {
        let mut attributes = Vec::with_capacity(spec.attributes.len());
        for a in &spec.attributes {
            let stype = match a.stype {
                StypeTag::Numerical => SemanticType::Numerical,
                StypeTag::Categorical => SemanticType::Categorical,
                StypeTag::MultiCategorical => SemanticType::MultiCategorical,
                StypeTag::Text => SemanticType::Text,
                StypeTag::Timestamp => SemanticType::Timestamp,
                StypeTag::PrimaryKey => {
                    if a.name != spec.primary_key {
                        return Err(Error::Schema(format!(
                            "table {}: attribute {} is typed primary_key but primary_key = {}",
                            spec.name, a.name, spec.primary_key
                        )));
                    }
                    SemanticType::PrimaryKey
                }
                StypeTag::ForeignKey => {
                    let fk = spec
                        .foreign_keys
                        .iter()
                        .find(|fk| fk.column == a.name)
                        .ok_or_else(|| {
                            Error::Schema(format!(
                                "foreign key column {}.{} has no foreign_keys entry",
                                spec.name, a.name
                            ))
                        })?;
                    SemanticType::ForeignKey(fk.target_table.clone())
                }
            };
            let nullable = a.nullable.unwrap_or(stype != SemanticType::PrimaryKey);
            if stype == SemanticType::PrimaryKey && nullable {
                return Err(Error::Schema(format!(
                    "primary key {}.{} cannot be nullable",
                    spec.name, a.name
                )));
            }
            attributes.push(Attribute {
                name: a.name.clone(),
                stype,
                nullable,
            });
        }
        if !spec.attributes.iter().any(|a| a.name == spec.primary_key) {
            return Err(Error::Schema(format!(
                "table {}: primary key {} is not an attribute",
                spec.name, spec.primary_key
            )));
        }
        for fk in &spec.foreign_keys {
            let ok = spec
                .attributes
                .iter()
                .any(|a| a.name == fk.column && a.stype == StypeTag::ForeignKey);
            if !ok {
                return Err(Error::Schema(format!(
                    "foreign_keys entry {}.{} does not name a foreign_key attribute",
                    spec.name, fk.column
                )));
            }
        }
        tables.push(TableSchema {
            name: spec.name,
            attributes,
            time_attribute: spec.time_attribute,
        });
    }
    DatabaseSchema::new(tables)
}

pub fn schema_to_toml(schema: &DatabaseSchema) -> String {
    let tables = schema
        .tables()
        .iter()
        .map(|t| TableSpec {
            name: t.name.clone(),
            primary_key: t.attributes[t.primary_key_index()].name.clone(),
            time_attribute: t.time_attribute.clone(),
            attributes: t
                .attributes
                .iter()
                .map(|a| {
                    let (stype, default_nullable) = match a.stype {
                        SemanticType::Numerical => (StypeTag::Numerical, true),
                        SemanticType::Categorical => (StypeTag::Categorical, true),
                        SemanticType::MultiCategorical => (StypeTag::MultiCategorical, true),
                        SemanticType::Text => (StypeTag::Text, true),
                        SemanticType::Timestamp => (StypeTag::Timestamp, true),
                        SemanticType::PrimaryKey => (StypeTag::PrimaryKey, false),
                        SemanticType::ForeignKey(_) => (StypeTag::ForeignKey, true),
                    };
                    AttrSpec {
                        name: a.name.clone(),
                        stype,
                        nullable: (a.nullable != default_nullable).then_some(a.nullable),
                    }
                })
                .collect(),
            foreign_keys: t
                .foreign_keys()
                .map(|(i, target)| FkSpec {
                    column: t.attributes[i].name.clone(),
                    target_table: target.to_string(),
                })
                .collect(),
        })
        .collect();
    toml::to_string(&SchemaFile { tables }).expect("schema serializes")
}

pub fn save_schema(schema: &DatabaseSchema, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, schema_to_toml(schema)).map_err(|e| Error::io(path, e))
}
