//! CSV ingestion: one `<table>.csv` per table, header row of attribute
//! names, empty cell = Null.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use super::{validate_integrity, Database, DatabaseSchema, Row, SemanticType, TableSchema, Value};
use crate::error::{Error, Result};

/// Reads every table and checks integrity; any violation is an error.
pub fn load_database(schema: DatabaseSchema, dir: impl AsRef<Path>) -> Result<Database> {
    let db = read_database(schema, dir)?;
    let report = validate_integrity(&db);
    if !report.is_clean() {
        return Err(Error::Integrity(report.to_string()));
    }
    Ok(db)
}

/// Reads every table without the integrity check.
pub fn read_database(schema: DatabaseSchema, dir: impl AsRef<Path>) -> Result<Database> {
    let dir = dir.as_ref();
    let mut tables = Vec::with_capacity(schema.tables().len());
    for ts in schema.tables() {
        tables.push(read_table(ts, &dir.join(format!("{}.csv", ts.name)))?);
    }
    Database::from_rows(schema, tables)
}

fn read_table(ts: &TableSchema, path: &Path) -> Result<Vec<Row>> {
    let file_name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();

    // Map schema attribute -> CSV column.
    let mut column_of = Vec::with_capacity(ts.attributes.len());
    for a in &ts.attributes {
        let pos = header.iter().position(|h| h.trim() == a.name).ok_or_else(|| {
            Error::parse(&file_name, format!("header is missing attribute {}", a.name))
        })?;
        column_of.push(pos);
    }
    if header.len() != ts.attributes.len() {
        return Err(Error::parse(
            &file_name,
            format!(
                "header has {} columns, schema lists {}",
                header.len(),
                ts.attributes.len()
            ),
        ));
    }

    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let mut values = Vec::with_capacity(ts.attributes.len());
        for (a, &c) in ts.attributes.iter().zip(&column_of) {
            let cell = record.get(c).unwrap_or("");
            let location = || format!("{file_name} row {} column {}", r + 1, a.name);
            if cell.is_empty() {
                if !a.nullable {
                    return Err(Error::parse(location(), "empty cell in non-nullable column"));
                }
                values.push(Value::Null);
                continue;
            }
            values.push(parse_cell(cell, &a.stype).map_err(|m| Error::parse(location(), m))?);
        }
        rows.push(Row::new(values));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}

fn parse_cell(cell: &str, stype: &SemanticType) -> std::result::Result<Value, String> {
    Ok(match stype {
        SemanticType::Numerical => Value::Number(
            cell.trim()
                .parse::<f64>()
                .map_err(|_| format!("expected a number, found {cell:?}"))?,
        ),
        SemanticType::Categorical => Value::Category(cell.to_string()),
        SemanticType::MultiCategorical => Value::MultiCategory(
            cell.split(';')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect::<BTreeSet<_>>(),
        ),
        SemanticType::Text => Value::Text(cell.to_string()),
        SemanticType::Timestamp => Value::Time(parse_timestamp(cell.trim())?),
        SemanticType::PrimaryKey | SemanticType::ForeignKey(_) => Value::Key(cell.to_string()),
    })
}

/// Integer epoch seconds or ISO-8601 (date, naive date-time as UTC, or
/// RFC 3339 with offset).
pub(crate) fn parse_timestamp(s: &str) -> std::result::Result<i64, String> {
    if let Ok(t) = s.parse::<i64>() {
        return Ok(t);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp());
    }
    Err(format!("expected a timestamp, found {s:?}"))
}

fn format_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Number(x) => format!("{x}"),
        Value::Category(s) | Value::Text(s) | Value::Key(s) => s.clone(),
        Value::MultiCategory(set) => set.iter().cloned().collect::<Vec<_>>().join(";"),
        Value::Time(t) => t.to_string(),
    }
}

/// Writes `<table>.csv` for each table into `dir` (created if missing).
/// Timestamps are written as epoch seconds.
pub fn write_database(db: &Database, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ts, rows) in db.tables() {
        let path = dir.join(format!("{}.csv", ts.name));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(ts.attributes.iter().map(|a| a.name.as_str()))
            .map_err(|e| csv_error(&path, e))?;
        for row in rows {
            w.write_record(row.values.iter().map(format_cell))
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
