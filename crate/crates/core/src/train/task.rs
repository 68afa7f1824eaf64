use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::parse_timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelKind {
    Binary,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub entity_key: String,
    pub label: f64,
    pub timestamp: Option<i64>,
    pub split: Split,
}

/// Task description stored next to the task CSV as `<stem>.toml`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    pub name: String,
    pub entity_table: String,
    pub entity_fk_column: String,
    pub label_kind: LabelKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskTable {
    pub meta: TaskMeta,
    pub rows: Vec<TaskRow>,
}

impl TaskTable {
    pub fn new(meta: TaskMeta, rows: Vec<TaskRow>) -> Result<Self> {
        let t = TaskTable { meta, rows };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if !r.label.is_finite() {
                return Err(Error::parse(format!("task row {}", i + 1), "label is not finite"));
            }
            if self.meta.label_kind == LabelKind::Binary && r.label != 0.0 && r.label != 1.0 {
                return Err(Error::parse(
                    format!("task row {}", i + 1),
                    format!("binary label must be 0 or 1, found {}", r.label),
                ));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaskRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn has_timestamps(&self) -> bool {
        self.rows.iter().any(|r| r.timestamp.is_some())
    }
}

fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("toml")
}

/// Reads `entity_key,label[,timestamp,split]` from `csv` and the task
/// description from the sibling `.toml`. Rows without a split are training
/// rows.
pub fn load_task(csv: impl AsRef<Path>) -> Result<TaskTable> {
    let csv_path = csv.as_ref();
    let mp = meta_path(csv_path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: TaskMeta = toml::from_str(&text).map_err(|e| Error::parse(mp.display().to_string(), e.to_string()))?;

    let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| Error::parse(csv_path.display().to_string(), e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(csv_path.display().to_string(), e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(kc), Some(lc)) = (col("entity_key"), col("label")) else {
        return Err(Error::parse(
            csv_path.display().to_string(),
            "task tables need entity_key and label columns",
        ));
    };
    let (tc, sc) = (col("timestamp"), col("split"));
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let loc = format!("{} row {}", csv_path.display(), i + 2);
        let rec = rec.map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim();
        let label: f64 = get(lc)
            .parse()
            .map_err(|_| Error::parse(loc.clone(), format!("label {:?} is not a number", get(lc))))?;
        let timestamp = match tc.map(get) {
            None | Some("") => None,
            Some(s) => Some(parse_timestamp(s).map_err(|m| Error::parse(loc.clone(), m))?),
        };
        let split = match sc.map(get) {
            None | Some("") => Split::Train,
            Some(s) => s.parse().map_err(|e: Error| Error::parse(loc.clone(), e.to_string()))?,
        };
        rows.push(TaskRow {
            entity_key: get(kc).to_string(),
            label,
            timestamp,
            split,
        });
    }
    TaskTable::new(meta, rows)
}

/// Writes the task CSV and its `.toml` description.
pub fn write_task(task: &TaskTable, csv: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv.as_ref();
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::parse(csv_path.display().to_string(), e.to_string()))?;
    let wr = |w: &mut csv::Writer<std::fs::File>, rec: &[String]| {
        w.write_record(rec)
            .map_err(|e| Error::parse(csv_path.display().to_string(), e.to_string()))
    };
    wr(&mut w, &["entity_key", "label", "timestamp", "split"].map(String::from))?;
    for r in &task.rows {
        wr(
            &mut w,
            &[
                r.entity_key.clone(),
                format!("{}", r.label),
                r.timestamp.map(|t| t.to_string()).unwrap_or_default(),
                r.split.as_str().to_string(),
            ],
        )?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let mp = meta_path(csv_path);
    let text = toml::to_string(&task.meta).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}
