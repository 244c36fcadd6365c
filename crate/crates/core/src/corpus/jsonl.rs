//! JSONL persistence: one serialized record per line, UTF-8, LF endings.
//!
//! Record schemas:
//! - logs: `{"id","raw_text","source","tag"}`
//! - templates: `{"template_text","slot_count","origin_ids"}`
//! - knowledge: `{"template_text","knowledge_text","strategy","epochs_used","passed","trace_ref"}`
//! - datasets: `{"kind","label_space","split","items":[...]}` (one dataset per line)

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CorpusError, KnowledgePair, LogRecord, LogTemplate, Strategy, TaskDataset};

/// Record kinds a JSONL file may hold; used by the CLI to dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Logs,
    Templates,
    Knowledge,
    Datasets,
}

impl std::str::FromStr for Kind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logs" => Ok(Kind::Logs),
            "templates" => Ok(Kind::Templates),
            "knowledge" => Ok(Kind::Knowledge),
            "datasets" => Ok(Kind::Datasets),
            other => Err(CorpusError::Schema(other.to_owned())),
        }
    }
}

/// On-disk shape of a knowledge record: the template is flattened to its text.
#[derive(Debug, Serialize, Deserialize)]
struct KnowledgeRecord {
    template_text: String,
    knowledge_text: String,
    strategy: Strategy,
    epochs_used: usize,
    passed: bool,
    trace_ref: Option<String>,
}

pub fn load_lines<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn save_lines<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_logs(path: impl AsRef<Path>) -> Result<Vec<LogRecord>, CorpusError> {
    let logs: Vec<LogRecord> = load_lines(path)?;
    let mut seen = std::collections::HashSet::new();
    for log in &logs {
        if !seen.insert(log.id.as_str()) {
            return Err(CorpusError::Invariant(format!(
                "duplicate log id `{}`",
                log.id
            )));
        }
    }
    Ok(logs)
}

pub fn save_logs(path: impl AsRef<Path>, logs: &[LogRecord]) -> Result<(), CorpusError> {
    save_lines(path, logs)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<LogTemplate>, CorpusError> {
    load_lines(path)
}

pub fn save_templates(path: impl AsRef<Path>, ts: &[LogTemplate]) -> Result<(), CorpusError> {
    save_lines(path, ts)
}

pub fn load_knowledge(path: impl AsRef<Path>) -> Result<Vec<KnowledgePair>, CorpusError> {
    let records: Vec<KnowledgeRecord> = load_lines(path)?;
    Ok(records
        .into_iter()
        .map(|r| KnowledgePair {
            template: LogTemplate::from_text(r.template_text),
            knowledge_text: r.knowledge_text,
            strategy: r.strategy,
            epochs_used: r.epochs_used,
            passed: r.passed,
            trace_ref: r.trace_ref,
        })
        .collect())
}

pub fn save_knowledge(path: impl AsRef<Path>, pairs: &[KnowledgePair]) -> Result<(), CorpusError> {
    let records: Vec<KnowledgeRecord> = pairs
        .iter()
        .map(|p| KnowledgeRecord {
            template_text: p.template.template_text.clone(),
            knowledge_text: p.knowledge_text.clone(),
            strategy: p.strategy,
            epochs_used: p.epochs_used,
            passed: p.passed,
            trace_ref: p.trace_ref.clone(),
        })
        .collect();
    save_lines(path, &records)
}

pub fn load_datasets(path: impl AsRef<Path>) -> Result<Vec<TaskDataset>, CorpusError> {
    let datasets: Vec<TaskDataset> = load_lines(path)?;
    for ds in &datasets {
        ds.validate()?;
    }
    Ok(datasets)
}

/// Loads a file expected to hold exactly one dataset object.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<TaskDataset, CorpusError> {
    let mut datasets = load_datasets(path)?;
    match datasets.len() {
        1 => Ok(datasets.pop().expect("len checked")),
        0 => Err(CorpusError::EmptyDataset),
        n => Err(CorpusError::Schema(format!(
            "expected a single dataset, file holds {n}"
        ))),
    }
}

pub fn save_datasets(path: impl AsRef<Path>, ds: &[TaskDataset]) -> Result<(), CorpusError> {
    save_lines(path, ds)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &TaskDataset) -> Result<(), CorpusError> {
    save_lines(path, std::slice::from_ref(ds))
}
