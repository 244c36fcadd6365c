//! Log corpus handling: raw records, parameter-masked templates, downstream
//! task datasets, and the JSONL persistence for all of them.
//!
//! Template extraction is deliberately rule-based: numbers, dotted quads,
//! hex literals and the right-hand sides of `key=value` fields are replaced
//! by the `<*>` sentinel, which makes deduplication exact and testable.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

pub mod jsonl;

/// Sentinel token substituted for masked parameters.
pub const SLOT: &str = "<*>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid log: {0}")]
    InvalidLog(String),
    #[error("invalid ratio {0}: must lie in {1}")]
    InvalidRatio(f64, &'static str),
    #[error("subsampling requires the train split, got {0:?}")]
    WrongSplit(Split),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown record kind `{0}`")]
    Schema(String),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogSource {
    Software,
    Network,
}

/// A raw log line as ingested from a system or device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub id: String,
    pub raw_text: String,
    pub source: LogSource,
    #[serde(default)]
    pub tag: String,
}

/// A log line with variable parameters collapsed to [`SLOT`] sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogTemplate {
    pub template_text: String,
    pub slot_count: usize,
    #[serde(default)]
    pub origin_ids: Vec<String>,
}

impl LogTemplate {
    /// Builds a template directly from already-masked text, recounting slots.
    pub fn from_text(template_text: impl Into<String>) -> Self {
        let template_text = template_text.into();
        let slot_count = template_text.matches(SLOT).count();
        LogTemplate {
            template_text,
            slot_count,
            origin_ids: Vec::new(),
        }
    }
}

/// Strategy that produced a piece of expert knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    Mec,
    Cot,
    Doc,
}

/// A deduplicated template paired with distilled expert knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePair {
    pub template: LogTemplate,
    pub knowledge_text: String,
    pub strategy: Strategy,
    pub epochs_used: usize,
    pub passed: bool,
    pub trace_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    Pair,
    Ranking,
    MultiLabel,
}

/// One record of a downstream task dataset. The variant must agree with the
/// owning dataset's [`TaskKind`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskItem {
    Pair {
        text_a: String,
        text_b: String,
        label: bool,
    },
    Ranking {
        text: String,
        candidates: Vec<String>,
        gold: usize,
    },
    MultiLabel {
        text: String,
        labels: Vec<String>,
    },
    Single {
        text: String,
        label: String,
    },
}

impl TaskItem {
    /// The log-side text of the item, i.e. the part perturbation applies to.
    pub fn log_text(&self) -> &str {
        match self {
            TaskItem::Single { text, .. } => text,
            TaskItem::Pair { text_a, .. } => text_a,
            TaskItem::Ranking { text, .. } => text,
            TaskItem::MultiLabel { text, .. } => text,
        }
    }

    fn set_log_text(&mut self, new_text: String) {
        match self {
            TaskItem::Single { text, .. } => *text = new_text,
            TaskItem::Pair { text_a, .. } => *text_a = new_text,
            TaskItem::Ranking { text, .. } => *text = new_text,
            TaskItem::MultiLabel { text, .. } => *text = new_text,
        }
    }
}

/// A downstream dataset in one of the four task shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub label_space: Vec<String>,
    pub split: Split,
    pub items: Vec<TaskItem>,
}

impl TaskDataset {
    /// Checks the per-kind item invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let labels: HashSet<&str> = self.label_space.iter().map(String::as_str).collect();
        for (i, item) in self.items.iter().enumerate() {
            let fail = |msg: String| Err(CorpusError::Invariant(format!("item {i}: {msg}")));
            match (self.kind, item) {
                (TaskKind::SingleLabel, TaskItem::Single { label, .. }) => {
                    if !labels.contains(label.as_str()) {
                        return fail(format!("label `{label}` not in label_space"));
                    }
                }
                (TaskKind::Pair, TaskItem::Pair { .. }) => {}
                (TaskKind::Ranking, TaskItem::Ranking { candidates, gold, .. }) => {
                    if candidates.is_empty() {
                        return fail("empty candidate list".into());
                    }
                    if *gold >= candidates.len() {
                        return fail(format!("gold index {gold} out of range"));
                    }
                }
                (TaskKind::MultiLabel, TaskItem::MultiLabel { labels: ls, .. }) => {
                    if ls.is_empty() {
                        return fail("empty label subset".into());
                    }
                    for l in ls {
                        if !labels.contains(l.as_str()) {
                            return fail(format!("label `{l}` not in label_space"));
                        }
                    }
                }
                (kind, item) => {
                    return fail(format!("item shape {item:?} does not match kind {kind:?}"));
                }
            }
        }
        Ok(())
    }
}

fn masking_passes() -> &'static [(Regex, &'static str)] {
    static PASSES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    PASSES.get_or_init(|| {
        vec![
            // Right-hand side of key=value fields. The value stops at
            // whitespace or bracket/comma delimiters so trailing punctuation
            // stays intact.
            (
                Regex::new(r"([A-Za-z_][A-Za-z0-9_.-]*=)[^\s,()\[\]{}]+").unwrap(),
                "$1<*>",
            ),
            // Dotted quads, optionally with a port suffix.
            (
                Regex::new(r"(?:\d{1,3}\.){3}\d{1,3}(?::\d+)?").unwrap(),
                "<*>",
            ),
            // Hex literals.
            (Regex::new(r"\b0[xX][0-9a-fA-F]+\b").unwrap(), "<*>"),
            // Plain integers and decimals.
            (Regex::new(r"\b\d+(?:\.\d+)?\b").unwrap(), "<*>"),
        ]
    })
}

/// Extracts a parameter-masked template from a raw log record.
///
/// Numbers, IPv4 addresses, hex literals and `key=value` right-hand sides are
/// replaced by the `<*>` sentinel; every other token is preserved in order.
/// The transformation is idempotent.
pub fn parse_template(raw: &LogRecord) -> Result<LogTemplate, CorpusError> {
    if raw.raw_text.trim().is_empty() {
        return Err(CorpusError::InvalidLog(format!(
            "record `{}` has empty raw_text",
            raw.id
        )));
    }
    let mut text = raw.raw_text.clone();
    for (re, replacement) in masking_passes() {
        text = re.replace_all(&text, *replacement).into_owned();
    }
    let slot_count = text.matches(SLOT).count();
    Ok(LogTemplate {
        template_text: text,
        slot_count,
        origin_ids: vec![raw.id.clone()],
    })
}

/// Collapses templates with identical text, merging their origin ids.
/// First-occurrence order is preserved; the result has pairwise distinct
/// template texts.
pub fn dedupe_templates(templates: Vec<LogTemplate>) -> Vec<LogTemplate> {
    let mut by_text: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<LogTemplate> = Vec::new();
    for t in templates {
        match by_text.get(&t.template_text) {
            Some(&idx) => out[idx].origin_ids.extend(t.origin_ids),
            None => {
                by_text.insert(t.template_text.clone(), out.len());
                out.push(t);
            }
        }
    }
    out
}

/// Rounds half-up to the nearest integer; `x` must be non-negative.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn whitespace_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Applies 1-3 random word insertions or deletions to `text`, retrying until
/// the result differs from the original.
fn perturb_text(text: &str, vocabulary: &[String], rng: &mut ChaCha8Rng) -> String {
    for _ in 0..8 {
        let mut tokens = whitespace_tokens(text);
        let edits = rng.gen_range(1..=3usize);
        for _ in 0..edits {
            let insert = tokens.len() <= 1 || rng.gen_bool(0.5);
            if insert && !vocabulary.is_empty() {
                let word = vocabulary[rng.gen_range(0..vocabulary.len())].clone();
                let pos = rng.gen_range(0..=tokens.len());
                tokens.insert(pos, word);
            } else if tokens.len() > 1 {
                let pos = rng.gen_range(0..tokens.len());
                tokens.remove(pos);
            }
        }
        let candidate = tokens.join(" ");
        if candidate != text {
            return candidate;
        }
    }
    // Inserting a word always changes the token count.
    let mut tokens = whitespace_tokens(text);
    let word = vocabulary
        .first()
        .cloned()
        .unwrap_or_else(|| "noise".to_owned());
    tokens.insert(0, word);
    tokens.join(" ")
}

/// Replaces exactly `round(injection_ratio * |ds|)` items with unstable
/// variants: each perturbed log differs from its original by 1-3 word
/// insertions or deletions. Labels are untouched; deterministic per seed.
pub fn perturb_dataset(
    ds: &TaskDataset,
    injection_ratio: f64,
    seed: u64,
) -> Result<TaskDataset, CorpusError> {
    if !(0.0..=1.0).contains(&injection_ratio) || !injection_ratio.is_finite() {
        return Err(CorpusError::InvalidRatio(injection_ratio, "[0,1]"));
    }
    if ds.items.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let n = ds.items.len();
    let count = round_half_up(injection_ratio * n as f64).min(n);

    // Insertion vocabulary comes from the dataset's own log texts; sorted so
    // the draw order is independent of item order quirks.
    let mut vocabulary: Vec<String> = ds
        .items
        .iter()
        .flat_map(|item| whitespace_tokens(item.log_text()))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    vocabulary.sort();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices.truncate(count);
    indices.sort_unstable();

    let mut out = ds.clone();
    for idx in indices {
        let new_text = perturb_text(out.items[idx].log_text(), &vocabulary, &mut rng);
        out.items[idx].set_log_text(new_text);
    }
    Ok(out)
}

/// Samples `ceil(keep_ratio * |ds|)` train items without replacement,
/// preserving original item order and the label space.
pub fn subsample(ds: &TaskDataset, keep_ratio: f64, seed: u64) -> Result<TaskDataset, CorpusError> {
    if keep_ratio <= 0.0 || keep_ratio > 1.0 || !keep_ratio.is_finite() {
        return Err(CorpusError::InvalidRatio(keep_ratio, "(0,1]"));
    }
    if ds.split != Split::Train {
        return Err(CorpusError::WrongSplit(ds.split));
    }
    let n = ds.items.len();
    let keep = ((keep_ratio * n as f64).ceil() as usize).min(n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices.truncate(keep);
    indices.sort_unstable();

    Ok(TaskDataset {
        kind: ds.kind,
        label_space: ds.label_space.clone(),
        split: ds.split,
        items: indices.iter().map(|&i| ds.items[i].clone()).collect(),
    })
}
