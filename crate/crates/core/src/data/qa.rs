//! Question records (JSON Lines), vocabulary and dataset metadata files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoders::AnswerSpace;
use crate::error::{MhnError, Result};
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Action,
    Transition,
    FrameqaAttr,
    Count,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::FrameqaAttr,
        TaskKind::Action,
        TaskKind::Transition,
        TaskKind::Count,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Action => "action",
            TaskKind::Transition => "transition",
            TaskKind::FrameqaAttr => "frameqa_attr",
            TaskKind::Count => "count",
        }
    }

    pub fn is_multi_choice(self) -> bool {
        self == TaskKind::Transition
    }
}

/// One question about one video. `answer` is a class id, a count, or the index of the correct candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub video_id: String,
    pub task: TaskKind,
    pub question: Vec<String>,
    pub answer: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Vec<String>>>,
}

impl QaRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.question.is_empty() {
            return Err("empty question".into());
        }
        match (&self.candidates, self.task.is_multi_choice()) {
            (None, true) => return Err(format!("{} record lacks candidates", self.task.name())),
            (Some(_), false) => {
                return Err(format!(
                    "{} record must not carry candidates",
                    self.task.name()
                ))
            }
            (Some(c), true) => {
                if self.answer < 0 || self.answer as usize >= c.len() {
                    return Err(format!(
                        "answer {} is not a candidate index (K = {})",
                        self.answer,
                        c.len()
                    ));
                }
                if c.iter().any(Vec::is_empty) {
                    return Err("empty answer candidate".into());
                }
            }
            (None, false) => {}
        }
        Ok(())
    }
}

pub fn write_qa(path: impl AsRef<Path>, records: &[QaRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| MhnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| MhnError::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| MhnError::io(path, e))?;
    }
    w.flush().map_err(|e| MhnError::io(path, e))
}

/// Reads and validates a JSON Lines file; errors carry the byte offset of the offending line.
pub fn read_qa(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| MhnError::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MhnError::io(path, e))?;
        let start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| MhnError::Format {
            path: path.to_path_buf(),
            offset: start,
            message: format!("line {}: {message}", i + 1),
        };
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        rec.validate().map_err(fail)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_vocab(path: impl AsRef<Path>, vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, vocab.to_json()).map_err(|e| MhnError::io(path, e))
}

pub fn read_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MhnError::io(path, e))?;
    Vocab::from_json(&text, path)
}

/// Dataset-level description stored next to the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub frames: usize,
    pub app_dim: usize,
    pub mot_dim: usize,
    /// Answer space of each task present in the dataset.
    pub answer_spaces: BTreeMap<TaskKind, AnswerSpace>,
    /// Free-form extras (generator settings, probe results).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| MhnError::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| MhnError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MhnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MhnError::json(path, e))
}
