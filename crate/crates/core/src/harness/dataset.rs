use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use crate::data::synth::{FEATURES_FILE, META_FILE, VOCAB_FILE};
use crate::data::{read_features, read_qa, read_vocab, DatasetMeta, QaRecord, TaskKind};
use crate::decoders::AnswerSpace;
use crate::error::{MhnError, Result};
use crate::model::{Mhn, ModelConfig, ModelSpec, Sample, Target};
use crate::text::Vocab;

use super::config::DataConfig;

/// Dataset description for a task selection: merged answer space and vocabulary.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub meta: DatasetMeta,
    pub vocab: Vocab,
    pub answer: AnswerSpace,
    /// Class-id offset of each open-ended task inside the merged answer space.
    pub offsets: BTreeMap<TaskKind, usize>,
}

impl TaskData {
    pub fn load(dir: &Path, tasks: &[TaskKind]) -> Result<Self> {
        let meta: DatasetMeta = crate::data::qa::read_json(dir.join(META_FILE))?;
        let vocab = read_vocab(dir.join(VOCAB_FILE))?;
        let mut offsets = BTreeMap::new();
        let mut classes: Vec<String> = Vec::new();
        let mut single = None;
        for &t in tasks {
            let space = meta.answer_spaces.get(&t).ok_or_else(|| {
                MhnError::Config(format!(
                    "data.tasks names {} but the dataset has no such records",
                    t.name()
                ))
            })?;
            match space {
                AnswerSpace::OpenEnded { classes: c } => {
                    offsets.insert(t, classes.len());
                    classes.extend(c.iter().cloned());
                }
                other => single = Some(other.clone()),
            }
        }
        let answer = match single {
            Some(s) if tasks.len() == 1 => s,
            Some(_) => {
                return Err(MhnError::Config(
                    "data.tasks mixes a count or multi-choice task with others".into(),
                ))
            }
            None => AnswerSpace::OpenEnded { classes },
        };
        answer.validate()?;
        Ok(TaskData {
            meta,
            vocab,
            answer,
            offsets,
        })
    }

    pub fn spec(&self, model: &ModelConfig) -> ModelSpec {
        ModelSpec {
            model: model.clone(),
            app_dim: self.meta.app_dim,
            mot_dim: self.meta.mot_dim,
            vocab_size: self.vocab.len(),
            answer: self.answer.clone(),
        }
    }

    fn target(&self, r: &QaRecord) -> std::result::Result<Target, String> {
        match (&self.answer, r.task) {
            (AnswerSpace::OpenEnded { classes }, t) => {
                let offset = *self.offsets.get(&t).ok_or("task not selected")?;
                let local = match self.meta.answer_spaces.get(&t) {
                    Some(AnswerSpace::OpenEnded { classes }) => classes.len(),
                    _ => 0,
                };
                if r.answer < 0 || r.answer as usize >= local {
                    return Err(format!("class id {} outside 0..{local}", r.answer));
                }
                debug_assert!(offset + (r.answer as usize) < classes.len());
                Ok(Target::Class(offset + r.answer as usize))
            }
            (AnswerSpace::Count { min, max }, _) => {
                if r.answer < *min || r.answer > *max {
                    return Err(format!("count {} outside [{min}, {max}]", r.answer));
                }
                Ok(Target::Count(r.answer))
            }
            (AnswerSpace::MultiChoice { k }, _) => {
                let n = r.candidates.as_ref().map_or(0, Vec::len);
                if n != *k {
                    return Err(format!("{n} candidates, dataset declares {k}"));
                }
                Ok(Target::Choice(r.answer as usize))
            }
        }
    }
}

/// Prepared samples of one split, with the task of each sample.
#[derive(Debug, Clone)]
pub struct SplitSamples {
    pub name: String,
    pub samples: Vec<Sample>,
    pub tasks: Vec<TaskKind>,
}

impl SplitSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads the named splits, streaming the feature file once and keeping only referenced videos.
pub fn load_splits(
    model: &Mhn,
    data: &TaskData,
    cfg: &DataConfig,
    names: &[&str],
) -> Result<Vec<SplitSamples>> {
    let dir = &cfg.dir;
    let mut per_split = Vec::with_capacity(names.len());
    let mut wanted: HashSet<String> = HashSet::new();
    for &name in names {
        let path = dir.join(format!("{name}.jsonl"));
        let mut records: Vec<QaRecord> = read_qa(&path)?
            .into_iter()
            .filter(|r| cfg.tasks.contains(&r.task))
            .collect();
        if name == "train" {
            if let Some(limit) = cfg.train_limit {
                records.truncate(limit);
            }
        }
        wanted.extend(records.iter().map(|r| r.video_id.clone()));
        per_split.push((name, path, records));
    }

    let mut videos: HashMap<String, Arc<crate::model::VideoInputs>> = HashMap::new();
    for rec in read_features(dir.join(FEATURES_FILE))? {
        let rec = rec?;
        if wanted.contains(&rec.video_id) {
            let prepared = model.prepare(&rec)?;
            videos.insert(rec.video_id, Arc::new(prepared));
        }
    }

    let mut out = Vec::with_capacity(names.len());
    for (name, path, records) in per_split {
        let mut samples = Vec::with_capacity(records.len());
        let mut tasks = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let bad = |m: String| MhnError::Format {
                path: path.clone(),
                offset: 0,
                message: format!("record {i} ({}): {m}", r.video_id),
            };
            let video = videos
                .get(&r.video_id)
                .cloned()
                .ok_or_else(|| bad("video id not found in the feature file".into()))?;
            let target = data.target(r).map_err(bad)?;
            samples.push(Sample {
                video,
                question: data.vocab.encode(&r.question),
                candidates: r
                    .candidates
                    .iter()
                    .flatten()
                    .map(|c| data.vocab.encode(c))
                    .collect(),
                target,
            });
            tasks.push(r.task);
        }
        out.push(SplitSamples {
            name: name.to_string(),
            samples,
            tasks,
        });
    }
    Ok(out)
}
