//! Synthetic VideoQA data with answers planted at different temporal granularities.
//!
//! Per frame `t` of a video with `F` frames:
//!
//! * appearance: `E_app[object_t] + noise`. One majority object fills
//!   `F/4 + 2` random frames, the rest cycle through the other objects so
//!   that none of them ties it.
//! * motion: `cos(2 pi t w / F) E_act[action] + E_mot[segment_t] + pulse_t E_rep + noise`,
//!   where `w` is the clip window, `segment_t` is the "before" motif in the
//!   first half and the "after" motif in the second, and `pulse_t` marks `c`
//!   separated two-frame repetitions.
//!
//! The oscillation has period `F / w` frames, which is exactly the sampling
//! stride of the coarsest scale: there every sampled frame sits at the same
//! phase and the clip-mean motion row carries `E_act`. At finer scales a clip
//! covers whole periods and the term averages to zero. The action is therefore
//! only readable at scale 1, the majority object needs dense frame coverage,
//! the transition needs at least two clips, and the count needs every other
//! frame.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::write_features;
use super::qa::{write_json, write_qa, write_vocab, DatasetMeta, QaRecord, TaskKind};
use crate::decoders::AnswerSpace;
use crate::error::{MhnError, Result};
use crate::sampling::FeatureRecord;
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const FEATURES_FILE: &str = "features.mhnf";
pub const VOCAB_FILE: &str = "vocab.json";
pub const META_FILE: &str = "meta.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub frames: usize,
    /// Clip window the action oscillation is tuned to.
    pub window: usize,
    pub objects: usize,
    pub actions: usize,
    pub motifs: usize,
    pub app_dim: usize,
    pub mot_dim: usize,
    pub sigma: f64,
    pub count_min: i64,
    pub count_max: i64,
    pub candidates: usize,
    pub tasks: Vec<TaskKind>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 600,
            val: 200,
            test: 200,
            frames: 16,
            window: 4,
            objects: 8,
            actions: 8,
            motifs: 4,
            app_dim: 32,
            mot_dim: 32,
            sigma: 0.3,
            count_min: 1,
            count_max: 5,
            candidates: 4,
            tasks: TaskKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MhnError::Config(m));
        for (name, v) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
            ("frames", self.frames),
            ("window", self.window),
            ("app_dim", self.app_dim),
            ("mot_dim", self.mot_dim),
        ] {
            if v == 0 {
                return err(format!("synthetic.{name} must be at least 1"));
            }
        }
        if self.objects < 2 || self.actions < 2 || self.motifs < 2 {
            return err(
                "synthetic.objects, synthetic.actions and synthetic.motifs must be at least 2"
                    .into(),
            );
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return err(format!(
                "synthetic.sigma must be finite and non-negative, got {}",
                self.sigma
            ));
        }
        if self.frames % self.window != 0 {
            return err(format!(
                "synthetic.frames ({}) must be a multiple of synthetic.window ({})",
                self.frames, self.window
            ));
        }
        if self.count_min < 1 || self.count_min > self.count_max {
            return err(format!(
                "synthetic count range [{}, {}] must satisfy 1 <= count_min <= count_max",
                self.count_min, self.count_max
            ));
        }
        let lead = majority_frames(self.frames);
        if lead > self.frames || (self.frames - lead).div_ceil(self.objects - 1) >= lead {
            return err(format!(
                "synthetic.objects ({}) is too small for a unique majority object over {} frames",
                self.objects, self.frames
            ));
        }
        if 3 * self.count_max as usize - 1 > self.frames {
            return err(format!(
                "synthetic.count_max ({}) needs {} frames for separated repetitions, have {}",
                self.count_max,
                3 * self.count_max - 1,
                self.frames
            ));
        }
        if self.candidates < 2 || self.candidates > self.motifs * (self.motifs - 1) {
            return err(format!(
                "synthetic.candidates ({}) must lie in 2..={}",
                self.candidates,
                self.motifs * (self.motifs - 1)
            ));
        }
        if self.tasks.is_empty() {
            return err("synthetic.tasks must not be empty".into());
        }
        Ok(())
    }
}

/// Latent description of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatents {
    pub objects: Vec<usize>,
    pub majority: usize,
    pub action: usize,
    pub before: usize,
    pub after: usize,
    /// First frame of each two-frame repetition.
    pub pulses: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub features: Vec<FeatureRecord>,
    pub splits: Vec<(String, Vec<QaRecord>)>,
    pub vocab: Vocab,
    pub meta: DatasetMeta,
    pub latents: Vec<VideoLatents>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Majority-object accuracy of the least-squares probe on noiseless mean appearance.
    pub noiseless: f64,
    /// Same probe on the generated (noisy) features.
    pub observed: f64,
}

pub fn object_name(i: usize) -> String {
    format!("obj{i}")
}

pub fn action_name(i: usize) -> String {
    format!("act{i}")
}

pub fn motif_name(i: usize) -> String {
    format!("motif{i}")
}

pub fn question_tokens(task: TaskKind) -> Vec<String> {
    let q: &[&str] = match task {
        TaskKind::FrameqaAttr => &["which", "object", "is", "most"],
        TaskKind::Action => &["which", "action", "is", "shown"],
        TaskKind::Transition => &["what", "happens", "before", "after"],
        TaskKind::Count => &["how", "many", "repetitions", "occur"],
    };
    q.iter().map(|s| s.to_string()).collect()
}

fn candidate_tokens(first: usize, second: usize) -> Vec<String> {
    vec![
        "from".into(),
        motif_name(first),
        "to".into(),
        motif_name(second),
    ]
}

/// `n` labels from `0..classes`, each used `n / classes` or one more times, in random order.
fn balanced<R: Rng>(n: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % classes).collect();
    v.shuffle(rng);
    v
}

fn matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..rows)
        .map(|_| (0..cols).map(|_| normal.sample(rng)).collect())
        .collect()
}

struct Embeddings {
    app: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    mot: Vec<Vec<f64>>,
    rep: Vec<f64>,
}

fn pulse_starts<R: Rng>(count: usize, frames: usize, rng: &mut R) -> Vec<usize> {
    // Strictly increasing s_i in 0..=F-2c, then start_i = s_i + 2i keeps a gap of at least one frame.
    let mut slots: Vec<usize> = (0..=frames - 2 * count).collect();
    slots.shuffle(rng);
    let mut s: Vec<usize> = slots[..count].to_vec();
    s.sort_unstable();
    s.iter().enumerate().map(|(i, &v)| v + 2 * i).collect()
}

fn render<R: Rng>(
    id: &str,
    cfg: &SyntheticConfig,
    emb: &Embeddings,
    lat: &VideoLatents,
    noise: &Normal<f64>,
    rng: &mut R,
) -> Result<FeatureRecord> {
    let f = cfg.frames;
    let period = (f / cfg.window) as f64;
    let mut pulse = vec![0.0; f];
    for &p in &lat.pulses {
        pulse[p] = 1.0;
        pulse[p + 1] = 1.0;
    }
    let mut app = Vec::with_capacity(f * cfg.app_dim);
    let mut mot = Vec::with_capacity(f * cfg.mot_dim);
    for t in 0..f {
        for &e in &emb.app[lat.objects[t]] {
            app.push(e + noise.sample(rng));
        }
        let phase = (2.0 * std::f64::consts::PI * t as f64 / period).cos();
        let seg = if t < f / 2 { lat.before } else { lat.after };
        for j in 0..cfg.mot_dim {
            let v = phase * emb.act[lat.action][j] + emb.mot[seg][j] + pulse[t] * emb.rep[j];
            mot.push(v + noise.sample(rng));
        }
    }
    FeatureRecord::new(
        id,
        Tensor::new(vec![f, cfg.app_dim], app)?,
        Tensor::new(vec![f, cfg.mot_dim], mot)?,
    )
}

/// Frames showing the majority object. Small enough that a sparse sample of
/// frames often misses the plurality, large enough to beat every other object.
pub fn majority_frames(frames: usize) -> usize {
    frames / 4 + 2
}

/// Builds the whole dataset in memory.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let emb = Embeddings {
        app: matrix(cfg.objects, cfg.app_dim, &mut rng),
        act: matrix(cfg.actions, cfg.mot_dim, &mut rng),
        mot: matrix(cfg.motifs, cfg.mot_dim, &mut rng),
        rep: matrix(1, cfg.mot_dim, &mut rng).remove(0),
    };
    let noise =
        Normal::new(0.0, cfg.sigma.max(0.0)).map_err(|e| MhnError::Config(e.to_string()))?;
    let f = cfg.frames;
    let counts = (cfg.count_max - cfg.count_min + 1) as usize;

    let mut features = Vec::new();
    let mut latents = Vec::new();
    let mut splits = Vec::new();
    for (split, n) in SPLITS.iter().zip([cfg.train, cfg.val, cfg.test]) {
        let majority = balanced(n, cfg.objects, &mut rng);
        let action = balanced(n, cfg.actions, &mut rng);
        let before = balanced(n, cfg.motifs, &mut rng);
        let count = balanced(n, counts, &mut rng);
        let correct_at = balanced(n, cfg.candidates, &mut rng);
        let mut records = Vec::new();
        for i in 0..n {
            let id = format!("{split}{i:05}");
            let maj = majority[i];
            let mut frames: Vec<usize> = (0..f).collect();
            frames.shuffle(&mut rng);
            let mut others: Vec<usize> = (0..cfg.objects).filter(|&o| o != maj).collect();
            others.shuffle(&mut rng);
            let lead = majority_frames(f);
            let mut objects = vec![0; f];
            for (k, &t) in frames.iter().enumerate() {
                objects[t] = if k < lead {
                    maj
                } else {
                    others[(k - lead) % others.len()]
                };
            }
            let b = before[i];
            let a = {
                let x = rng.gen_range(0..cfg.motifs - 1);
                if x >= b {
                    x + 1
                } else {
                    x
                }
            };
            let c = count[i] + cfg.count_min as usize;
            let pulses = pulse_starts(c, f, &mut rng);

            let lat = VideoLatents {
                objects,
                majority: maj,
                action: action[i],
                before: b,
                after: a,
                pulses,
            };
            features.push(render(&id, cfg, &emb, &lat, &noise, &mut rng)?);

            // Multi-choice candidates: the true pair, its reversal, then distinct random pairs.
            let mut wrong = vec![(a, b)];
            while wrong.len() < cfg.candidates - 1 {
                let x = rng.gen_range(0..cfg.motifs);
                let y = rng.gen_range(0..cfg.motifs);
                if x != y && (x, y) != (b, a) && !wrong.contains(&(x, y)) {
                    wrong.push((x, y));
                }
            }
            wrong.shuffle(&mut rng);
            let mut cands: Vec<Vec<String>> = wrong
                .into_iter()
                .map(|(x, y)| candidate_tokens(x, y))
                .collect();
            cands.insert(correct_at[i], candidate_tokens(b, a));

            for &task in &TaskKind::ALL {
                if !cfg.tasks.contains(&task) {
                    continue;
                }
                let (answer, candidates) = match task {
                    TaskKind::FrameqaAttr => (maj as i64, None),
                    TaskKind::Action => (action[i] as i64, None),
                    TaskKind::Count => (c as i64, None),
                    TaskKind::Transition => (correct_at[i] as i64, Some(cands.clone())),
                };
                records.push(QaRecord {
                    video_id: id.clone(),
                    task,
                    question: question_tokens(task),
                    answer,
                    candidates,
                });
            }
            latents.push(lat);
        }
        splits.push((split.to_string(), records));
    }

    let mut tokens: Vec<String> = TaskKind::ALL
        .iter()
        .flat_map(|&t| question_tokens(t))
        .collect();
    tokens.extend(["from".to_string(), "to".to_string()]);
    tokens.extend((0..cfg.motifs).map(motif_name));
    let vocab = Vocab::from_tokens(tokens.iter().map(String::as_str));

    let mut answer_spaces = BTreeMap::new();
    for &task in &cfg.tasks {
        let space = match task {
            TaskKind::FrameqaAttr => AnswerSpace::OpenEnded {
                classes: (0..cfg.objects).map(object_name).collect(),
            },
            TaskKind::Action => AnswerSpace::OpenEnded {
                classes: (0..cfg.actions).map(action_name).collect(),
            },
            TaskKind::Count => AnswerSpace::Count {
                min: cfg.count_min,
                max: cfg.count_max,
            },
            TaskKind::Transition => AnswerSpace::MultiChoice { k: cfg.candidates },
        };
        answer_spaces.insert(task, space);
    }

    let probe = probe_majority(&emb.app, &features, &latents, f);
    let meta = DatasetMeta {
        frames: f,
        app_dim: cfg.app_dim,
        mot_dim: cfg.mot_dim,
        answer_spaces,
        extra: serde_json::json!({ "generator": cfg, "frameqa_probe": probe }),
    };
    Ok(SyntheticData {
        features,
        splits,
        vocab,
        meta,
        latents,
    })
}

/// Least-squares probe: solves `E_app^T w = mean appearance` for the object
/// frequencies `w` and predicts the largest.
fn probe_majority(
    e_app: &[Vec<f64>],
    features: &[FeatureRecord],
    latents: &[VideoLatents],
    frames: usize,
) -> ProbeReport {
    let (objects, dim) = (e_app.len(), e_app[0].len());
    let basis = DMatrix::from_fn(dim, objects, |r, c| e_app[c][r]);
    let svd = basis.svd(true, true);
    let solve = |mean: Vec<f64>| -> Option<usize> {
        let y = DMatrix::from_vec(dim, 1, mean);
        let w = svd.solve(&y, 1e-10).ok()?;
        Some(crate::decoders::argmax(w.as_slice()))
    };
    let (mut clean_hits, mut noisy_hits) = (0usize, 0usize);
    for (rec, lat) in features.iter().zip(latents) {
        let mut clean = vec![0.0; dim];
        for &o in &lat.objects {
            for (m, e) in clean.iter_mut().zip(&e_app[o]) {
                *m += e / frames as f64;
            }
        }
        let mut noisy = vec![0.0; dim];
        for t in 0..frames {
            for (m, e) in noisy.iter_mut().zip(rec.appearance.row(t)) {
                *m += e / frames as f64;
            }
        }
        clean_hits += usize::from(solve(clean) == Some(lat.majority));
        noisy_hits += usize::from(solve(noisy) == Some(lat.majority));
    }
    let n = features.len().max(1) as f64;
    ProbeReport {
        noiseless: clean_hits as f64 / n,
        observed: noisy_hits as f64 / n,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub videos: usize,
    pub records: usize,
    pub probe: ProbeReport,
}

/// Writes the dataset to `dir`: features, one JSON Lines file per split, vocabulary and metadata.
pub fn generate_synthetic(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<GenerateSummary> {
    let dir = dir.as_ref();
    let data = synthesize(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| MhnError::io(dir, e))?;
    write_features(dir.join(FEATURES_FILE), &data.features)?;
    for (name, records) in &data.splits {
        write_qa(dir.join(format!("{name}.jsonl")), records)?;
    }
    write_vocab(dir.join(VOCAB_FILE), &data.vocab)?;
    write_json(dir.join(META_FILE), &data.meta)?;
    let probe: ProbeReport = serde_json::from_value(data.meta.extra["frameqa_probe"].clone())
        .expect("probe serialized above");
    Ok(GenerateSummary {
        videos: data.features.len(),
        records: data.splits.iter().map(|(_, r)| r.len()).sum(),
        probe,
    })
}
