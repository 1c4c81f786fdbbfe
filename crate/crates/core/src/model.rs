//! The full network: visual assembly per scale, question encoding, recurrent
//! multimodal interaction, parallel visual reasoning and a task decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{
    argmax, count_predict, hinge_loss, mse, AnswerSpace, CountHead, MultiChoiceHead, OpenEndedHead,
};
use crate::error::{MhnError, Result};
use crate::layers::Linear;
use crate::pvr::{encode_level, fuse_levels, FusionOutput, PvrParams};
use crate::rmi::{rmi_forward, LevelOutput, RmiParams};
use crate::sampling::{
    assemble_scale, sample_clip_indices, sequence_length, FeatureRecord, ScaleInputs,
    VisualProjection,
};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::TextEncoder;

/// Which question representation scores each level during fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionQuestion {
    /// Level `n` is scored against its own question output.
    #[default]
    PerLevel,
    /// Every level is scored against the last level's question output.
    Final,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Number of scales and interaction levels `N`.
    pub scales: usize,
    /// Frames per clip `T`.
    pub window: usize,
    /// Largest `T` the positional tables can hold.
    pub max_window: usize,
    /// Scale fed to each level, a permutation of `1..=N`. Empty means `1, 2, .., N`.
    pub level_order: Vec<usize>,
    /// Feed this one scale to every level.
    pub single_scale: Option<usize>,
    pub recurrence: bool,
    pub share_pvr: bool,
    /// Run PVR on the last level only.
    pub high_level_only_pvr: bool,
    pub fusion_question: FusionQuestion,
    /// Divisor of the level-fusion logits. `None` means `d`; `Some(1.0)` is the plain dot product,
    /// which saturates the level weights onto whichever level learns first.
    pub fusion_temperature: Option<f64>,
    /// Feed-forward inner width; `None` means `4d`.
    pub ffn_hidden: Option<usize>,
    pub word_dim: usize,
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            scales: 3,
            window: 4,
            max_window: 16,
            level_order: Vec::new(),
            single_scale: None,
            recurrence: true,
            share_pvr: true,
            high_level_only_pvr: false,
            fusion_question: FusionQuestion::PerLevel,
            fusion_temperature: None,
            ffn_hidden: None,
            word_dim: 64,
            max_tokens: 32,
        }
    }
}

impl ModelConfig {
    /// Published configuration: `d = 512`, eight heads, three scales, 16-frame clips, 300-d word vectors.
    pub fn paper() -> Self {
        ModelConfig {
            d: 512,
            heads: 8,
            scales: 3,
            window: 16,
            max_window: 16,
            word_dim: 300,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MhnError::Config(m));
        if self.d == 0 || self.d % 2 != 0 {
            return err(format!("model.d must be even and positive, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return err(format!(
                "model.d ({}) must be divisible by model.heads ({})",
                self.d, self.heads
            ));
        }
        if self.scales == 0 {
            return err("model.scales must be at least 1".into());
        }
        if self.window == 0 {
            return err("model.window must be at least 1".into());
        }
        if self.window > self.max_window {
            return err(format!(
                "model.window ({}) exceeds model.max_window ({})",
                self.window, self.max_window
            ));
        }
        if !self.level_order.is_empty() {
            let mut sorted = self.level_order.clone();
            sorted.sort_unstable();
            if sorted != (1..=self.scales).collect::<Vec<_>>() {
                return err(format!(
                    "model.level_order {:?} is not a permutation of 1..={}",
                    self.level_order, self.scales
                ));
            }
        }
        if let Some(s) = self.single_scale {
            if s == 0 || s > self.scales {
                return err(format!(
                    "model.single_scale ({s}) must lie in 1..={}",
                    self.scales
                ));
            }
        }
        if self.word_dim == 0 || self.max_tokens == 0 {
            return err("model.word_dim and model.max_tokens must be positive".into());
        }
        if self.ffn_hidden == Some(0) {
            return err("model.ffn_hidden must be positive".into());
        }
        if let Some(t) = self.fusion_temperature {
            if !(t.is_finite() && t > 0.0) {
                return err(format!(
                    "model.fusion_temperature must be positive and finite, got {t}"
                ));
            }
        }
        Ok(())
    }

    pub fn fusion_temp(&self) -> f64 {
        self.fusion_temperature.unwrap_or(self.d as f64)
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d)
    }

    /// Scale (1-based) consumed by each level.
    pub fn level_scales(&self) -> Vec<usize> {
        if let Some(s) = self.single_scale {
            return vec![s; self.scales];
        }
        if self.level_order.is_empty() {
            (1..=self.scales).collect()
        } else {
            self.level_order.clone()
        }
    }
}

/// Architecture plus the dataset-dependent widths; everything needed to rebuild the parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub app_dim: usize,
    pub mot_dim: usize,
    pub vocab_size: usize,
    pub answer: AnswerSpace,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.answer.validate()?;
        if self.app_dim == 0 || self.mot_dim == 0 {
            return Err(MhnError::Config(
                "feature dimensions must be positive".into(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(MhnError::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    OpenEnded(OpenEndedHead),
    Count { head: CountHead, min: i64, max: i64 },
    MultiChoice(MultiChoiceHead),
}

/// Supervision target for one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Count(i64),
    Choice(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(usize),
    Count { raw: f64, value: i64 },
    Choice(usize),
}

/// Sampled rows of every scale `1..=N` for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInputs {
    pub scales: Vec<ScaleInputs>,
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample<V = std::sync::Arc<VideoInputs>> {
    pub video: V,
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub target: Target,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<Var>,
    pub levels: Vec<LevelOutput>,
    /// Levels (0-based) that went through PVR.
    pub pvr_levels: Vec<usize>,
    pub pvr_attention: Vec<Vec<Var>>,
    pub reasoned: Vec<Var>,
    pub fusion: FusionOutput,
}

/// Parameter counts grouped by module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub visual: usize,
    pub text: usize,
    pub rmi: usize,
    pub pvr: usize,
    pub pvr_encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct Mhn {
    pub spec: ModelSpec,
    pub visual: VisualProjection,
    pub text: TextEncoder,
    pub rmi: RmiParams,
    pub pvr: PvrParams,
    pub decoder: Decoder,
}

impl Mhn {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<(Mhn, ParamStore)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = &spec.model;
        let d = m.d;

        let appearance = Linear::new(
            &mut store,
            "visual.appearance",
            spec.app_dim,
            d,
            true,
            &mut rng,
        )?;
        let motion = Linear::new(&mut store, "visual.motion", spec.mot_dim, d, true, &mut rng)?;
        let mut positional = Vec::with_capacity(m.scales);
        for n in 1..=m.scales {
            let rows = sequence_length(m.max_window, n);
            let table = Tensor::randn(&[rows, d], 0.5, &mut rng);
            positional.push(store.insert(format!("visual.positional{n}"), table)?);
        }
        let visual = VisualProjection {
            appearance,
            motion,
            positional,
        };

        let text = TextEncoder::new(
            &mut store,
            spec.vocab_size,
            m.word_dim,
            d,
            m.max_tokens,
            &mut rng,
        )?;
        let rmi = RmiParams::new(
            &mut store,
            m.scales,
            d,
            m.heads,
            m.ffn_width(),
            m.recurrence,
            &mut rng,
        )?;
        let pvr_count = if m.high_level_only_pvr { 1 } else { m.scales };
        let pvr = PvrParams::new(
            &mut store,
            pvr_count,
            m.share_pvr,
            d,
            m.heads,
            m.ffn_width(),
            &mut rng,
        )?;
        let decoder = match &spec.answer {
            AnswerSpace::OpenEnded { classes } => {
                Decoder::OpenEnded(OpenEndedHead::new(&mut store, d, classes.len(), &mut rng)?)
            }
            AnswerSpace::Count { min, max } => Decoder::Count {
                head: CountHead::new(&mut store, d, &mut rng)?,
                min: *min,
                max: *max,
            },
            AnswerSpace::MultiChoice { .. } => {
                Decoder::MultiChoice(MultiChoiceHead::new(&mut store, d, &mut rng)?)
            }
        };
        Ok((
            Mhn {
                spec,
                visual,
                text,
                rmi,
                pvr,
                decoder,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.model
    }

    /// Samples and gathers the rows of every scale once; the result is reused by every question about the video.
    pub fn prepare(&self, record: &FeatureRecord) -> Result<VideoInputs> {
        let m = self.config();
        if record.app_dim() != self.spec.app_dim || record.mot_dim() != self.spec.mot_dim {
            return Err(MhnError::dim(
                "prepare(feature widths)",
                &[record.app_dim(), record.mot_dim()],
                &[self.spec.app_dim, self.spec.mot_dim],
            ));
        }
        let scales = (1..=m.scales)
            .map(|n| {
                let plan = sample_clip_indices(record.frames(), m.window, n)?;
                ScaleInputs::gather(record, &plan)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoInputs { scales })
    }

    /// Runs everything up to the fused answer feature `O` for one token sequence.
    pub fn answer_feature(
        &self,
        g: &mut Graph<'_>,
        video: &VideoInputs,
        tokens: &[usize],
    ) -> Result<Trace> {
        let m = self.config();
        let level_scales = m.level_scales();
        let mut assembled: Vec<Option<Var>> = vec![None; video.scales.len()];
        let mut inputs = Vec::with_capacity(level_scales.len());
        for &n in &level_scales {
            let slot = assembled
                .get_mut(n - 1)
                .ok_or_else(|| MhnError::Config(format!("video inputs lack scale {n}")))?;
            let seq = match *slot {
                Some(v) => v,
                None => {
                    let v = assemble_scale(g, &video.scales[n - 1], &self.visual)?.seq;
                    *slot = Some(v);
                    v
                }
            };
            inputs.push(seq);
        }

        let q0 = self.text.encode(g, tokens)?.seq;
        let levels = rmi_forward(g, &inputs, q0, &self.rmi)?;

        let pvr_levels: Vec<usize> = if m.high_level_only_pvr {
            vec![levels.len() - 1]
        } else {
            (0..levels.len()).collect()
        };
        let mut reasoned = Vec::with_capacity(pvr_levels.len());
        let mut pvr_attention = Vec::with_capacity(pvr_levels.len());
        let mut q_hats = Vec::with_capacity(pvr_levels.len());
        let final_q = levels.last().map(|l| l.q_hat).expect("at least one level");
        for (i, &l) in pvr_levels.iter().enumerate() {
            let (r, att) = encode_level(g, levels[l].x_hat, self.pvr.for_level(i))?;
            reasoned.push(r);
            pvr_attention.push(att);
            q_hats.push(match m.fusion_question {
                FusionQuestion::PerLevel => levels[l].q_hat,
                FusionQuestion::Final => final_q,
            });
        }
        let fusion = fuse_levels(g, &q_hats, &reasoned, m.fusion_temp())?;
        Ok(Trace {
            inputs,
            levels,
            pvr_levels,
            pvr_attention,
            reasoned,
            fusion,
        })
    }

    /// Task output: logits `[1 x |A|]`, raw count `[]`, or candidate scores `[1 x K]`.
    pub fn output(
        &self,
        g: &mut Graph<'_>,
        video: &VideoInputs,
        question: &[usize],
        candidates: &[Vec<usize>],
    ) -> Result<Var> {
        let o_q = self.answer_feature(g, video, question)?.fusion.o;
        match &self.decoder {
            Decoder::OpenEnded(head) => head.logits(g, o_q),
            Decoder::Count { head, .. } => head.raw(g, o_q),
            Decoder::MultiChoice(head) => {
                if let AnswerSpace::MultiChoice { k } = self.spec.answer {
                    if candidates.len() != k {
                        return Err(MhnError::Contract(format!(
                            "expected {k} answer candidates, got {}",
                            candidates.len()
                        )));
                    }
                }
                let o_a = candidates
                    .iter()
                    .map(|c| Ok(self.answer_feature(g, video, c)?.fusion.o))
                    .collect::<Result<Vec<_>>>()?;
                head.scores(g, o_q, &o_a)
            }
        }
    }

    /// Training loss for one sample together with the prediction read off the same forward pass.
    pub fn loss<V: AsRef<VideoInputs>>(
        &self,
        g: &mut Graph<'_>,
        sample: &Sample<V>,
    ) -> Result<(Var, Prediction)> {
        let out = self.output(
            g,
            sample.video.as_ref(),
            &sample.question,
            &sample.candidates,
        )?;
        let pred = self.read_prediction(g.value(out));
        let loss = match (&self.decoder, sample.target) {
            (Decoder::OpenEnded(_), Target::Class(c)) => g.cross_entropy(out, c)?,
            (Decoder::Count { .. }, Target::Count(c)) => mse(g, out, c as f64)?,
            (Decoder::MultiChoice(_), Target::Choice(c)) => hinge_loss(g, out, c)?,
            (_, t) => return Err(self.task_mismatch(t)),
        };
        Ok((loss, pred))
    }

    pub fn predict<V: AsRef<VideoInputs>>(
        &self,
        store: &ParamStore,
        sample: &Sample<V>,
    ) -> Result<Prediction> {
        let mut g = Graph::new(store);
        let out = self.output(
            &mut g,
            sample.video.as_ref(),
            &sample.question,
            &sample.candidates,
        )?;
        Ok(self.read_prediction(g.value(out)))
    }

    fn read_prediction(&self, out: &[f64]) -> Prediction {
        match &self.decoder {
            Decoder::OpenEnded(_) => Prediction::Class(argmax(out)),
            Decoder::Count { min, max, .. } => Prediction::Count {
                raw: out[0],
                value: count_predict(out[0], *min, *max),
            },
            Decoder::MultiChoice(_) => Prediction::Choice(argmax(out)),
        }
    }

    fn task_mismatch(&self, t: Target) -> MhnError {
        MhnError::Contract(format!(
            "target {t:?} does not match the model's {} decoder",
            self.spec.answer.kind()
        ))
    }

    /// Scalar parameters in one PVR encoder layer.
    pub fn encoder_param_count(&self) -> usize {
        crate::pvr::EncoderLayer::param_count(self.config().d, self.config().ffn_width())
    }

    pub fn param_breakdown(&self, store: &ParamStore) -> ParamBreakdown {
        ParamBreakdown {
            visual: store.count_prefix("visual."),
            text: store.count_prefix("text."),
            rmi: store.count_prefix("rmi."),
            pvr: store.count_prefix("pvr."),
            pvr_encoder: self.encoder_param_count(),
            decoder: store.count_prefix("decoder."),
            total: store.count(),
        }
    }
}

impl AsRef<VideoInputs> for VideoInputs {
    fn as_ref(&self) -> &VideoInputs {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{numeric_param_grad, rel_error};
    use rand::Rng;

    pub(crate) fn tiny_spec(answer: AnswerSpace) -> ModelSpec {
        ModelSpec {
            model: ModelConfig {
                d: 8,
                heads: 2,
                scales: 2,
                window: 2,
                max_window: 2,
                word_dim: 6,
                max_tokens: 8,
                ..ModelConfig::default()
            },
            app_dim: 5,
            mot_dim: 3,
            vocab_size: 10,
            answer,
        }
    }

    fn record(frames: usize, seed: u64) -> FeatureRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureRecord::new(
            "v",
            Tensor::randn(&[frames, 5], 1.0, &mut rng),
            Tensor::randn(&[frames, 3], 1.0, &mut rng),
        )
        .unwrap()
    }

    fn open() -> AnswerSpace {
        AnswerSpace::OpenEnded {
            classes: (0..4).map(|i| format!("c{i}")).collect(),
        }
    }

    #[test]
    fn config_errors_name_fields() {
        let mut c = ModelConfig {
            d: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("model.d") && e.contains("model.heads"), "{e}");
        c.d = 7;
        assert!(c.validate().unwrap_err().to_string().contains("even"));
        let c = ModelConfig {
            level_order: vec![1, 1, 3],
            ..ModelConfig::default()
        };
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("model.level_order"));
    }

    #[test]
    fn forward_shapes_per_task() {
        let rec = record(8, 1);
        for (answer, target, width) in [
            (open(), Target::Class(2), 4),
            (AnswerSpace::Count { min: 1, max: 10 }, Target::Count(3), 1),
            (AnswerSpace::MultiChoice { k: 3 }, Target::Choice(1), 3),
        ] {
            let (m, store) = Mhn::new(tiny_spec(answer), 0).unwrap();
            let video = std::sync::Arc::new(m.prepare(&rec).unwrap());
            let sample = Sample {
                video,
                question: vec![2, 3, 4],
                candidates: vec![vec![5], vec![6, 7], vec![8]],
                target,
            };
            let mut g = Graph::new(&store);
            let out = m
                .output(&mut g, &sample.video, &sample.question, &sample.candidates)
                .unwrap();
            assert_eq!(g.value(out).len(), width);
            let (loss, _) = m.loss(&mut g, &sample).unwrap();
            assert!(g.scalar(loss).is_finite());
        }
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let (m, store) = Mhn::new(tiny_spec(open()), 0).unwrap();
        let sample = Sample {
            video: m.prepare(&record(8, 1)).unwrap(),
            question: vec![2],
            candidates: vec![],
            target: Target::Count(2),
        };
        let mut g = Graph::new(&store);
        assert!(matches!(
            m.loss(&mut g, &sample),
            Err(MhnError::Contract(_))
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Mhn::new(tiny_spec(open()), 9).unwrap();
        let (_, b) = Mhn::new(tiny_spec(open()), 9).unwrap();
        let (_, c) = Mhn::new(tiny_spec(open()), 10).unwrap();
        let flat = |s: &ParamStore| {
            s.iter()
                .flat_map(|(_, _, t)| t.data.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn count_ignores_window_and_order() {
        let base = tiny_spec(open());
        let (m, s) = Mhn::new(base.clone(), 0).unwrap();
        let mut other = base.clone();
        other.model.window = 1;
        other.model.level_order = vec![2, 1];
        let (_, s2) = Mhn::new(other, 0).unwrap();
        assert_eq!(s.count(), s2.count());
        let b = m.param_breakdown(&s);
        assert_eq!(b.visual + b.text + b.rmi + b.pvr + b.decoder, b.total);
    }

    #[test]
    fn full_model_gradient_matches_differences() {
        let (m, mut store) = Mhn::new(tiny_spec(open()), 3).unwrap();
        let video = m.prepare(&record(6, 2)).unwrap();
        let sample = Sample {
            video,
            question: vec![2, 5, 3],
            candidates: vec![],
            target: Target::Class(1),
        };
        let grads = {
            let mut g = Graph::new(&store);
            let (loss, _) = m.loss(&mut g, &sample).unwrap();
            g.backward(loss).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<_> = store.ids().collect();
        for _ in 0..6 {
            let id = ids[rng.gen_range(0..ids.len())];
            let analytic = grads.param(id).unwrap().to_vec();
            let numeric = numeric_param_grad(&mut store, id, 1e-5, |s| {
                let mut g = Graph::new(s);
                let (loss, _) = m.loss(&mut g, &sample).unwrap();
                g.scalar(loss)
            });
            let err = rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "{}: {err}", store.name(id));
        }
    }
}
