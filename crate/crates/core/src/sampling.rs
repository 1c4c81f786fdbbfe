//! Multiscale clip sampling and assembly of the per-scale appearance-motion
//! sequence.
//!
//! At scale `n` a video contributes `T * 2^(n-1)` uniformly spaced frames,
//! grouped into `2^(n-1)` clips of `T` frames. Each clip yields `T` appearance
//! rows followed by one motion row, so the sequence at scale `n` has
//! `2^(n-1) * (T + 1)` rows.

use crate::error::{MhnError, Result};
use crate::layers::Linear;
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// `L_X^n = 2^(n-1) (T + 1)`.
pub fn sequence_length(window: usize, scale: usize) -> usize {
    clips_at(scale) * (window + 1)
}

/// Number of clips sampled at `scale`.
pub fn clips_at(scale: usize) -> usize {
    assert!(scale >= 1, "scales are 1-based");
    1 << (scale - 1)
}

/// Total clips emitted for scales `1..=scales`.
pub fn total_clips(scales: usize) -> usize {
    (1..=scales).map(clips_at).sum()
}

/// Frame indices for one scale, split into consecutive clips.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPlan {
    pub scale: usize,
    pub window: usize,
    pub clips: Vec<Vec<usize>>,
}

impl ClipPlan {
    pub fn frame_count(&self) -> usize {
        self.clips.iter().map(Vec::len).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.clips.iter().flatten().copied()
    }
}

/// Uniform-stride sampling: `idx_j = floor(j * F / K) mod F` for `K = T * 2^(n-1)`.
///
/// Videos with fewer than `K` frames repeat frames, so every input is accepted.
pub fn sample_clip_indices(frames: usize, window: usize, scale: usize) -> Result<ClipPlan> {
    if frames == 0 || window == 0 || scale == 0 {
        return Err(MhnError::Config(format!(
            "sample_clip_indices needs frames, window and scale >= 1 (got {frames}, {window}, {scale})"
        )));
    }
    let k = window * clips_at(scale);
    let idx: Vec<usize> = (0..k).map(|j| (j * frames / k) % frames).collect();
    Ok(ClipPlan {
        scale,
        window,
        clips: idx.chunks(window).map(<[usize]>::to_vec).collect(),
    })
}

/// Per-frame appearance and motion features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub video_id: String,
    /// `[F x D_app]`
    pub appearance: Tensor,
    /// `[F x D_mot]`
    pub motion: Tensor,
}

impl FeatureRecord {
    pub fn new(video_id: impl Into<String>, appearance: Tensor, motion: Tensor) -> Result<Self> {
        match (appearance.shape.as_slice(), motion.shape.as_slice()) {
            ([fa, _], [fm, _]) if fa == fm && *fa >= 1 => Ok(FeatureRecord {
                video_id: video_id.into(),
                appearance,
                motion,
            }),
            _ => Err(MhnError::dim(
                "FeatureRecord::new",
                &appearance.shape,
                &motion.shape,
            )),
        }
    }

    pub fn frames(&self) -> usize {
        self.appearance.shape[0]
    }

    pub fn app_dim(&self) -> usize {
        self.appearance.shape[1]
    }

    pub fn mot_dim(&self) -> usize {
        self.motion.shape[1]
    }
}

/// Raw (unprojected) rows needed to assemble one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleInputs {
    pub scale: usize,
    pub window: usize,
    /// Sampled appearance rows, `[T * 2^(n-1) x D_app]`.
    pub appearance: Tensor,
    /// Per-clip mean of the sampled motion rows, `[2^(n-1) x D_mot]`.
    pub motion: Tensor,
}

impl ScaleInputs {
    pub fn gather(record: &FeatureRecord, plan: &ClipPlan) -> Result<Self> {
        let f = record.frames();
        if let Some(bad) = plan.indices().find(|&i| i >= f) {
            return Err(MhnError::dim("ScaleInputs::gather", &[f], &[bad]));
        }
        let (da, dm) = (record.app_dim(), record.mot_dim());
        let mut app = Vec::with_capacity(plan.frame_count() * da);
        for i in plan.indices() {
            app.extend_from_slice(record.appearance.row(i));
        }
        let mut mot = Vec::with_capacity(plan.clips.len() * dm);
        for clip in &plan.clips {
            let mut mean = vec![0.0; dm];
            for &i in clip {
                for (m, v) in mean.iter_mut().zip(record.motion.row(i)) {
                    *m += v;
                }
            }
            let inv = 1.0 / clip.len() as f64;
            mot.extend(mean.into_iter().map(|v| v * inv));
        }
        Ok(ScaleInputs {
            scale: plan.scale,
            window: plan.window,
            appearance: Tensor::new(vec![plan.frame_count(), da], app)?,
            motion: Tensor::new(vec![plan.clips.len(), dm], mot)?,
        })
    }

    pub fn clips(&self) -> usize {
        self.motion.shape[0]
    }

    pub fn len(&self) -> usize {
        self.appearance.shape[0] + self.clips()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row order of the assembled sequence, indexing into
    /// `[appearance rows; motion rows]`: per clip, its `T` appearance rows and then its motion row.
    pub fn temporal_order(&self) -> Vec<usize> {
        let frames = self.appearance.shape[0];
        let mut order = Vec::with_capacity(self.len());
        for c in 0..self.clips() {
            order.extend(c * self.window..(c + 1) * self.window);
            order.push(frames + c);
        }
        order
    }
}

/// Projections and positional tables that turn raw rows into `X^n`.
#[derive(Debug, Clone)]
pub struct VisualProjection {
    pub appearance: Linear,
    pub motion: Linear,
    /// One positional table per scale, `[2^(n-1)(T_max + 1) x d]`.
    pub positional: Vec<ParamId>,
}

/// The assembled sequence `X^n` of one scale.
#[derive(Debug, Clone, Copy)]
pub struct ScaleBundle {
    pub scale: usize,
    pub seq: Var,
    pub len: usize,
}

/// Projects, interleaves in temporal order and adds the positional embedding.
pub fn assemble_scale(
    g: &mut Graph<'_>,
    inputs: &ScaleInputs,
    proj: &VisualProjection,
) -> Result<ScaleBundle> {
    if inputs.appearance.shape[1] != proj.appearance.in_dim {
        return Err(MhnError::dim(
            "assemble_scale(appearance)",
            &inputs.appearance.shape,
            &[proj.appearance.in_dim, proj.appearance.out_dim],
        ));
    }
    if inputs.motion.shape[1] != proj.motion.in_dim {
        return Err(MhnError::dim(
            "assemble_scale(motion)",
            &inputs.motion.shape,
            &[proj.motion.in_dim, proj.motion.out_dim],
        ));
    }
    let pos_id = *proj.positional.get(inputs.scale - 1).ok_or_else(|| {
        MhnError::Config(format!("no positional table for scale {}", inputs.scale))
    })?;

    let app = g.constant(inputs.appearance.clone());
    let mot = g.constant(inputs.motion.clone());
    let app = proj.appearance.forward(g, app)?;
    let mot = proj.motion.forward(g, mot)?;
    let stacked = g.concat_rows(&[app, mot])?;
    let seq = g.gather_rows(stacked, &inputs.temporal_order())?;

    let len = inputs.len();
    let pos = g.param(pos_id);
    let table_rows = g.shape(pos)[0];
    if table_rows < len {
        return Err(MhnError::dim(
            "assemble_scale(positional)",
            &[table_rows],
            &[len],
        ));
    }
    let rows: Vec<usize> = (0..len).collect();
    let pos = g.gather_rows(pos, &rows)?;
    let seq = g.add(seq, pos)?;
    Ok(ScaleBundle {
        scale: inputs.scale,
        seq,
        len,
    })
}
