//! Parallel visual reasoning: one transformer encoder layer applied to every
//! level's visual output, then a question-guided convex combination of the
//! pooled results.

use rand::Rng;

use crate::error::{MhnError, Result};
use crate::layers::{FeedForward, LayerNorm};
use crate::rmi::{mca_normed, McaWeights};
use crate::tensor::{Graph, ParamStore, Var};

/// Self-attention encoder layer (pre-norm, residual around attention and feed-forward).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub mca: McaWeights,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            mca: McaWeights::new(store, &format!("{name}.mca"), d, heads, rng)?,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_hidden, rng)?,
        })
    }

    /// Scalar parameters in one encoder layer.
    pub fn param_count(d: usize, ffn_hidden: usize) -> usize {
        4 * d * d + 4 * d + (d * ffn_hidden + ffn_hidden) + (ffn_hidden * d + d)
    }

    pub fn zero_residual_outputs(&self, store: &mut ParamStore) {
        store.get_mut(self.mca.output).data.fill(0.0);
        self.ffn.outer.zero(store);
    }
}

/// Encoder layers used by PVR: one shared layer, or one per level in the unshared ablation.
#[derive(Debug, Clone)]
pub struct PvrParams {
    pub encoders: Vec<EncoderLayer>,
}

impl PvrParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        levels: usize,
        shared: bool,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoders = if shared {
            vec![EncoderLayer::new(
                store,
                "pvr.encoder",
                d,
                heads,
                ffn_hidden,
                rng,
            )?]
        } else {
            (1..=levels)
                .map(|l| {
                    EncoderLayer::new(store, &format!("pvr.encoder{l}"), d, heads, ffn_hidden, rng)
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(PvrParams { encoders })
    }

    /// Encoder used for the given 0-based level.
    pub fn for_level(&self, level: usize) -> &EncoderLayer {
        if self.encoders.len() == 1 {
            &self.encoders[0]
        } else {
            &self.encoders[level]
        }
    }
}

/// `Z = X + MCA(X, X)`, `R = Z + f(LN(Z))`. Returns `R` and the per-head self-attention matrices.
pub fn encode_level(g: &mut Graph<'_>, x_hat: Var, p: &EncoderLayer) -> Result<(Var, Vec<Var>)> {
    let xn = p.ln_attn.forward(g, x_hat)?;
    let att = mca_normed(g, xn, xn, &p.mca)?;
    let z = g.add(x_hat, att.out)?;
    let zn = p.ln_ffn.forward(g, z)?;
    let f = p.ffn.forward(g, zn)?;
    Ok((g.add(z, f)?, att.attention))
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// Answer feature `[d]`.
    pub o: Var,
    /// Level weights `[1 x N]`.
    pub alpha: Var,
}

/// `alpha = softmax_n(mean(Q^n) . mean(R^n) / temperature)`, `O = sum_n alpha_n mean(R^n)`.
pub fn fuse_levels(
    g: &mut Graph<'_>,
    q_hats: &[Var],
    rs: &[Var],
    temperature: f64,
) -> Result<FusionOutput> {
    if q_hats.is_empty() || rs.is_empty() {
        return Err(MhnError::Config(
            "fuse_levels needs at least one level".into(),
        ));
    }
    if q_hats.len() != rs.len() {
        return Err(MhnError::Config(format!(
            "fuse_levels got {} question levels and {} visual levels",
            q_hats.len(),
            rs.len()
        )));
    }
    let mut scores = Vec::with_capacity(rs.len());
    let mut pooled = Vec::with_capacity(rs.len());
    for (&q, &r) in q_hats.iter().zip(rs) {
        let q_bar = g.mean_rows(q)?;
        let r_bar = g.mean_rows(r)?;
        let d = g.shape(r_bar)[0];
        let q_row = g.reshape(q_bar, &[1, d])?;
        let r_row = g.reshape(r_bar, &[1, d])?;
        scores.push(g.matmul_nt(q_row, r_row)?);
        pooled.push(r_row);
    }
    let scores = g.concat_cols(&scores)?;
    let scores = g.scale(scores, 1.0 / temperature);
    let alpha = g.softmax_last(scores)?;
    let stacked = g.concat_rows(&pooled)?;
    let o = g.matmul(alpha, stacked)?;
    let d = g.shape(o)[1];
    let o = g.reshape(o, &[d])?;
    Ok(FusionOutput { o, alpha })
}
