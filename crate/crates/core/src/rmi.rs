//! Recurrent multimodal interaction.
//!
//! Each level runs a cross-modal attention block in which the visual stream
//! queries the question stream, followed by per-stream feed-forward layers.
//! Consecutive levels are chained by an attentional alignment that lets the
//! current scale (any length) read the previous level's output (any length).

use rand::Rng;

use crate::error::{MhnError, Result};
use crate::layers::{FeedForward, LayerNorm};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Multi-head attention projections: per head `[d x d/H]` for query, key and
/// value, plus the `[d x d]` output map applied after concatenation.
#[derive(Debug, Clone)]
pub struct McaWeights {
    pub heads: Vec<HeadWeights>,
    pub output: ParamId,
    pub d: usize,
}

impl McaWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(MhnError::Config(format!(
                "model.d ({d}) must be divisible by model.heads ({heads})"
            )));
        }
        let dh = d / heads;
        let std = 1.0 / (d as f64).sqrt();
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            hs.push(HeadWeights {
                query: store.insert(
                    format!("{name}.head{h}.query"),
                    Tensor::randn(&[d, dh], std, rng),
                )?,
                key: store.insert(
                    format!("{name}.head{h}.key"),
                    Tensor::randn(&[d, dh], std, rng),
                )?,
                value: store.insert(
                    format!("{name}.head{h}.value"),
                    Tensor::randn(&[d, dh], std, rng),
                )?,
            });
        }
        let output = store.insert(format!("{name}.output"), Tensor::randn(&[d, d], std, rng))?;
        Ok(McaWeights {
            heads: hs,
            output,
            d,
        })
    }

    pub fn param_count(&self) -> usize {
        4 * self.d * self.d
    }
}

/// Attention output together with the per-head attention matrices.
#[derive(Debug, Clone)]
pub struct Attended {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// Multi-head attention over already-normalized inputs: queries from `xn`,
/// keys and values from `qn`, temperature `sqrt(d)`.
pub fn mca_normed(g: &mut Graph<'_>, xn: Var, qn: Var, w: &McaWeights) -> Result<Attended> {
    let d = w.d;
    if g.shape(xn).last() != Some(&d) || g.shape(qn).last() != Some(&d) {
        return Err(MhnError::dim("mca", g.shape(xn), g.shape(qn)));
    }
    let inv_temp = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads.len());
    let mut attention = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let wq = g.param(head.query);
        let wk = g.param(head.key);
        let wv = g.param(head.value);
        let fq = g.matmul(xn, wq)?;
        let fk = g.matmul(qn, wk)?;
        let fv = g.matmul(qn, wv)?;
        let scores = g.matmul_nt(fq, fk)?;
        let scores = g.scale(scores, inv_temp);
        let att = g.softmax_last(scores)?;
        outs.push(g.matmul(att, fv)?);
        attention.push(att);
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.param(w.output);
    let out = g.matmul(cat, wo)?;
    Ok(Attended { out, attention })
}

/// Cross-modal attention with layer normalization of both inputs.
pub fn mca(
    g: &mut Graph<'_>,
    x: Var,
    q: Var,
    ln_x: &LayerNorm,
    ln_q: &LayerNorm,
    w: &McaWeights,
) -> Result<Attended> {
    let xn = ln_x.forward(g, x)?;
    let qn = ln_q.forward(g, q)?;
    mca_normed(g, xn, qn, w)
}

/// Parameters of one interaction block. Blocks at different levels never share weights.
#[derive(Debug, Clone)]
pub struct InteractionBlock {
    pub mca: McaWeights,
    /// Normalizes the visual stream before attention.
    pub ln_x: LayerNorm,
    /// Normalizes the question stream; the same normalized tensor feeds the
    /// attention keys/values and the question feed-forward.
    pub ln_q: LayerNorm,
    /// Normalizes the attended visual stream before its feed-forward.
    pub ln_ffn: LayerNorm,
    pub ffn_x: FeedForward,
    pub ffn_q: FeedForward,
}

impl InteractionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(InteractionBlock {
            mca: McaWeights::new(store, &format!("{name}.mca"), d, heads, rng)?,
            ln_x: LayerNorm::new(store, &format!("{name}.ln_x"), d)?,
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn_x: FeedForward::new(store, &format!("{name}.ffn_x"), d, ffn_hidden, rng)?,
            ffn_q: FeedForward::new(store, &format!("{name}.ffn_q"), d, ffn_hidden, rng)?,
        })
    }

    /// Zeroes the last linear map of every residual branch, turning the block into the identity.
    pub fn zero_residual_outputs(&self, store: &mut ParamStore) {
        store.get_mut(self.mca.output).data.fill(0.0);
        self.ffn_x.outer.zero(store);
        self.ffn_q.outer.zero(store);
    }
}

#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub x_hat: Var,
    pub q_hat: Var,
    /// Per-head cross-modal attention matrices.
    pub attention: Vec<Var>,
    /// Alignment attention that produced this level's input, if any.
    pub alignment: Option<Var>,
}

pub fn interaction_block(
    g: &mut Graph<'_>,
    x_in: Var,
    q_in: Var,
    p: &InteractionBlock,
) -> Result<LevelOutput> {
    let xn = p.ln_x.forward(g, x_in)?;
    let qn = p.ln_q.forward(g, q_in)?;
    let att = mca_normed(g, xn, qn, &p.mca)?;
    let x_tilde = g.add(x_in, att.out)?;

    let xf = p.ln_ffn.forward(g, x_tilde)?;
    let xf = p.ffn_x.forward(g, xf)?;
    let x_hat = g.add(x_tilde, xf)?;

    let qf = p.ffn_q.forward(g, qn)?;
    let q_hat = g.add(q_in, qf)?;
    Ok(LevelOutput {
        x_hat,
        q_hat,
        attention: att.attention,
        alignment: None,
    })
}

/// Projections for the alignment between level `n-1` and level `n`.
#[derive(Debug, Clone)]
pub struct Recurrence {
    pub w1: ParamId,
    pub w2: ParamId,
    pub d: usize,
}

impl Recurrence {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(Recurrence {
            w1: store.insert(format!("{name}.w1"), Tensor::randn(&[d, d], std, rng))?,
            w2: store.insert(format!("{name}.w2"), Tensor::randn(&[d, d], std, rng))?,
            d,
        })
    }
}

/// `x_cur + softmax((x_cur W1)(x_prev W2)^T / sqrt(d)) x_prev`; returns the
/// aligned input and the `[L_cur x L_prev]` attention matrix.
pub fn recurrent_align(
    g: &mut Graph<'_>,
    x_cur: Var,
    x_prev_hat: Var,
    w: &Recurrence,
) -> Result<(Var, Var)> {
    if g.shape(x_cur).last() != Some(&w.d) || g.shape(x_prev_hat).last() != Some(&w.d) {
        return Err(MhnError::dim(
            "recurrent_align",
            g.shape(x_cur),
            g.shape(x_prev_hat),
        ));
    }
    let w1 = g.param(w.w1);
    let w2 = g.param(w.w2);
    let a = g.matmul(x_cur, w1)?;
    let b = g.matmul(x_prev_hat, w2)?;
    let scores = g.matmul_nt(a, b)?;
    let scores = g.scale(scores, 1.0 / (w.d as f64).sqrt());
    let att = g.softmax_last(scores)?;
    let read = g.matmul(att, x_prev_hat)?;
    Ok((g.add(x_cur, read)?, att))
}

#[derive(Debug, Clone)]
pub struct RmiParams {
    pub blocks: Vec<InteractionBlock>,
    /// `align[i]` connects level `i + 1` to level `i + 2` (1-based levels). Empty when recurrence is off.
    pub align: Vec<Recurrence>,
}

impl RmiParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        levels: usize,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        recurrence: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (1..=levels)
            .map(|l| {
                InteractionBlock::new(store, &format!("rmi.level{l}"), d, heads, ffn_hidden, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let align = if recurrence {
            (2..=levels)
                .map(|l| Recurrence::new(store, &format!("rmi.align{l}"), d, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(RmiParams { blocks, align })
    }
}

/// Runs every level. `inputs[l]` is the visual sequence assigned to level `l`.
///
/// With recurrence, level `l > 0` reads the previous level's visual output
/// through [`recurrent_align`] and continues from its question output. Without
/// it, every level sees only its own scale and the original question.
pub fn rmi_forward(
    g: &mut Graph<'_>,
    inputs: &[Var],
    q0: Var,
    params: &RmiParams,
) -> Result<Vec<LevelOutput>> {
    if inputs.is_empty() {
        return Err(MhnError::Config(
            "rmi_forward needs at least one level".into(),
        ));
    }
    if inputs.len() != params.blocks.len() {
        return Err(MhnError::Config(format!(
            "{} visual inputs for {} interaction blocks",
            inputs.len(),
            params.blocks.len()
        )));
    }
    let recurrent = !params.align.is_empty();
    let mut outputs: Vec<LevelOutput> = Vec::with_capacity(inputs.len());
    for (l, (&x, block)) in inputs.iter().zip(&params.blocks).enumerate() {
        let (x_in, q_in, alignment) = match outputs.last() {
            Some(prev) if recurrent => {
                let (x_in, att) = recurrent_align(g, x, prev.x_hat, &params.align[l - 1])?;
                (x_in, prev.q_hat, Some(att))
            }
            _ => (x, q0, None),
        };
        let mut out = interaction_block(g, x_in, q_in, block)?;
        out.alignment = alignment;
        outputs.push(out);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{numeric_param_grad, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut store = ParamStore::new();
        assert!(matches!(
            McaWeights::new(&mut store, "m", 6, 4, &mut rng()),
            Err(MhnError::Config(_))
        ));
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut store = ParamStore::new();
        let w = McaWeights::new(&mut store, "m", 4, 2, &mut rng()).unwrap();
        let mut r = rng();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut r));
        let q = g.constant(Tensor::randn(&[1, 4], 1.0, &mut r));
        let att = mca_normed(&mut g, x, q, &w).unwrap();
        for a in &att.attention {
            assert_eq!(g.value(*a), &[1.0, 1.0, 1.0]);
        }
        // Every output row equals (value row) @ W_o.
        let out = g.value(att.out).to_vec();
        assert_eq!(out[0..4], out[4..8]);
        assert_eq!(out[0..4], out[8..12]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut store = ParamStore::new();
        let w = McaWeights::new(&mut store, "m", 4, 2, &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::randn(&[2, 4], 1.0, &mut rng()));
        let q = g.constant(
            Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.5, 0.3, -1.0, 2.0, 0.5]).unwrap(),
        );
        let att = mca_normed(&mut g, x, q, &w).unwrap();
        for a in &att.attention {
            assert!(g.value(*a).iter().all(|p| (p - 0.5).abs() < 1e-15));
        }
    }

    /// Head-by-head evaluation with plain loops, independent of the graph kernels.
    fn brute_force_mca(x: &Tensor, q: &Tensor, store: &ParamStore, w: &McaWeights) -> Vec<f64> {
        let d = w.d;
        let dh = d / w.heads.len();
        let (lx, lq) = (x.shape[0], q.shape[0]);
        let proj = |m: &Tensor, p: ParamId| -> Vec<Vec<f64>> {
            let wt = store.get(p);
            (0..m.shape[0])
                .map(|i| {
                    (0..dh)
                        .map(|j| {
                            (0..d)
                                .map(|k| m.data[i * d + k] * wt.data[k * dh + j])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        let mut concat = vec![vec![0.0; d]; lx];
        for (h, head) in w.heads.iter().enumerate() {
            let fq = proj(x, head.query);
            let fk = proj(q, head.key);
            let fv = proj(q, head.value);
            for i in 0..lx {
                let s: Vec<f64> = (0..lq)
                    .map(|j| (0..dh).map(|k| fq[i][k] * fk[j][k]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..dh {
                    concat[i][h * dh + k] = (0..lq).map(|j| e[j] / z * fv[j][k]).sum();
                }
            }
        }
        let wo = store.get(w.output);
        (0..lx)
            .flat_map(|i| {
                let row = concat[i].clone();
                (0..d).map(move |j| (0..d).map(|k| row[k] * wo.data[k * d + j]).sum::<f64>())
            })
            .collect()
    }

    #[test]
    fn mca_matches_brute_force_heads() {
        let mut store = ParamStore::new();
        let w = McaWeights::new(&mut store, "m", 4, 2, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let q = Tensor::randn(&[2, 4], 1.0, &mut r);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let qv = g.constant(q.clone());
        let att = mca_normed(&mut g, xv, qv, &w).unwrap();
        let expected = brute_force_mca(&x, &q, &store, &w);
        for (a, b) in g.value(att.out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn block(d: usize, heads: usize) -> (InteractionBlock, ParamStore) {
        let mut store = ParamStore::new();
        let b = InteractionBlock::new(&mut store, "blk", d, heads, 4 * d, &mut rng()).unwrap();
        (b, store)
    }

    #[test]
    fn block_preserves_shapes() {
        let (b, store) = block(8, 2);
        let mut r = rng();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::randn(&[17, 8], 1.0, &mut r));
        let q = g.constant(Tensor::randn(&[5, 8], 1.0, &mut r));
        let out = interaction_block(&mut g, x, q, &b).unwrap();
        assert_eq!(g.shape(out.x_hat), &[17, 8]);
        assert_eq!(g.shape(out.q_hat), &[5, 8]);
    }

    #[test]
    fn zeroed_residual_outputs_give_identity() {
        let (b, mut store) = block(8, 2);
        b.zero_residual_outputs(&mut store);
        let mut r = rng();
        let x0 = Tensor::randn(&[4, 8], 1.0, &mut r);
        let q0 = Tensor::randn(&[3, 8], 1.0, &mut r);
        let mut g = Graph::new(&store);
        let x = g.constant(x0.clone());
        let q = g.constant(q0.clone());
        let out = interaction_block(&mut g, x, q, &b).unwrap();
        assert_eq!(g.value(out.x_hat), &x0.data[..]);
        assert_eq!(g.value(out.q_hat), &q0.data[..]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (b, mut store) = block(8, 2);
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let x0 = Tensor::randn(&[3, 8], 1.0, &mut r);
        let q0 = Tensor::randn(&[2, 8], 1.0, &mut r);
        let rx = Tensor::randn(&[3, 8], 1.0, &mut r);
        let rq = Tensor::randn(&[2, 8], 1.0, &mut r);
        let build = |g: &mut Graph<'_>| -> Var {
            let x = g.constant(x0.clone());
            let q = g.constant(q0.clone());
            let out = interaction_block(g, x, q, &b).unwrap();
            let a = g.constant(rx.clone());
            let c = g.constant(rq.clone());
            let px = g.mul(out.x_hat, a).unwrap();
            let pq = g.mul(out.q_hat, c).unwrap();
            let sx = g.sum_all(px);
            let sq = g.sum_all(pq);
            g.add(sx, sq).unwrap()
        };
        let analytic: Vec<(ParamId, Vec<f64>)> = {
            let mut g = Graph::new(&store);
            let loss = build(&mut g);
            let grads = g.backward(loss).unwrap();
            grads.params().map(|(id, v)| (id, v.to_vec())).collect()
        };
        assert_eq!(analytic.len(), store.len());
        for (id, a) in analytic {
            let n = numeric_param_grad(&mut store, id, 1e-6, |s| {
                let mut g = Graph::new(s);
                let l = build(&mut g);
                g.scalar(l)
            });
            let err = rel_error(&a, &n);
            assert!(err < 1e-4, "{}: {err}", store.name(id));
        }
    }

    #[test]
    fn zero_previous_output_leaves_input_unchanged() {
        let mut store = ParamStore::new();
        let w = Recurrence::new(&mut store, "r", 4, &mut rng()).unwrap();
        let x0 = Tensor::randn(&[5, 4], 1.0, &mut rng());
        let mut g = Graph::new(&store);
        let x = g.constant(x0.clone());
        let prev = g.constant(Tensor::zeros(&[3, 4]));
        let (out, att) = recurrent_align(&mut g, x, prev, &w).unwrap();
        assert_eq!(g.value(out), &x0.data[..]);
        assert_eq!(g.shape(att), &[5, 3]);
    }

    #[test]
    fn alignment_matches_direct_evaluation() {
        let mut store = ParamStore::new();
        let w = Recurrence::new(&mut store, "r", 4, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(33);
        let cur = Tensor::randn(&[2, 4], 1.0, &mut r);
        let prev = Tensor::randn(&[3, 4], 1.0, &mut r);
        let mut g = Graph::new(&store);
        let c = g.constant(cur.clone());
        let p = g.constant(prev.clone());
        let (out, _) = recurrent_align(&mut g, c, p, &w).unwrap();

        let w1 = &store.get(w.w1).data;
        let w2 = &store.get(w.w2).data;
        let mm = |m: &Tensor, wt: &[f64]| -> Vec<Vec<f64>> {
            (0..m.shape[0])
                .map(|i| {
                    (0..4)
                        .map(|j| (0..4).map(|k| m.data[i * 4 + k] * wt[k * 4 + j]).sum())
                        .collect()
                })
                .collect()
        };
        let a = mm(&cur, w1);
        let b = mm(&prev, w2);
        for i in 0..2 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|k| a[i][k] * b[j][k]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for k in 0..4 {
                let expect = cur.data[i * 4 + k]
                    + (0..3)
                        .map(|j| s[j].exp() / z * prev.data[j * 4 + k])
                        .sum::<f64>();
                assert!((g.value(out)[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rmi_levels_keep_their_lengths() {
        let mut store = ParamStore::new();
        let params = RmiParams::new(&mut store, 3, 8, 2, 32, true, &mut rng()).unwrap();
        let mut r = rng();
        let mut g = Graph::new(&store);
        let xs: Vec<Var> = [17, 34, 68]
            .iter()
            .map(|&l| g.constant(Tensor::randn(&[l, 8], 1.0, &mut r)))
            .collect();
        let q = g.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
        let outs = rmi_forward(&mut g, &xs, q, &params).unwrap();
        let lens: Vec<usize> = outs.iter().map(|o| g.shape(o.x_hat)[0]).collect();
        assert_eq!(lens, [17, 34, 68]);
        assert!(outs[0].alignment.is_none());
        assert_eq!(g.shape(outs[1].alignment.unwrap()), &[34, 17]);
        assert!(rmi_forward(&mut g, &[], q, &params).is_err());
    }

    #[test]
    fn without_recurrence_levels_are_independent() {
        let mut store = ParamStore::new();
        let params = RmiParams::new(&mut store, 3, 8, 2, 32, false, &mut rng()).unwrap();
        assert!(params.align.is_empty());
        let mut r = rng();
        let x1 = Tensor::randn(&[5, 8], 1.0, &mut r);
        let x2 = Tensor::randn(&[10, 8], 1.0, &mut r);
        let q0 = Tensor::randn(&[4, 8], 1.0, &mut r);
        let run = |x1: &Tensor| {
            let mut g = Graph::new(&store);
            let a = g.constant(x1.clone());
            let b = g.constant(x2.clone());
            let q = g.constant(q0.clone());
            let outs = rmi_forward(
                &mut g,
                &[a, b],
                q,
                &RmiParams {
                    blocks: params.blocks[..2].to_vec(),
                    align: vec![],
                },
            )
            .unwrap();
            (
                g.value(outs[0].x_hat).to_vec(),
                g.value(outs[1].x_hat).to_vec(),
            )
        };
        let (a1, a2) = run(&x1);
        let mut x1p = x1.clone();
        x1p.data[0] += 1.0;
        let (b1, b2) = run(&x1p);
        assert_ne!(a1, b1);
        assert_eq!(a2, b2);
    }
}
