//! Question and answer-candidate encoding: learned word embeddings, a linear
//! map to the model width and a single-layer bidirectional LSTM whose two
//! directions are concatenated per token.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{MhnError, Result};
use crate::layers::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token vocabulary; id 0 is padding and id 1 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            ids: BTreeMap::new(),
            tokens: Vec::new(),
        };
        v.add(PAD);
        v.add(UNK);
        v
    }

    /// Vocabulary holding the specials plus the given tokens in sorted order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<&str> = tokens.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut v = Vocab::new();
        for t in sorted {
            v.add(t);
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.ids.insert(token.to_string(), id);
        self.tokens.push(token.to_string());
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Serialized form: a JSON object `{token: id}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ids).expect("string map serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ids: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| MhnError::json(path, e))?;
        let mut tokens = vec![String::new(); ids.len()];
        for (tok, &id) in &ids {
            if id >= tokens.len() || !tokens[id].is_empty() {
                return Err(MhnError::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    message: format!(
                        "vocabulary ids are not a permutation of 0..{} (token `{tok}`)",
                        ids.len()
                    ),
                });
            }
            tokens[id] = tok.clone();
        }
        if tokens.get(PAD_ID).map(String::as_str) != Some(PAD)
            || tokens.get(UNK_ID).map(String::as_str) != Some(UNK)
        {
            return Err(MhnError::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("vocabulary must map `{PAD}` to 0 and `{UNK}` to 1"),
            });
        }
        Ok(Vocab { ids, tokens })
    }
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `[d x 4h]`, gate order input, forget, cell, output.
    pub w_ih: ParamId,
    /// `[h x 4h]`
    pub w_hh: ParamId,
    /// `[4h]`
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (hidden as f64).sqrt();
        Ok(LstmParams {
            w_ih: store.insert(
                format!("{name}.w_ih"),
                Tensor::randn(&[input, 4 * hidden], std, rng),
            )?,
            w_hh: store.insert(
                format!("{name}.w_hh"),
                Tensor::randn(&[hidden, 4 * hidden], std, rng),
            )?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[4 * hidden]))?,
            hidden,
        })
    }

    /// Runs over `x: [L x d]` in the given step order; returns hidden states in that order.
    fn run(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        steps: impl Iterator<Item = usize>,
    ) -> Result<Vec<(usize, Var)>> {
        let h = self.hidden;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add_row(xw, bias)?;

        let mut hidden = g.constant(Tensor::zeros(&[1, h]));
        let mut cell = g.constant(Tensor::zeros(&[1, h]));
        let mut out = Vec::new();
        for t in steps {
            let xt = g.gather_rows(xw, &[t])?;
            let hw = g.matmul(hidden, w_hh)?;
            let gates = g.add(xt, hw)?;
            let i = g.slice_cols(gates, 0, h)?;
            let f = g.slice_cols(gates, h, h)?;
            let c = g.slice_cols(gates, 2 * h, h)?;
            let o = g.slice_cols(gates, 3 * h, h)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let c = g.tanh(c);
            let o = g.sigmoid(o);
            let keep = g.mul(f, cell)?;
            let write = g.mul(i, c)?;
            cell = g.add(keep, write)?;
            let squashed = g.tanh(cell);
            hidden = g.mul(o, squashed)?;
            out.push((t, hidden));
        }
        Ok(out)
    }
}

/// Contextual token sequence `[L x d]`.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoding {
    pub seq: Var,
    pub len: usize,
}

/// Parameters of the linguistic encoder. Shared between questions and answer candidates.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub proj: Linear,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub max_len: usize,
    pub d: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        word_dim: usize,
        d: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d % 2 != 0 || d == 0 {
            return Err(MhnError::Config(format!(
                "model.d must be even and positive for the BiLSTM, got {d}"
            )));
        }
        let embedding = store.insert(
            "text.embedding",
            Tensor::randn(&[vocab_size, word_dim], 1.0, rng),
        )?;
        let proj = Linear::new(store, "text.proj", word_dim, d, true, rng)?;
        let forward = LstmParams::new(store, "text.lstm.fwd", d, d / 2, rng)?;
        let backward = LstmParams::new(store, "text.lstm.bwd", d, d / 2, rng)?;
        Ok(TextEncoder {
            embedding,
            proj,
            forward,
            backward,
            max_len,
            d,
        })
    }

    pub fn encode(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<TextEncoding> {
        let len = tokens.len();
        if len == 0 {
            return Err(MhnError::EmptySequence("encode_text (empty question)"));
        }
        if len > self.max_len {
            return Err(MhnError::Config(format!(
                "token sequence of length {len} exceeds model.max_tokens = {}",
                self.max_len
            )));
        }
        let vocab = g.store().get(self.embedding).shape[0];
        let ids: Vec<usize> = tokens
            .iter()
            .map(|&t| if t < vocab { t } else { UNK_ID })
            .collect();

        let table = g.param(self.embedding);
        let words = g.gather_rows(table, &ids)?;
        let x = self.proj.forward(g, words)?;

        let fwd = self.forward.run(g, x, 0..len)?;
        let mut bwd = self.backward.run(g, x, (0..len).rev())?;
        bwd.reverse();
        let fwd_rows: Vec<Var> = fwd.into_iter().map(|(_, h)| h).collect();
        let bwd_rows: Vec<Var> = bwd.into_iter().map(|(_, h)| h).collect();
        let f = g.concat_rows(&fwd_rows)?;
        let b = g.concat_rows(&bwd_rows)?;
        let seq = g.concat_cols(&[f, b])?;
        Ok(TextEncoding { seq, len })
    }
}
