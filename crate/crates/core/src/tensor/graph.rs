use std::borrow::Cow;

use super::kernels::{self, gemm, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{MhnError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate derivative corruptions, used to prove the gradient checker bites.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Drop the `x * dPhi/dx` term from the GELU derivative.
    pub gelu_grad: bool,
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a @ b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MeanRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node<'s> {
    shape: Vec<usize>,
    value: Cow<'s, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
///
/// Parameters are borrowed from the [`ParamStore`] without copying; a parameter
/// requested several times maps to the same node, so its gradient accumulates
/// over every use.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
    param_vars: Vec<Option<Var>>,
    faults: Faults,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (numel / cols, cols)
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            faults: Faults::default(),
        }
    }

    pub fn with_faults(store: &'s ParamStore, faults: Faults) -> Self {
        Graph {
            faults,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'s, [f64]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, Cow::Owned(t.data), Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for gradient checks on inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.shape, Cow::Owned(t.data), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = self.push(t.shape.clone(), Cow::Borrowed(&t.data), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(MhnError::dim(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(MhnError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a @ b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(MhnError::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), n, k).t(),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MhnError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `bias: [n]` to every row of `a: [.. x n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        if self.value(bias).len() != n {
            return Err(MhnError::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(
            self.shape(a).to_vec(),
            Cow::Owned(out),
            Op::AddRow(a, bias),
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::AddConst(a), rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        if n == 0 {
            return Err(MhnError::EmptySequence("softmax_last"));
        }
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows(&mut out, n);
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Softmax(a), rg))
    }

    /// Layer normalization over the trailing dimension followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if d == 0 {
            return Err(MhnError::dim("layer_norm", self.shape(x), &[0]));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(MhnError::dim(
                "layer_norm",
                self.shape(x),
                self.shape(gamma),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), op, rg))
    }

    /// Mean over the first (temporal) axis: `[L x d] -> [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(a));
        if rows == 0 || self.shape(a).is_empty() {
            return Err(MhnError::EmptySequence("mean_pool_time"));
        }
        let mut out = vec![0.0; d];
        for row in self.value(a).chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![d], Cow::Owned(out), Op::MeanRows(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(vec![], Cow::Owned(vec![s]), Op::SumAll(a), rg)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(MhnError::EmptySequence("concat_cols"))?;
        let (rows, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                return Err(MhnError::dim(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            vec![rows, total],
            Cow::Owned(out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Vertical concatenation; each part is viewed as `[numel / n x n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(MhnError::EmptySequence("concat_rows"))?;
        let (_, cols) = rows_cols(self.shape(first));
        let mut out = Vec::new();
        for &p in parts {
            let (_, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(MhnError::dim(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols.max(1);
        let rg = self.rg(parts);
        Ok(self.push(
            vec![rows, cols],
            Cow::Owned(out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(src));
        if start + len > cols {
            return Err(MhnError::dim("slice_cols", self.shape(src), &[start, len]));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            vec![rows, len],
            Cow::Owned(out),
            Op::SliceCols { src, start },
            rg,
        ))
    }

    /// Selects rows by index (repeats allowed); also serves as embedding lookup.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(src));
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(MhnError::dim("gather_rows", self.shape(src), &[bad]));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[src]);
        let op = Op::GatherRows {
            src,
            index: index.to_vec(),
        };
        Ok(self.push(vec![index.len(), cols], Cow::Owned(out), op, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(MhnError::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape(a), rg))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (rows, n) = rows_cols(self.shape(logits));
        if rows != 1 || target >= n {
            return Err(MhnError::dim(
                "cross_entropy",
                self.shape(logits),
                &[target],
            ));
        }
        let mut probs = self.value(logits).to_vec();
        kernels::softmax_rows(&mut probs, n);
        let lv = self.value(logits);
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[target];
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            target,
            probs,
        };
        Ok(self.push(vec![], Cow::Owned(vec![loss]), op, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(MhnError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Lazily allocated gradient buffer for `v`.
        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if needs(a) {
                    let ga = buf(grads, a, m * k);
                    gemm(MatRef::new(g, m, n), MatRef::new(val(b), k, n).t(), ga, 1.0);
                }
                if needs(b) {
                    let gb = buf(grads, b, k * n);
                    gemm(MatRef::new(val(a), m, k).t(), MatRef::new(g, m, n), gb, 1.0);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if needs(a) {
                    let ga = buf(grads, a, m * k);
                    gemm(MatRef::new(g, m, n), MatRef::new(val(b), n, k), ga, 1.0);
                }
                if needs(b) {
                    let gb = buf(grads, b, n * k);
                    gemm(MatRef::new(g, m, n).t(), MatRef::new(val(a), m, k), gb, 1.0);
                }
            }
            &Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if needs(v) {
                        let gv = buf(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if needs(v) {
                        let gv = buf(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let bv = val(b);
                    let ga = buf(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let gb = buf(grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if needs(a) {
                    let ga = buf(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if needs(bias) {
                    let n = val(bias).len();
                    let gb = buf(grads, bias, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Scale(a, c) => {
                let ga = buf(grads, a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            &Op::AddConst(a) | &Op::Reshape(a) => {
                let ga = buf(grads, a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let (_, n) = rows_cols(&node.shape);
                let ga = buf(grads, a, g.len());
                for ((gr, yr), gar) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        gar[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, d) = rows_cols(&node.shape);
                let gm = val(*gamma);
                if needs(*gamma) {
                    let gg = buf(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = buf(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if needs(*x) {
                    let gx = buf(grads, *x, rows * d);
                    let dn = d as f64;
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gm[j];
                            sum += dxhat[j];
                            sum_xh += dxhat[j] * xh[j];
                        }
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] / dn * (dn * dxhat[j] - sum - xh[j] * sum_xh);
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                let xv = val(a);
                let corrupt = self.faults.gelu_grad;
                let ga = buf(grads, a, g.len());
                for i in 0..g.len() {
                    let d = if corrupt {
                        let t =
                            (kernels::GELU_C * (xv[i] + kernels::GELU_A * xv[i].powi(3))).tanh();
                        0.5 * (1.0 + t)
                    } else {
                        kernels::gelu_grad(xv[i])
                    };
                    ga[i] += g[i] * d;
                }
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = buf(grads, a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                let ga = buf(grads, a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            &Op::Relu(a) => {
                let xv = val(a);
                let ga = buf(grads, a, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            &Op::MeanRows(a) => {
                let len = val(a).len();
                let d = g.len();
                let inv = d as f64 / len as f64;
                let ga = buf(grads, a, len);
                for row in ga.chunks_mut(d) {
                    row.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                }
            }
            &Op::SumAll(a) => {
                let len = val(a).len();
                let ga = buf(grads, a, len);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = rows_cols(&self.nodes[p.0].shape).1;
                    if needs(p) {
                        let gp = buf(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        let gp = buf(grads, p, len);
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            &Op::SliceCols { src, start } => {
                let (rows, len) = rows_cols(&node.shape);
                let (srows, cols) = rows_cols(&self.nodes[src.0].shape);
                let gs = buf(grads, src, srows * cols);
                for r in 0..rows {
                    for j in 0..len {
                        gs[r * cols + start + j] += g[r * len + j];
                    }
                }
            }
            Op::GatherRows { src, index } => {
                let cols = rows_cols(&node.shape).1;
                let len = val(*src).len();
                let gs = buf(grads, *src, len);
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..cols {
                        gs[i * cols + j] += g[k * cols + j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let gl = buf(grads, *logits, probs.len());
                for (j, p) in probs.iter().enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    gl[j] += g[0] * (p - onehot);
                }
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}
