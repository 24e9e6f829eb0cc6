//! Reverse-mode differentiation over an append-only operation tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Parameters are borrowed from a [`ParamStore`] and registered lazily, so
//! parameters that never take part in the loss get a zero gradient.
//! Nodes are appended in evaluation order, which is already a topological
//! order; [`Graph::backward`] walks it in reverse.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Floor applied to probabilities before taking logs in the NLL.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Act(Activation, Var),
    Recip(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ScatterCols(Var, Vec<usize>),
    Nll(Var, Vec<usize>),
    Sum(Var),
}

struct Node<'p, S: Clone> {
    value: Cow<'p, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients for every parameter of a store, zero where unreachable.
#[derive(Clone, Debug)]
pub struct Gradients<S = f32> {
    pub grads: Vec<Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.index()]
    }

    pub fn zeros_like(params: &ParamStore<S>) -> Self {
        Gradients {
            grads: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<S>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

pub struct Graph<'p, S: Real> {
    params: &'p ParamStore<S>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p, S>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p, S: Real> Graph<'p, S> {
    /// Inference graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Graph {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph with a dedicated dropout stream.
    pub fn training(params: &'p ParamStore<S>, dropout_seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            ..Graph::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rows(&self, v: Var) -> usize {
        self.value(v).rows()
    }

    fn cols(&self, v: Var) -> usize {
        self.value(v).cols()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.params.get(id);
        debug_assert!(value.is_finite(), "non-finite parameter {}", self.params.name(id));
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ── linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ── elementwise ───────────────────────────────────────────────────

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn broadcast_row(&self, op: &'static str, x: Var, row: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.len() != c {
            return Err(Error::shape(op, format!("{:?} with row {:?}", tx.shape(), tr.shape())));
        }
        let data = tx
            .data()
            .chunks(c.max(1))
            .flat_map(|r| r.iter().zip(tr.data()).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>())
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x + row` for every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("add_row", x, row, |a, b| a + b)?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// `x ⊙ row` for every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("mul_row", x, row, |a, b| a * b)?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::MulRow(x, row), ng))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        let (r, c) = (tx.rows(), tx.cols());
        if tc.len() != r {
            return Err(Error::shape("mul_col", format!("{:?} with column {:?}", tx.shape(), tc.shape())));
        }
        let mut data = tx.data().to_vec();
        for (i, &s) in tc.data().iter().enumerate() {
            for v in &mut data[i * c..(i + 1) * c] {
                *v *= s;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(col);
        Ok(self.push(out, Op::MulCol(x, col), ng))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let f = match kind {
            Activation::Sigmoid => sigmoid::<S>,
            Activation::Tanh => S::tanh,
            Activation::Relu => |v: S| v.max(S::zero()),
        };
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, Op::Act(kind, x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v == S::zero()) {
            return Err(Error::InvalidArgument("reciprocal of zero".into()));
        }
        let out = self.value(x).map(|v| v.recip());
        let ng = self.ng(x);
        Ok(self.push(out, Op::Recip(x), ng))
    }

    // ── normalisation ─────────────────────────────────────────────────

    /// Row-wise softmax. Masked-out entries (`mask[i*cols+j] == false`)
    /// receive exactly zero weight; a row with no attendable entry is an
    /// error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows", format!("mask of {} for {r}x{c}", m.len())));
            }
        }
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = tx.row(i);
            let keep = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(None, |acc: Option<S>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            });
            let Some(max) = max else {
                return Err(Error::FullyMasked { row: i });
            };
            let mut total = S::zero();
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= total;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, h) = (tx.rows(), tx.cols());
        if h == 0 {
            return Err(Error::InvalidArgument("layer_norm over zero features".into()));
        }
        if self.value(gain).len() != h || self.value(bias).len() != h {
            return Err(Error::shape("layer_norm", "gain/bias width differs from input"));
        }
        let (tg, tb) = (self.value(gain).data(), self.value(bias).data());
        let hs = S::of(h as f64);
        let mut xhat = vec![S::zero(); r * h];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * h];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().copied().sum::<S>() / hs;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / hs;
            let is = (var + S::of(eps)).sqrt().recip();
            inv_std[i] = is;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[i * h + j] = xh;
                out[i * h + j] = xh * tg[j] + tb[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    // ── indexing and reshaping ────────────────────────────────────────

    /// Row gather from an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, h) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), h], out)?;
        let ng = self.ng(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Arithmetic mean over rows, `[L×H] → [1×H]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if r == 0 || tx.is_empty() {
            return Err(Error::InvalidArgument("mean over zero rows".into()));
        }
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        let n = S::of(r as f64);
        out.iter_mut().for_each(|o| *o /= n);
        let ng = self.ng(x);
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(x), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no parts"));
        };
        let r = self.rows(first);
        if parts.iter().any(|&p| self.rows(p) != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&tx.row(i)[start..end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![r, end - start], out)?, Op::SliceCols(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no parts"));
        };
        let c = self.cols(first);
        if parts.iter().any(|&p| self.cols(p) != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            r += self.rows(p);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if start > end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let out = tx.data()[start * c..end * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![end - start, c], out)?, Op::SliceRows(x, start), ng))
    }

    /// `out[:, map[j]] += x[:, j]`, producing `width` columns.
    pub fn scatter_cols(&mut self, x: Var, map: &[usize], width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if map.len() != c {
            return Err(Error::shape("scatter_cols", format!("map of {} for {c} columns", map.len())));
        }
        if let Some(&bad) = map.iter().find(|&&m| m >= width) {
            return Err(Error::OutOfRange {
                what: "scatter target",
                index: bad,
                size: width,
            });
        }
        let mut out = vec![S::zero(); r * width];
        for i in 0..r {
            for (j, &m) in map.iter().enumerate() {
                out[i * width + m] += tx.data()[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![r, width], out)?, Op::ScatterCols(x, map.to_vec()), ng))
    }

    // ── reductions and losses ─────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// `-Σ_t log max(p[t, target_t], 1e-12)` over the rows of `p`.
    pub fn nll(&mut self, p: Var, targets: &[usize]) -> Result<Var> {
        let tp = self.value(p);
        let (r, c) = (tp.rows(), tp.cols());
        if targets.len() != r {
            return Err(Error::shape("nll", format!("{} targets for {r} rows", targets.len())));
        }
        let mut loss = S::zero();
        for (t, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(Error::OutOfRange {
                    what: "target id",
                    index: y,
                    size: c,
                });
            }
            loss -= tp.at(t, y).max(S::of(LOG_CLAMP)).ln();
        }
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(loss), Op::Nll(p, targets.to_vec()), ng))
    }

    /// Inverted dropout. Identity for inference graphs or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let mask = dropout_mask::<S, _>(n, rate, &mut self.rng);
        let mask = self.constant(Tensor::new(self.shape(x).to_vec(), mask)?);
        self.mul(x, mask)
    }

    // ── backward ──────────────────────────────────────────────────────

    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = Gradients::zeros_like(self.params);
        for (pi, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                    out.grads[pi] = g;
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let shaped = |v: Var, data: Vec<S>| Tensor::new(self.shape(v).to_vec(), data).expect("grad shape");

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt(g.data(), tb.data(), &mut da, m, n, k);
                    acc(*a, shaped(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn(ta.data(), g.data(), &mut db, k, m, n);
                    acc(*b, shaped(*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.ng(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nn(g.data(), tb.data(), &mut da, m, n, k);
                    acc(*a, shaped(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![S::zero(); n * k];
                    gemm_tn(g.data(), ta.data(), &mut db, n, m, k);
                    acc(*b, shaped(*b, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, shaped(*b, g.data().to_vec()));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if self.ng(*row) {
                    let c = g.cols();
                    let mut dr = vec![S::zero(); c];
                    for r in g.data().chunks(c) {
                        for (d, &v) in dr.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    acc(*row, shaped(*row, dr));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&u, &v)| u * v).collect();
                    acc(*a, shaped(*a, d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&u, &v)| u * v).collect();
                    acc(*b, shaped(*b, d));
                }
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                let c = tx.cols();
                if self.ng(*x) {
                    let d = g
                        .data()
                        .chunks(c)
                        .flat_map(|r| r.iter().zip(tr.data()).map(|(&u, &v)| u * v).collect::<Vec<_>>())
                        .collect();
                    acc(*x, shaped(*x, d));
                }
                if self.ng(*row) {
                    let mut dr = vec![S::zero(); c];
                    for (gr, xr) in g.data().chunks(c).zip(tx.data().chunks(c)) {
                        for j in 0..c {
                            dr[j] += gr[j] * xr[j];
                        }
                    }
                    acc(*row, shaped(*row, dr));
                }
            }
            Op::MulCol(x, col) => {
                let (tx, tc) = (self.value(*x), self.value(*col));
                let c = tx.cols();
                if self.ng(*x) {
                    let mut d = g.data().to_vec();
                    for (i, &s) in tc.data().iter().enumerate() {
                        d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*x, shaped(*x, d));
                }
                if self.ng(*col) {
                    let d = (0..tc.len())
                        .map(|i| {
                            g.data()[i * c..(i + 1) * c]
                                .iter()
                                .zip(&tx.data()[i * c..(i + 1) * c])
                                .map(|(&u, &v)| u * v)
                                .sum()
                        })
                        .collect();
                    acc(*col, shaped(*col, d));
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * *c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Act(kind, x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(self.value(*x).data())
                    .map(|((&gv, &yv), &xv)| match kind {
                        Activation::Sigmoid => gv * yv * (S::one() - yv),
                        Activation::Tanh => gv * (S::one() - yv * yv),
                        Activation::Relu => {
                            if xv > S::zero() {
                                gv
                            } else {
                                S::zero()
                            }
                        }
                    })
                    .collect();
                acc(*x, shaped(*x, d));
            }
            Op::Recip(x) => {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| -gv * yv * yv).collect();
                acc(*x, shaped(*x, d));
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut d = vec![S::zero(); y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, shaped(*x, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let h = y.cols();
                let r = y.rows();
                let tg = self.value(*gain).data();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![S::zero(); h];
                    let mut db = vec![S::zero(); h];
                    for i in 0..r {
                        for j in 0..h {
                            dg[j] += g.data()[i * h + j] * xhat[i * h + j];
                            db[j] += g.data()[i * h + j];
                        }
                    }
                    acc(*gain, shaped(*gain, dg));
                    acc(*bias, shaped(*bias, db));
                }
                if self.ng(*x) {
                    let hs = S::of(h as f64);
                    let mut dx = vec![S::zero(); r * h];
                    for i in 0..r {
                        let gr = &g.data()[i * h..(i + 1) * h];
                        let xr = &xhat[i * h..(i + 1) * h];
                        let dxhat: Vec<S> = gr.iter().zip(tg).map(|(&a, &b)| a * b).collect();
                        let s1: S = dxhat.iter().copied().sum();
                        let s2: S = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        for j in 0..h {
                            dx[i * h + j] = inv_std[i] / hs * (hs * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    acc(*x, shaped(*x, dx));
                }
            }
            Op::Gather(table, ids) => {
                let tt = self.value(*table);
                let h = tt.cols();
                let mut d = vec![S::zero(); tt.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        d[id * h + j] += g.data()[i * h + j];
                    }
                }
                acc(*table, shaped(*table, d));
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let n = S::of(tx.rows() as f64);
                let row: Vec<S> = g.data().iter().map(|&v| v / n).collect();
                let d = (0..tx.rows()).flat_map(|_| row.iter().copied()).collect();
                acc(*x, shaped(*x, d));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    if self.ng(p) {
                        let d = (0..g.rows())
                            .flat_map(|i| g.data()[i * total + offset..i * total + offset + c].to_vec())
                            .collect();
                        acc(p, shaped(p, d));
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (c, w) = (tx.cols(), g.cols());
                let mut d = vec![S::zero(); tx.len()];
                for i in 0..g.rows() {
                    d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*x, shaped(*x, d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        acc(p, shaped(p, g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![S::zero(); tx.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, shaped(*x, d));
            }
            Op::ScatterCols(x, map) => {
                let tx = self.value(*x);
                let (r, c, w) = (tx.rows(), tx.cols(), g.cols());
                let mut d = vec![S::zero(); tx.len()];
                for i in 0..r {
                    for (j, &m) in map.iter().enumerate() {
                        d[i * c + j] = g.data()[i * w + m];
                    }
                }
                acc(*x, shaped(*x, d));
            }
            Op::Nll(p, targets) => {
                let tp = self.value(*p);
                let c = tp.cols();
                let mut d = vec![S::zero(); tp.len()];
                for (t, &yid) in targets.iter().enumerate() {
                    let pv = tp.at(t, yid);
                    if pv > S::of(LOG_CLAMP) {
                        d[t * c + yid] -= g.item() / pv;
                    }
                }
                acc(*p, shaped(*p, d));
            }
            Op::Sum(x) => {
                let d = vec![g.item(); self.value(*x).len()];
                acc(*x, shaped(*x, d));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<S: Real, R: Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<S> {
    let keep = S::of(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
        .collect()
}
