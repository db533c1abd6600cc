//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] records every primitive in execution order. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates adjoints
//! into the leaves that were registered with [`Tape::leaf`]. Constants never
//! receive gradients, and nodes that do not depend on a leaf are skipped.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{gemm, Array};
use super::sparse::Csr;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of a block-diagonal attention pattern: queries in `q` attend
/// only to keys in `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Const,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Binary { op: Bin, a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { a: Var, xhat: Array, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, range: Range<usize> },
    SliceRows { a: Var, range: Range<usize> },
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterAddRows { a: Var, idx: Vec<usize> },
    GatherElems { a: Var, idx: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    Attention(Box<AttnCache>),
    SpMM { mat: Arc<Csr>, a: Var },
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
    blocks: Vec<AttnBlock>,
    /// Attention weights per (block, head), block-major.
    probs: Vec<Array>,
}

struct Node {
    value: Arc<Array>,
    op: Op,
    needs_grad: bool,
}

/// Adjoints of the leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    grad_enabled: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Inference tape: dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training tape: dropout active, masks drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Tape that records no adjoint information; leaves behave as constants.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Arc<Array>) -> Var {
        let needs_grad = self.grad_enabled;
        self.push_node(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push_node(Arc::new(value), Op::Const, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Array>) -> Var {
        self.push_node(value, Op::Const, false)
    }

    fn push_node(&mut self, value: Arc<Array>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Const };
        self.push_node(Arc::new(value), op, needs_grad)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = gemm(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, ta, b, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    fn binary(&mut self, op: Bin, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let [r, c] = broadcast_shape(x.shape(), y.shape()).ok_or_else(|| {
            Error::Shape(format!(
                "{op:?}: [{}, {}] vs [{}, {}]",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols()
            ))
        })?;
        let f: fn(f64, f64) -> f64 = match op {
            Bin::Add => |p, q| p + q,
            Bin::Sub => |p, q| p - q,
            Bin::Mul => |p, q| p * q,
            Bin::Div => |p, q| p / q,
        };
        let mut data = Vec::with_capacity(r * c);
        if x.shape() == y.shape() {
            data.extend(x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)));
        } else {
            for i in 0..r {
                for j in 0..c {
                    data.push(f(bget(x, i, j), bget(y, i, j)));
                }
            }
        }
        if op == Bin::Div && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("division produced a non-finite value".into()));
        }
        Ok(self.push(Array::from_raw(r, c, data), Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---------------------------------------------------------- elementwise

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exp overflow".into()));
        }
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::NonFinite(format!("log of non-positive value {v}")));
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    // ------------------------------------------------------------ row-wise

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut xhat = Array::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = if var + eps > 0.0 { 1.0 / (var + eps).sqrt() } else { 0.0 };
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let needs = self.needs(a);
        let op = if needs {
            Op::LayerNorm {
                a,
                xhat: xhat.clone(),
                inv_std,
            }
        } else {
            Op::Const
        };
        self.push_node(Arc::new(xhat), op, needs)
    }

    // ---------------------------------------------------------- structural

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(Error::Shape(format!(
                "concat_cols: {rows} rows vs {} rows",
                self.value(*p).rows()
            )));
        }
        let mut out = Array::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if let Some(p) = parts.iter().find(|p| self.value(**p).cols() != cols) {
            return Err(Error::Shape(format!(
                "concat_rows: {cols} columns vs {} columns",
                self.value(*p).cols()
            )));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Array::from_raw(rows, cols, data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let x = self.value(a);
        if range.end > x.cols() || range.start > range.end {
            return Err(Error::Shape(format!("slice_cols {range:?} of [{}, {}]", x.rows(), x.cols())));
        }
        let w = range.len();
        let mut data = Vec::with_capacity(x.rows() * w);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[range.clone()]);
        }
        let out = Array::from_raw(x.rows(), w, data);
        Ok(self.push(out, Op::SliceCols { a, range }, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let x = self.value(a);
        if range.end > x.rows() || range.start > range.end {
            return Err(Error::Shape(format!("slice_rows {range:?} of [{}, {}]", x.rows(), x.cols())));
        }
        let c = x.cols();
        let out = Array::from_raw(range.len(), c, x.data()[range.start * c..range.end * c].to_vec());
        Ok(self.push(out, Op::SliceRows { a, range }, &[a]))
    }

    // ---------------------------------------------------------- reductions

    /// Sum of all entries, as a `1 × 1` array.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `[r × 1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let out = Array::from_raw(x.rows(), 1, data);
        self.push(out, Op::RowSums(a), &[a])
    }

    /// Per-column sums, `[1 × c]`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (d, v) in data.iter_mut().zip(x.row(r)) {
                *d += v;
            }
        }
        let out = Array::from_raw(1, x.cols(), data);
        self.push(out, Op::ColSums(a), &[a])
    }

    pub fn row_means(&mut self, a: Var) -> Var {
        let c = self.value(a).cols().max(1) as f64;
        let s = self.row_sums(a);
        self.scale(s, 1.0 / c)
    }

    pub fn col_means(&mut self, a: Var) -> Var {
        let r = self.value(a).rows().max(1) as f64;
        let s = self.col_sums(a);
        self.scale(s, 1.0 / r)
    }

    // ------------------------------------------------------------ indexing

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Shape(format!("gather_rows index {bad} of {} rows", x.rows())));
        }
        let out = x.select_rows(idx);
        Ok(self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// `out[idx[j]] += a[j]` into an `n_rows`-row zero array.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                x.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Shape(format!("scatter_add_rows index {bad} of {n_rows} rows")));
        }
        let c = x.cols();
        let mut out = Array::zeros(n_rows, c);
        for (j, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(x.row(j)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Picks entries by flat (row-major) index into a `[rows × cols]` result.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != rows * cols {
            return Err(Error::Shape(format!(
                "gather_elems: {} indices for shape [{rows}, {cols}]",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Shape(format!("gather_elems index {bad} of {} entries", x.len())));
        }
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        let out = Array::from_raw(rows, cols, data);
        Ok(self.push(out, Op::GatherElems { a, idx: idx.to_vec() }, &[a]))
    }

    /// Inverted dropout. Identity when the tape is not training or `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Array::from_raw(x.rows(), x.cols(), data);
        Ok(self.push(out, Op::Dropout { a, mask }, &[a]))
    }

    // ----------------------------------------------------------- attention

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q: [nq × d]`, `k: [nk × d]`, `v: [nk × dv]`; both `d` and `dv` are split
    /// evenly over `heads`. Each head computes `softmax(q_h k_hᵀ · scale) v_h`.
    /// With `blocks`, queries only see the keys of their own block; queries
    /// outside every block produce zero rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        blocks: Option<Vec<AttnBlock>>,
    ) -> Result<Var> {
        let (qa, ka, va) = (self.value(q), self.value(k), self.value(v));
        if heads == 0 || qa.cols() % heads != 0 || va.cols() % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} / value width {} not divisible by {heads} heads",
                qa.cols(),
                va.cols()
            )));
        }
        if qa.cols() != ka.cols() || ka.rows() != va.rows() {
            return Err(Error::Shape(format!(
                "attention: q [{}, {}], k [{}, {}], v [{}, {}]",
                qa.rows(),
                qa.cols(),
                ka.rows(),
                ka.cols(),
                va.rows(),
                va.cols()
            )));
        }
        let blocks = blocks.unwrap_or_else(|| {
            vec![AttnBlock {
                q: 0..qa.rows(),
                k: 0..ka.rows(),
            }]
        });
        for b in &blocks {
            if b.q.end > qa.rows() || b.k.end > ka.rows() || b.k.is_empty() {
                return Err(Error::Shape(format!("attention block {b:?} out of range")));
            }
        }
        let dh = qa.cols() / heads;
        let dvh = va.cols() / heads;
        let mut out = Array::zeros(qa.rows(), va.cols());
        let keep = self.needs(q) || self.needs(k) || self.needs(v);
        let mut probs = Vec::new();
        for b in &blocks {
            for h in 0..heads {
                let qh = sub_block(qa, b.q.clone(), h * dh..(h + 1) * dh);
                let kh = sub_block(ka, b.k.clone(), h * dh..(h + 1) * dh);
                let vh = sub_block(va, b.k.clone(), h * dvh..(h + 1) * dvh);
                let mut s = gemm(&qh, false, &kh, true)?;
                s.data_mut().iter_mut().for_each(|x| *x *= scale);
                let p = softmax_rows(&s);
                let o = gemm(&p, false, &vh, false)?;
                for (i, r) in b.q.clone().enumerate() {
                    out.row_mut(r)[h * dvh..(h + 1) * dvh].copy_from_slice(o.row(i));
                }
                if keep {
                    probs.push(p);
                }
            }
        }
        let cache = AttnCache {
            q,
            k,
            v,
            heads,
            scale,
            blocks,
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    /// Sparse-dense product `mat · a` with a constant sparse matrix.
    pub fn spmm(&mut self, mat: Arc<Csr>, a: Var) -> Result<Var> {
        let out = mat.mul_dense(self.value(a))?;
        Ok(self.push(out, Op::SpMM { mat, a }, &[a]))
    }

    // ------------------------------------------------------------ backward

    /// Back-propagates from `out`, seeding its adjoint with ones.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = out.0 + 1;
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        if !self.needs(out) {
            return Gradients { grads };
        }
        let [r, c] = self.shape(out);
        grads[out.0] = Some(Array::full(r, c, 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // C = op(A) op(B): dA = g op(B)ᵀ (or its transpose when A was transposed)
                    let da = if *ta {
                        gemm(bv, *tb, g, true).expect("matmul adjoint")
                    } else {
                        gemm(g, false, bv, !*tb).expect("matmul adjoint")
                    };
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = if *tb {
                        gemm(g, true, av, *ta).expect("matmul adjoint")
                    } else {
                        gemm(av, !*ta, g, false).expect("matmul adjoint")
                    };
                    self.acc(grads, *b, db);
                }
            }
            Op::Binary { op, a, b } => {
                let (x, z) = (self.value(*a), self.value(*b));
                let [r, c] = g.shape();
                if self.needs(*a) {
                    let mut ga = Array::zeros(r, c);
                    for ii in 0..r {
                        for jj in 0..c {
                            let gv = g.get(ii, jj);
                            let d = match op {
                                Bin::Add | Bin::Sub => gv,
                                Bin::Mul => gv * bget(z, ii, jj),
                                Bin::Div => gv / bget(z, ii, jj),
                            };
                            ga.set(ii, jj, d);
                        }
                    }
                    self.acc(grads, *a, reduce_to(ga, x.shape()));
                }
                if self.needs(*b) {
                    let mut gb = Array::zeros(r, c);
                    for ii in 0..r {
                        for jj in 0..c {
                            let gv = g.get(ii, jj);
                            let d = match op {
                                Bin::Add => gv,
                                Bin::Sub => -gv,
                                Bin::Mul => gv * bget(x, ii, jj),
                                Bin::Div => {
                                    let den = bget(z, ii, jj);
                                    -gv * bget(x, ii, jj) / (den * den)
                                }
                            };
                            gb.set(ii, jj, d);
                        }
                    }
                    self.acc(grads, *b, reduce_to(gb, z.shape()));
                }
            }
            Op::Scale { a, c } => self.acc(grads, *a, g.map(|v| v * c)),
            Op::Exp(a) => self.acc(grads, *a, zip(g, y, |gv, yv| gv * yv)),
            Op::Log(a) => self.acc(grads, *a, zip(g, self.value(*a), |gv, xv| gv / xv)),
            Op::Sigmoid(a) => self.acc(grads, *a, zip(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Relu(a) => self.acc(
                grads,
                *a,
                zip(g, self.value(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Softplus(a) => self.acc(grads, *a, zip(g, self.value(*a), |gv, xv| gv * sigmoid(xv))),
            Op::Abs(a) => self.acc(grads, *a, zip(g, self.value(*a), |gv, xv| gv * sign(xv))),
            Op::Softmax(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let p = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(p).map(|(a, b)| a * b).sum();
                    for (o, pv) in d.row_mut(r).iter_mut().zip(p) {
                        *o = pv * (*o - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for (o, lp) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= lp.exp() * gs;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { a, xhat, inv_std } => {
                let c = g.cols() as f64;
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((o, gv), xv) in d.row_mut(r).iter_mut().zip(gr).zip(xr) {
                        *o = inv_std[r] * (gv - mg - xv * mgx);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut d = Array::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.acc(grads, *p, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.needs(*p) {
                        let d = Array::from_raw(h, c, g.data()[off * c..(off + h) * c].to_vec());
                        self.acc(grads, *p, d);
                    }
                    off += h;
                }
            }
            Op::SliceCols { a, range } => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    d.row_mut(r)[range.clone()].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, d);
            }
            Op::SliceRows { a, range } => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = Array::zeros(x.rows(), c);
                d.data_mut()[range.start * c..range.end * c].copy_from_slice(g.data());
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, Array::full(x.rows(), x.cols(), g.item()));
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gv = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                self.acc(grads, *a, d);
            }
            Op::ColSums(a) => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    d.row_mut(r).copy_from_slice(g.row(0));
                }
                self.acc(grads, *a, d);
            }
            Op::GatherRows { a, idx } => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                for (j, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(j)) {
                        *o += v;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ScatterAddRows { a, idx } => self.acc(grads, *a, g.select_rows(idx)),
            Op::GatherElems { a, idx } => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows(), x.cols());
                for (j, &i) in idx.iter().enumerate() {
                    d.data_mut()[i] += g.data()[j];
                }
                self.acc(grads, *a, d);
            }
            Op::Dropout { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.acc(grads, *a, Array::from_raw(g.rows(), g.cols(), data));
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::SpMM { mat, a } => {
                let d = mat.transpose().mul_dense(g).expect("spmm adjoint");
                self.acc(grads, *a, d);
            }
        }
    }

    fn attention_backward(&self, c: &AttnCache, g: &Array, grads: &mut [Option<Array>]) {
        let (qa, ka, va) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let dh = qa.cols() / c.heads;
        let dvh = va.cols() / c.heads;
        let mut dq = Array::zeros(qa.rows(), qa.cols());
        let mut dk = Array::zeros(ka.rows(), ka.cols());
        let mut dv = Array::zeros(va.rows(), va.cols());
        let mut pi = 0;
        for b in &c.blocks {
            for h in 0..c.heads {
                let p = &c.probs[pi];
                pi += 1;
                let qh = sub_block(qa, b.q.clone(), h * dh..(h + 1) * dh);
                let kh = sub_block(ka, b.k.clone(), h * dh..(h + 1) * dh);
                let vh = sub_block(va, b.k.clone(), h * dvh..(h + 1) * dvh);
                let gh = sub_block(g, b.q.clone(), h * dvh..(h + 1) * dvh);
                let dvh_blk = gemm(p, true, &gh, false).expect("attention adjoint");
                let dp = gemm(&gh, false, &vh, true).expect("attention adjoint");
                let mut ds = dp;
                for r in 0..ds.rows() {
                    let pr = p.row(r);
                    let dot: f64 = ds.row(r).iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (o, pv) in ds.row_mut(r).iter_mut().zip(pr) {
                        *o = pv * (*o - dot) * c.scale;
                    }
                }
                let dqh = gemm(&ds, false, &kh, false).expect("attention adjoint");
                let dkh = gemm(&ds, true, &qh, false).expect("attention adjoint");
                add_block(&mut dq, &dqh, b.q.clone(), h * dh);
                add_block(&mut dk, &dkh, b.k.clone(), h * dh);
                add_block(&mut dv, &dvh_blk, b.k.clone(), h * dvh);
            }
        }
        self.acc(grads, c.q, dq);
        self.acc(grads, c.k, dk);
        self.acc(grads, c.v, dv);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_rows(x: &Array) -> Array {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

#[inline]
fn bget(x: &Array, i: usize, j: usize) -> f64 {
    let r = if x.rows() == 1 { 0 } else { i };
    let c = if x.cols() == 1 { 0 } else { j };
    x.get(r, c)
}

fn reduce_to(g: Array, shape: [usize; 2]) -> Array {
    if g.shape() == shape {
        return g;
    }
    let mut out = Array::zeros(shape[0], shape[1]);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if shape[0] == 1 { 0 } else { i };
            let c = if shape[1] == 1 { 0 } else { j };
            let v = out.get(r, c) + g.get(i, j);
            out.set(r, c, v);
        }
    }
    out
}

fn zip(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::from_raw(g.rows(), g.cols(), data)
}

fn sub_block(x: &Array, rows: Range<usize>, cols: Range<usize>) -> Array {
    if cols.start == 0 && cols.end == x.cols() {
        let c = x.cols();
        return Array::from_raw(rows.len(), c, x.data()[rows.start * c..rows.end * c].to_vec());
    }
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for r in rows.clone() {
        data.extend_from_slice(&x.row(r)[cols.clone()]);
    }
    Array::from_raw(rows.len(), cols.len(), data)
}

fn add_block(dst: &mut Array, src: &Array, rows: Range<usize>, col_off: usize) {
    for (i, r) in rows.enumerate() {
        let w = src.cols();
        for (o, v) in dst.row_mut(r)[col_off..col_off + w].iter_mut().zip(src.row(i)) {
            *o += v;
        }
    }
}
