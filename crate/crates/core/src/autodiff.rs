//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive op in execution order, which is
//! already a topological order. [`Graph::backward`] walks the record in
//! reverse and returns a [`Gradients`] table indexed by [`Var`].
//!
//! Learnable weights enter a graph through [`Graph::param`], which ties the
//! leaf to a [`ParamId`]; [`Gradients::accumulate_into`] then adds the leaf
//! gradients into the owning [`ParamStore`].
//!
//! Broadcasting is limited to [`Graph::add_row_bias`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
    SqEuclidean(Var, Var),
    StraightThrough(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// The computation record: nodes in the order they were executed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient but is not tied to a parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to a stored parameter. Its gradient is routed back to
    /// the store by [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = Tensor::zeros(sa.rows, sb.cols);
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            sa.rows,
            sa.cols,
            sb.cols,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`; both operands share their column count.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = Tensor::zeros(sa.rows, sb.rows);
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            sa.rows,
            sa.cols,
            sb.rows,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::new(sa.rows, sa.cols, data).expect("shape checked"))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.rows != 1 || sb.cols != sx.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(sx.cols) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scalar_mul(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.map(a, |x| alpha * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, alpha), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = Tensor::zeros(t.rows(), cols);
        for (src, dst) in t.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
            softmax_into(src, dst);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Concatenates along the last dimension: `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rows != sb.rows {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let cols = sa.cols + sb.cols;
        let mut data = Vec::with_capacity(sa.rows * cols);
        for r in 0..sa.rows {
            data.extend_from_slice(self.value(a).row_slice(r));
            data.extend_from_slice(self.value(b).row_slice(r));
        }
        let out = Tensor::new(sa.rows, cols, data).expect("shape checked");
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no operands"))?;
        let cols = self.shape(first).cols;
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: sp,
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::new(rows, cols, data).expect("shape checked");
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Picks rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if rows.is_empty() {
            return Err(Error::invalid("select_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= sa.rows) {
            return Err(Error::invalid(
                "select_rows",
                format!("row {bad} out of range for {sa}"),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * sa.cols);
        for &r in rows {
            data.extend_from_slice(self.value(a).row_slice(r));
        }
        let out = Tensor::new(rows.len(), sa.cols, data).expect("shape checked");
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec()), rg))
    }

    /// Gathers entries by flat row-major index into a `1 x k` row.
    pub fn gather(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let n = self.shape(a).numel();
        if flat.is_empty() {
            return Err(Error::invalid("gather", "empty index list"));
        }
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for {n} values"),
            ));
        }
        let src = self.value(a).data();
        let out = Tensor::row(flat.iter().map(|&i| src[i]).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gather(a, flat.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column-wise mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for row in t.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    /// `||a - b||^2` as a scalar.
    pub fn sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "sq_euclidean",
                lhs: sa,
                rhs: sb,
            });
        }
        let d: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::SqEuclidean(a, b), rg))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        let ss = self.shape(soft);
        if ss != hard.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: ss,
                rhs: hard.shape(),
            });
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != Shape::SCALAR {
            return Err(Error::NonScalarLoss(s));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm_nt(g.data(), tb.data(), da.data_mut(), m, n, k);
                    acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm_tn(ta.data(), g.data(), db.data_mut(), k, m, n);
                    acc(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm_nn(g.data(), tb.data(), da.data_mut(), m, n, k);
                    acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(n, k);
                    gemm_tn(g.data(), ta.data(), db.data_mut(), n, m, k);
                    acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, scaled(g, -1.0));
            }
            Op::AddRowBias(x, bias) => {
                acc(grads, *x, g.clone());
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(grads, *bias, Tensor::row(db));
            }
            Op::Hadamard(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, zip(g, tb, |gv, y| gv * y));
                acc(grads, *b, zip(g, ta, |gv, x| gv * x));
            }
            Op::Scale(a, alpha) => acc(grads, *a, scaled(g, *alpha)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(grads, *a, zip(g, ta, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                acc(grads, *a, zip(g, out, |gv, s| gv * s * (1.0 - s)));
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut da = Tensor::zeros(out.rows(), cols);
                for ((y, gy), d) in out
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(da.data_mut().chunks_mut(cols))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in d.iter_mut().zip(y).zip(gy) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(*a).cols, self.shape(*b).cols);
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(grads, *a, Tensor::new(rows, ca, da).expect("shape"));
                acc(grads, *b, Tensor::new(rows, cb, db).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.shape(*p).rows;
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    acc(grads, *p, Tensor::new(rows, cols, slice).expect("shape"));
                    offset += rows;
                }
            }
            Op::SelectRows(a, rows) => {
                let sa = self.shape(*a);
                let mut da = Tensor::zeros(sa.rows, sa.cols);
                for (i, &r) in rows.iter().enumerate() {
                    let src = g.row_slice(i);
                    let dst = &mut da.data_mut()[r * sa.cols..(r + 1) * sa.cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(grads, *a, da);
            }
            Op::Gather(a, flat) => {
                let sa = self.shape(*a);
                let mut da = Tensor::zeros(sa.rows, sa.cols);
                for (gv, &i) in g.data().iter().zip(flat) {
                    da.data_mut()[i] += gv;
                }
                acc(grads, *a, da);
            }
            Op::Sum(a) => {
                let sa = self.shape(*a);
                acc(grads, *a, Tensor::filled(sa.rows, sa.cols, g.item()));
            }
            Op::MeanRows(a) => {
                let sa = self.shape(*a);
                let inv = 1.0 / sa.rows as f64;
                let mut da = Tensor::zeros(sa.rows, sa.cols);
                for row in da.data_mut().chunks_mut(sa.cols) {
                    for (d, gv) in row.iter_mut().zip(g.data()) {
                        *d = gv * inv;
                    }
                }
                acc(grads, *a, da);
            }
            Op::SqEuclidean(a, b) => {
                let gs = g.item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                let diff = zip(ta, tb, |x, y| 2.0 * gs * (x - y));
                if self.requires_grad(*b) {
                    acc(grads, *b, scaled(&diff, -1.0));
                }
                acc(grads, *a, diff);
            }
            Op::StraightThrough(soft) => acc(grads, *soft, g.clone()),
        }
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when `v` was unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let s = graph.shape(v);
            Tensor::zeros(s.rows, s.cols)
        })
    }

    /// Adds `scale * grad` of every parameter leaf into the store.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore, scale: f64) {
        for (idx, node) in graph.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, self.grads.get(idx).and_then(Option::as_ref))
            else {
                continue;
            };
            store.accumulate_grad(id, g, scale);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn scaled(t: &Tensor, alpha: f64) -> Tensor {
    Tensor::new(
        t.rows(),
        t.cols(),
        t.data().iter().map(|x| alpha * x).collect(),
    )
    .expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}
