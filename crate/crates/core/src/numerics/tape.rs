//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the operation that produced it. Nodes are appended in evaluation
//! order, so walking the tape backwards is a valid topological order and each
//! node is visited once during [`Tape::backward`].
//!
//! Leaves come in three flavours:
//! - constants, which never receive gradients;
//! - free leaves created with [`Tape::leaf`], whose gradients are kept on the tape;
//! - parameters bound from a [`ParamStore`], whose gradients are added into the store.
//!
//! Gradients accumulate: calling `backward` twice adds both contributions.

use std::rc::Rc;

use super::{Csr, Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    OuterSum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Ln(Var),
    Exp(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowSums(Var),
    FrobeniusSq(Var),
    SoftmaxRows(Var, f64),
    LogSumExpRows(Var, Option<Rc<Vec<bool>>>),
    Transpose(Var),
    Gather(Var, Rc<Vec<(usize, usize)>>),
    SelectRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    SqDist(Var, Var),
    PairLinks(Var, Var, Rc<Vec<(usize, usize)>>),
    SpMM(Rc<Csr>, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and differentiates it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Matrix>>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1×1 tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf whose gradient lives on the tape (see [`Tape::grad`]).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a store parameter; backward adds its gradient into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Accumulated gradient of a free leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_leaf_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- binary ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a (n×m) + b (1×m)` added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(shape_err("add_row_broadcast", va, vb));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(vb.row(0)) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRowBroadcast(a, b), rg))
    }

    /// `a (n×m)` with row `i` scaled by `v[i]` (`v` is n×1).
    pub fn mul_col_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.cols() != 1 || vv.rows() != va.rows() {
            return Err(shape_err("mul_col_broadcast", va, vv));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            let s = vv.get(i, 0);
            value.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(value, Op::MulColBroadcast(a, v), rg))
    }

    /// `a (n×m)` with column `j` scaled by `v[j]` (`v` is 1×m).
    pub fn mul_row_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.rows() != 1 || vv.cols() != va.cols() {
            return Err(shape_err("mul_row_broadcast", va, vv));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (x, s) in value.row_mut(i).iter_mut().zip(vv.row(0)) {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(value, Op::MulRowBroadcast(a, v), rg))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a` (n×1), `b` (m×1).
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != 1 || vb.cols() != 1 {
            return Err(shape_err("outer_sum", va, vb));
        }
        let value = Matrix::from_fn(va.rows(), vb.rows(), |i, j| va.get(i, 0) + vb.get(j, 0));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::OuterSum(a, b), rg))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("sq_dist", va, vb));
        }
        let value = Matrix::from_fn(va.rows(), vb.rows(), |i, j| {
            super::matrix::sq_dist(va.row(i), vb.row(j))
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::SqDist(a, b), rg))
    }

    /// Symmetrized link probabilities for listed node pairs.
    ///
    /// With per-node logit halves `src` and `dst` (n×1 each), returns an m×1
    /// column with `(σ(src_i + dst_j) + σ(src_j + dst_i)) / 2` for each `(i, j)`.
    pub fn pair_links(&mut self, src: Var, dst: Var, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let (vs, vd) = (self.value(src), self.value(dst));
        if vs.cols() != 1 || vd.cols() != 1 || vs.rows() != vd.rows() {
            return Err(shape_err("pair_links", vs, vd));
        }
        let n = vs.rows();
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= n || j >= n {
                return Err(Error::Index {
                    index: i.max(j),
                    len: n,
                });
            }
            let p = 0.5 * (sigmoid(vs.get(i, 0) + vd.get(j, 0)) + sigmoid(vs.get(j, 0) + vd.get(i, 0)));
            data.push(p);
        }
        let value = Matrix::from_vec(pairs.len(), 1, data)?;
        let rg = self.rg(src) || self.rg(dst);
        Ok(self.push(value, Op::PairLinks(src, dst, pairs), rg))
    }

    /// Product of a constant sparse operator with `x`.
    pub fn spmm(&mut self, op: Rc<Csr>, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if op.cols() != vx.rows() {
            return Err(Error::Shape {
                op: "spmm",
                left: (op.rows(), op.cols()),
                right: vx.shape(),
            });
        }
        let value = op.matmul(vx);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SpMM(op, x), rg))
    }

    // ---- unary ops --------------------------------------------------------

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(value, Op::Powf(a, p), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Matrix::scalar(va.sum() / va.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean over rows: n×m → 1×m.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Matrix::from_vec(1, va.cols(), va.mean_rows()).expect("shape");
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Per-row sums: n×m → n×1.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Matrix::from_fn(va.rows(), 1, |i, _| va.row(i).iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::RowSums(a), rg)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_sq());
        let rg = self.rg(a);
        self.push(value, Op::FrobeniusSq(a), rg)
    }

    /// Row-wise `softmax(a / temperature)`, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Config(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let value = softmax_rows(self.value(a), temperature, None);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a, temperature), rg))
    }

    /// Row-wise log-sum-exp (n×m → n×1), optionally restricted to entries where
    /// `mask` (row-major, n·m) is true. Every row must keep at least one entry.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let va = self.value(a);
        let (n, m) = va.shape();
        if let Some(mask) = &mask {
            if mask.len() != n * m {
                return Err(Error::Shape {
                    op: "logsumexp_rows",
                    left: (n, m),
                    right: (mask.len(), 1),
                });
            }
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * m + j]);
            let row = va.row(i);
            let max = (0..m)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if !(0..m).any(keep) {
                return Err(Error::Usage(format!(
                    "logsumexp_rows: row {i} has no unmasked entries"
                )));
            }
            // Non-finite inputs propagate so callers can report divergence.
            if (0..m).any(|j| keep(j) && row[j].is_nan()) {
                data.push(f64::NAN);
                continue;
            }
            if max.is_infinite() {
                data.push(max);
                continue;
            }
            let s: f64 = (0..m).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            data.push(max + s.ln());
        }
        let value = Matrix::from_vec(n, 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSumExpRows(a, mask), rg))
    }

    // ---- indexing ---------------------------------------------------------

    /// Gathers listed `(row, col)` entries into an m×1 column.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx.iter() {
            if i >= va.rows() || j >= va.cols() {
                return Err(Error::Index {
                    index: if i >= va.rows() { i } else { j },
                    len: if i >= va.rows() { va.rows() } else { va.cols() },
                });
            }
            data.push(va.get(i, j));
        }
        let value = Matrix::from_vec(idx.len(), 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, idx), rg))
    }

    pub fn select_rows(&mut self, a: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let mut value = Matrix::zeros(rows.len(), va.cols());
        for (k, &r) in rows.iter().enumerate() {
            if r >= va.rows() {
                return Err(Error::Index {
                    index: r,
                    len: va.rows(),
                });
            }
            value.row_mut(k).copy_from_slice(va.row(r));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectRows(a, rows), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), vp));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a scalar `root`.
    ///
    /// Parameter gradients are added into `store`; free-leaf gradients are
    /// added into the tape's leaf accumulators.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Leaf => match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Param(id) => store.accumulate_grad(*id, &g),
                op => {
                    for (parent, pg) in self.local_grads(idx, op, &g) {
                        if !self.nodes[parent.0].requires_grad {
                            continue;
                        }
                        match &mut grads[parent.0] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Op, g: &Matrix) -> Vec<(Var, Matrix)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[idx].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    res.push((*a, g.matmul_t(val(*b)).expect("shape")));
                }
                if rg(*b) {
                    res.push((*b, val(*a).t_matmul(g).expect("shape")));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    res.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                }
                if rg(*b) {
                    res.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::AddRowBroadcast(a, b) => {
                res.push((*a, g.clone()));
                if rg(*b) {
                    let sums = g.mean_rows().into_iter().map(|x| x * g.rows() as f64).collect();
                    res.push((*b, Matrix::from_vec(1, g.cols(), sums).expect("shape")));
                }
            }
            Op::MulColBroadcast(a, v) => {
                let (va, vv) = (val(*a), val(*v));
                if rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = vv.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    res.push((*a, ga));
                }
                if rg(*v) {
                    let gv = Matrix::from_fn(vv.rows(), 1, |i, _| {
                        g.row(i).iter().zip(va.row(i)).map(|(x, y)| x * y).sum()
                    });
                    res.push((*v, gv));
                }
            }
            Op::MulRowBroadcast(a, v) => {
                let (va, vv) = (val(*a), val(*v));
                if rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, s) in ga.row_mut(i).iter_mut().zip(vv.row(0)) {
                            *x *= s;
                        }
                    }
                    res.push((*a, ga));
                }
                if rg(*v) {
                    let mut gv = Matrix::zeros(1, vv.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gv.data_mut()[j] += g.get(i, j) * va.get(i, j);
                        }
                    }
                    res.push((*v, gv));
                }
            }
            Op::OuterSum(a, b) => {
                if rg(*a) {
                    res.push((*a, Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum())));
                }
                if rg(*b) {
                    let sums = g.mean_rows().into_iter().map(|x| x * g.rows() as f64).collect();
                    res.push((*b, Matrix::from_vec(g.cols(), 1, sums).expect("shape")));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.scale(*s))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Sigmoid(a) => res.push((*a, g.zip_map(out, |d, y| d * y * (1.0 - y)))),
            Op::Relu(a) => {
                res.push((*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })))
            }
            Op::Square(a) => res.push((*a, g.zip_map(val(*a), |d, x| 2.0 * d * x))),
            Op::Ln(a) => res.push((*a, g.zip_map(val(*a), |d, x| d / x))),
            Op::Exp(a) => res.push((*a, g.zip_map(out, |d, y| d * y))),
            Op::Powf(a, p) => {
                let p = *p;
                res.push((*a, g.zip_map(val(*a), |d, x| d * p * x.powf(p - 1.0))))
            }
            Op::Sum(a) => {
                let va = val(*a);
                res.push((*a, Matrix::filled(va.rows(), va.cols(), g.item())));
            }
            Op::Mean(a) => {
                let va = val(*a);
                let s = g.item() / va.len().max(1) as f64;
                res.push((*a, Matrix::filled(va.rows(), va.cols(), s)));
            }
            Op::MeanRows(a) => {
                let va = val(*a);
                let n = va.rows().max(1) as f64;
                res.push((*a, Matrix::from_fn(va.rows(), va.cols(), |_, j| g.get(0, j) / n)));
            }
            Op::RowSums(a) => {
                let va = val(*a);
                res.push((*a, Matrix::from_fn(va.rows(), va.cols(), |i, _| g.get(i, 0))));
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.item();
                res.push((*a, val(*a).scale(s)));
            }
            Op::SoftmaxRows(a, t) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dy = g.row(i);
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = y[j] * (dy[j] - dot) / t;
                    }
                }
                res.push((*a, ga));
            }
            Op::LogSumExpRows(a, mask) => {
                let va = val(*a);
                let (n, m) = va.shape();
                let mut ga = Matrix::zeros(n, m);
                for i in 0..n {
                    let lse = out.get(i, 0);
                    let gi = g.get(i, 0);
                    for j in 0..m {
                        if mask.as_ref().is_none_or(|mk| mk[i * m + j]) {
                            ga.set(i, j, gi * (va.get(i, j) - lse).exp());
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::Transpose(a) => res.push((*a, g.transpose())),
            Op::Gather(a, idx) => {
                let va = val(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for (k, &(i, j)) in idx.iter().enumerate() {
                    ga.set(i, j, ga.get(i, j) + g.get(k, 0));
                }
                res.push((*a, ga));
            }
            Op::SelectRows(a, rows) => {
                let va = val(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                res.push((*a, ga));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if rg(p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        res.push((p, Matrix::from_vec(r, c, slice).expect("shape")));
                    }
                    offset += r;
                }
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let d = va.cols();
                let mut ga = Matrix::zeros(va.rows(), d);
                let mut gb = Matrix::zeros(vb.rows(), d);
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let w = 2.0 * g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = w * (va.get(i, k) - vb.get(j, k));
                            ga.data_mut()[i * d + k] += diff;
                            gb.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
                if rg(*a) {
                    res.push((*a, ga));
                }
                if rg(*b) {
                    res.push((*b, gb));
                }
            }
            Op::PairLinks(src, dst, pairs) => {
                let (vs, vd) = (val(*src), val(*dst));
                let n = vs.rows();
                let mut gs = Matrix::zeros(n, 1);
                let mut gd = Matrix::zeros(n, 1);
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let gk = 0.5 * g.get(k, 0);
                    let s1 = sigmoid(vs.get(i, 0) + vd.get(j, 0));
                    let s2 = sigmoid(vs.get(j, 0) + vd.get(i, 0));
                    let d1 = gk * s1 * (1.0 - s1);
                    let d2 = gk * s2 * (1.0 - s2);
                    gs.data_mut()[i] += d1;
                    gd.data_mut()[j] += d1;
                    gs.data_mut()[j] += d2;
                    gd.data_mut()[i] += d2;
                }
                if rg(*src) {
                    res.push((*src, gs));
                }
                if rg(*dst) {
                    res.push((*dst, gd));
                }
            }
            Op::SpMM(s, x) => res.push((*x, s.t_matmul(g))),
        }
        res
    }
}

/// Row-wise softmax of `a / temperature`, optionally masked (masked entries get 0).
pub fn softmax_rows(a: &Matrix, temperature: f64, mask: Option<&[bool]>) -> Matrix {
    let (n, m) = a.shape();
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let keep = |j: usize| mask.is_none_or(|mk| mk[i * m + j]);
        let row = a.row(i);
        let max = (0..m)
            .filter(|&j| keep(j))
            .map(|j| row[j] / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..m {
            if keep(j) {
                let e = (row[j] / temperature - max).exp();
                out.set(i, j, e);
                total += e;
            }
        }
        if total > 0.0 {
            out.row_mut(i).iter_mut().for_each(|x| *x /= total);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, -3.0, 3.0]]));
        let s = t.sigmoid(x);
        let r = t.relu(x);
        assert_eq!(t.value(s).get(0, 0), 0.5);
        assert_eq!(t.value(r).row(0), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(0.0));
        let y = t.sigmoid(x);
        t.backward(y, &mut ParamStore::new()).unwrap();
        assert_relative_eq!(t.grad(x).unwrap().item(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.square(x);
        let mut store = ParamStore::new();
        t.backward(y, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
        t.backward(y, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn param_gradients_accumulate_in_store() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(3.0));
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let y = t.square(w);
        t.backward(y, &mut store).unwrap();
        t.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(id).item(), 12.0);
        store.zero_grad();
        assert_eq!(store.grad(id).item(), 0.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 1));
        assert!(matches!(
            t.backward(x, &mut ParamStore::new()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(3, 2));
        let f = t.frobenius_sq(z);
        assert_eq!(t.item(f), 0.0);
        let a = t.constant(m(&[&[1.0, 2.0], &[2.0, 1.0]]));
        let f = t.frobenius_sq(a);
        assert_eq!(t.item(f), 10.0);
        let c = t.constant(Matrix::filled(4, 3, 2.5));
        let mn = t.mean(c);
        assert_eq!(t.item(mn), 2.5);
        let mr = t.mean_rows(c);
        assert_eq!(t.value(mr).row(0), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[2.0_f64.ln(), 0.0], &[7.0, 7.0]]));
        let s = t.softmax_rows(x, 1.0).unwrap();
        let v = t.value(s);
        assert_relative_eq!(v.get(0, 0), 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(v.get(0, 1), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(v.row(1), &[0.5, 0.5]);
        assert!(matches!(t.softmax_rows(x, 0.0), Err(Error::Config(_))));
        assert!(matches!(t.softmax_rows(x, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn binary_shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(3, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
        assert!(t.sub(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        assert!(t.matmul(a, b).is_ok());
    }

    #[test]
    fn masked_logsumexp_matches_direct() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let mask = Rc::new(vec![true, false, true]);
        let l = t.logsumexp_rows(x, Some(mask)).unwrap();
        assert_relative_eq!(t.item(l), (1f64.exp() + 3f64.exp()).ln(), epsilon = 1e-14);
        let empty = Rc::new(vec![false, false, false]);
        assert!(t.logsumexp_rows(x, Some(empty)).is_err());
    }

    #[test]
    fn logsumexp_propagates_non_finite_rows() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[f64::NEG_INFINITY, f64::NEG_INFINITY], &[f64::NAN, 0.0], &[f64::INFINITY, 0.0]]));
        let l = t.logsumexp_rows(x, None).unwrap();
        let v = t.value(l).data();
        assert_eq!(v[0], f64::NEG_INFINITY);
        assert!(v[1].is_nan());
        assert_eq!(v[2], f64::INFINITY);
    }
}
