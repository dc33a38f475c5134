//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends one node holding its forward value.
//! `Tape::backward` walks the nodes from the loss back to the first node, so
//! node order *is* execution order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const LOG_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    PairwiseSqDist(Var, Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    L2NormalizeRows(Var, Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], retained for leaf nodes.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

/// `a[m x k] * b[k x n]`.
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m x n] * b[k x n]^T` -> `m x k`.
fn mm_bt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// `a[m x k]^T * c[m x n]` -> `k x n`.
fn mm_at<T: Real>(a: &[T], c: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o = *o + av * cv;
            }
        }
    }
    out
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, k), (k2, n)) = match (as_matrix(sa), as_matrix(sb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        debug_assert_eq!(k, k2);
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        Ok(va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg))
    }

    /// Adds a row vector `bias` (length `cols`) to every row of matrix `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let cols = va.cols();
        if va.rank() != 2 || vb.len() != cols {
            return Err(shape_err("add_bias", va.shape(), vb.shape()));
        }
        let b = vb.data();
        let out: Vec<T> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % cols])
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| x * c).collect())
            .expect("same element count");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = as_matrix(va.shape()).ok_or_else(|| shape_err("transpose", va.shape(), &[]))?;
        let d = va.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    /// Stacks matrices along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of zero tensors".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenates matrices side by side along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_cols of zero tensors".into()))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(first), v.shape()));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || start + len > va.rows() {
            return Err(shape_err("slice_rows", va.shape(), &[start, len]));
        }
        let c = va.cols();
        let out = va.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[len, c], out)?, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || start + len > va.cols() {
            return Err(shape_err("slice_cols", va.shape(), &[start, len]));
        }
        let (r, c) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&va.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols(a, start), rg))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        if c == 0 {
            return Err(shape_err("softmax_rows", va.shape(), &[]));
        }
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalization (eps 1e-5) followed by a per-feature affine.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.cols();
        if vx.rank() != 2 || vg.len() != c || vb.len() != c {
            return Err(shape_err("layer_norm_rows", vx.shape(), vg.shape()));
        }
        let r = vx.rows();
        let eps = T::of(LN_EPS);
        let n = T::of(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = vx.row(i);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| gelu_parts(x).0).collect())
            .expect("same element count");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Gathers rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(shape_err("gather_rows", vt.shape(), &[]));
        }
        let (r, c) = (vt.rows(), vt.cols());
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(vt.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[indices.len(), c], out)?,
            Op::GatherRows(table, indices.to_vec()),
            rg,
        ))
    }

    /// Picks elements by flat (row-major) index into a vector.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let mut out = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= va.len() {
                return Err(Error::Index {
                    what: "pick",
                    index: i,
                    len: va.len(),
                });
            }
            out.push(va.data()[i]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[flat.len()], out)?, Op::Pick(a, flat.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(shape_err("mean", va.shape(), &[]));
        }
        let n = T::of(va.len() as f64);
        let s = va.data().iter().fold(T::zero(), |s, &v| s + v) / n;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Sums each row of a matrix, yielding a vector of length `rows`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(shape_err("row_sum", va.shape(), &[]));
        }
        let out: Vec<T> = (0..va.rows())
            .map(|i| va.row(i).iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[out.len()], out)?, Op::RowSum(a), rg))
    }

    /// Squared Euclidean distances between every row of `a` and every row of `b`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.cols() {
            return Err(shape_err("pairwise_sq_dist", va.shape(), vb.shape()));
        }
        let (m, n) = (va.rows(), vb.rows());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = va
                    .row(i)
                    .iter()
                    .zip(vb.row(j))
                    .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::PairwiseSqDist(a, b), rg))
    }

    /// Natural log with inputs clamped below at 1e-12.
    pub fn log(&mut self, a: Var) -> Var {
        let floor = T::of(LOG_FLOOR);
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| x.max(floor).ln()).collect())
            .expect("same element count");
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape(),
            va.data().iter().map(|&x| x.max(T::zero()).sqrt()).collect(),
        )
        .expect("same element count");
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| x.abs()).collect())
            .expect("same element count");
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape(),
            va.data().iter().map(|&x| x.max(T::zero())).collect(),
        )
        .expect("same element count");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(shape_err("l2_normalize_rows", va.shape(), &[]));
        }
        let c = va.cols();
        let floor = T::of(NORM_FLOOR);
        let mut norms = Vec::with_capacity(va.rows());
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let n = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt().max(floor);
            norms.push(n);
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2NormalizeRows(a, norms), rg))
    }

    /// Backpropagates from a scalar `loss`, returning gradients for every
    /// leaf reachable from it that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.backprop_node(node, g, i, &mut grads, &mut leaf_grads);
        }
        Ok(Gradients {
            grads: leaf_grads,
            visited,
        })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        idx: usize,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut [Option<Tensor<T>>],
    ) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<T>| accumulate(grads, v, delta);

        match &node.op {
            Op::Leaf => {
                leaf_grads[idx] = Some(
                    Tensor::new(node.value.shape(), g).expect("gradient matches value shape"),
                );
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if need(*a) {
                    acc(*a, mm_bt(&g, val(*b).data(), m, n, k));
                }
                if need(*b) {
                    acc(*b, mm_at(val(*a).data(), &g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if need(*b) {
                    acc(*b, g.clone());
                }
                if need(*a) {
                    acc(*a, g);
                }
            }
            Op::Sub(a, b) => {
                if need(*b) {
                    acc(*b, g.iter().map(|&x| -x).collect());
                }
                if need(*a) {
                    acc(*a, g);
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect());
                }
                if need(*b) {
                    acc(*b, g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddBias(a, b) => {
                if need(*b) {
                    let c = val(*b).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    acc(*b, db);
                }
                if need(*a) {
                    acc(*a, g);
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
            Op::Reshape(a) => acc(*a, g),
            Op::Transpose(a) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if need(p) {
                        acc(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if need(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        acc(p, d);
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = val(*a).cols();
                let mut d = vec![T::zero(); val(*a).len()];
                d[start * c..start * c + g.len()].copy_from_slice(&g);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                let len = node.value.cols();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot = yrow.iter().zip(grow).fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).len();
                let gam = val(*gamma).data();
                if need(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &gv), &hv) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d = *d + gv * hv;
                        }
                    }
                    acc(*gamma, dg);
                }
                if need(*beta) {
                    let mut db = vec![T::zero(); c];
                    for grow in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                    acc(*beta, db);
                }
                if need(*x) {
                    let n = T::of(c as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((dxrow, grow), hrow)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hrow[j];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            dxrow[j] = rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| gv * gelu_parts(x).1)
                    .collect();
                acc(*a, d);
            }
            Op::GatherRows(t, idx) => {
                let c = val(*t).cols();
                let mut d = vec![T::zero(); val(*t).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = d[i * c + j] + g[k * c + j];
                    }
                }
                acc(*t, d);
            }
            Op::Pick(a, idx) => {
                let mut d = vec![T::zero(); val(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    d[i] = d[i] + g[k];
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::RowSum(a) => {
                let c = val(*a).cols();
                let mut d = Vec::with_capacity(val(*a).len());
                for &gv in &g {
                    d.extend(core::iter::repeat_n(gv, c));
                }
                acc(*a, d);
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, n, c) = (va.rows(), vb.rows(), va.cols());
                let two = T::of(2.0);
                let mut da = vec![T::zero(); m * c];
                let mut db = vec![T::zero(); n * c];
                for i in 0..m {
                    for j in 0..n {
                        let w = two * g[i * n + j];
                        if w == T::zero() {
                            continue;
                        }
                        for k in 0..c {
                            let diff = va.data()[i * c + k] - vb.data()[j * c + k];
                            da[i * c + k] = da[i * c + k] + w * diff;
                            db[j * c + k] = db[j * c + k] - w * diff;
                        }
                    }
                }
                if need(*b) {
                    acc(*b, db);
                }
                if need(*a) {
                    acc(*a, da);
                }
            }
            Op::Log(a) => {
                let floor = T::of(LOG_FLOOR);
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > floor { gv / x } else { T::zero() })
                    .collect();
                acc(*a, d);
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv / (two * y) } else { T::zero() })
                    .collect();
                acc(*a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for (r, ((drow, yrow), grow)) in
                    d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)).enumerate()
                {
                    let dot = yrow.iter().zip(grow).fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = (gv - yv * dot) / norms[r];
                    }
                }
                acc(*a, d);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}
