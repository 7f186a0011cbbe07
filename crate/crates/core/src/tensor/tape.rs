use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor, TensorError, LAYER_NORM_EPS};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse row-mixing matrix in CSR form: `out[i] = Σ w · x[src]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows<T> {
    in_rows: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> SparseRows<T> {
    pub fn new(in_rows: usize) -> Self {
        Self {
            in_rows,
            offsets: vec![0],
            src: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Appends one output row built from `(source row, weight)` pairs.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, T)>) {
        for (s, w) in entries {
            assert!(s < self.in_rows, "sparse source {s} >= {}", self.in_rows);
            self.src.push(s);
            self.weights.push(w);
        }
        self.offsets.push(self.src.len());
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.src[a..b]
            .iter()
            .copied()
            .zip(self.weights[a..b].iter().copied())
    }

    pub fn cast<U: Scalar>(&self) -> SparseRows<U> {
        SparseRows {
            in_rows: self.in_rows,
            offsets: self.offsets.clone(),
            src: self.src.clone(),
            weights: self.weights.iter().map(|w| U::of(w.f64())).collect(),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddConst(Var),
    Relu(Var),
    LayerNorm(Var, Vec<T>),
    Softmax(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SparseMix(Var, Arc<SparseRows<T>>),
    Bilinear {
        feat: Var,
        coords: Var,
        base: Arc<Vec<usize>>,
        h: usize,
        w: usize,
    },
    GroupWeightedSum(Var, Var),
    GroupDot(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    PickCols(Var, Arc<Vec<usize>>),
    ScaleRows(Var, Arc<Vec<T>>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any parameter feeds this node.
    needs: bool,
}

impl<T> Op<T> {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf | Param(_) => [None, None],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | GroupWeightedSum(a, b) | GroupDot(a, b) | ConcatCols(a, b) => [Some(*a), Some(*b)],
            Bilinear { feat, coords, .. } => [Some(*feat), Some(*coords)],
            Scale(x, _) | AddScalar(x) | AddConst(x) | Relu(x) | LayerNorm(x, _) | Softmax(x)
            | LogSoftmax(x) | Exp(x) | Log(x) | Softplus(x) | Abs(x) | GatherRows(x, _)
            | SparseMix(x, _) | SliceCols(x, _) | PickCols(x, _) | ScaleRows(x, _) | Reshape(x)
            | Sum(x) | Mean(x) => [Some(*x), None],
        }
    }
}

/// Append-only operation record. Parents always precede children, so a single
/// reverse sweep visits every node once.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for every parameter node, summed when a key was bound twice.
    pub fn params(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(key) = &node.op {
                let shape = node.value.shape().to_vec();
                let entry = out
                    .entry(key.clone())
                    .or_insert_with(|| Tensor::zeros(shape));
                if let Some(g) = &self.grads[i] {
                    for (o, &v) in entry.data_mut().iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
        }
        out
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &[usize]) -> Result<(usize, usize), TensorError> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err(op, t, &[])),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs = matches!(op, Op::Param(_))
            || op.inputs().iter().flatten().any(|v| self.nodes[v.0].needs);
        self.nodes.push(Node { value, op, needs });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter; its gradient is reported under `key`.
    pub fn param(&mut self, key: &str, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(key.to_string()))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = matrix_dims("matmul_nt", self.shape(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b)))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Row-wise bias add: `x[n×c] + bias[c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        if c > 0 {
            for row in t.data_mut().chunks_mut(c) {
                for (o, &bv) in row.iter_mut().zip(&b) {
                    *o += bv;
                }
            }
        }
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| f(e)).collect(),
        }
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.map(x, |e| e * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.map(x, |e| e + c);
        self.push(t, Op::AddScalar(x))
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.shape() != c.shape() {
            return Err(shape_err("add_const", v.shape(), c.shape()));
        }
        let data = v
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddConst(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| if e > T::zero() { e } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| e.exp());
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| e.ln());
        self.push(t, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| e.abs());
        self.push(t, Op::Abs(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| {
            if e > T::zero() {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            }
        });
        self.push(t, Op::Softplus(x))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let c = v.cols();
        if c < 2 {
            return Err(TensorError::Degenerate(format!(
                "layer_norm needs rows of length >= 2, got {c}"
            )));
        }
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut out = v.clone();
        let mut rstd = Vec::with_capacity(v.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.push(out, Op::LayerNorm(x, rstd)))
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<T>().ln();
                for e in row.iter_mut() {
                    *e -= lse;
                }
            }
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Copies rows `idx` of `x`; backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var, TensorError> {
        let v = self.value(x);
        let (n, c) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(TensorError::Index { index: i, rows: n });
            }
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(t, Op::GatherRows(x, idx)))
    }

    pub fn sparse_mix(&mut self, x: Var, m: Arc<SparseRows<T>>) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.rows() != m.in_rows() {
            return Err(shape_err("sparse_mix", v.shape(), &[m.in_rows()]));
        }
        let c = v.cols();
        let mut out = vec![T::zero(); m.out_rows() * c];
        for i in 0..m.out_rows() {
            let orow = &mut out[i * c..(i + 1) * c];
            for (s, w) in m.row(i) {
                axpy(w, v.row(s), orow);
            }
        }
        let t = Tensor::matrix(m.out_rows(), c, out)?;
        Ok(self.push(t, Op::SparseMix(x, m)))
    }

    /// Bilinear sampling with zero padding. Row `r` of `coords` holds `(u, v)`
    /// in cell units of an `h×w` map whose cells start at row `base[r]` of
    /// `feat`. Differentiable in both the features and the coordinates.
    pub fn bilinear_sample(
        &mut self,
        feat: Var,
        coords: Var,
        base: Arc<Vec<usize>>,
        h: usize,
        w: usize,
    ) -> Result<Var, TensorError> {
        let cv = self.value(coords);
        if cv.cols() != 2 || cv.rows() != base.len() {
            return Err(shape_err("bilinear_sample", cv.shape(), &[base.len(), 2]));
        }
        let fv = self.value(feat);
        let c = fv.cols();
        for &b in base.iter() {
            if b + h * w > fv.rows() {
                return Err(TensorError::Index {
                    index: b + h * w - 1,
                    rows: fv.rows(),
                });
            }
        }
        let m = base.len();
        let mut out = vec![T::zero(); m * c];
        for r in 0..m {
            let (u, v) = (cv.data()[2 * r], cv.data()[2 * r + 1]);
            let orow = &mut out[r * c..(r + 1) * c];
            for (cell, wt, _, _) in bilinear_corners(u, v, h, w) {
                axpy(wt, fv.row(base[r] + cell), orow);
            }
        }
        let t = Tensor::matrix(m, c, out)?;
        Ok(self.push(
            t,
            Op::Bilinear {
                feat,
                coords,
                base,
                h,
                w,
            },
        ))
    }

    /// `out[i] = Σ_j w[i, j] · values[i·k + j]` for `values[n·k × c]`, `w[n×k]`.
    pub fn group_weighted_sum(&mut self, values: Var, w: Var) -> Result<Var, TensorError> {
        let (vv, wv) = (self.value(values), self.value(w));
        let (n, k) = (wv.rows(), wv.cols());
        if vv.rows() != n * k {
            return Err(shape_err("group_weighted_sum", vv.shape(), wv.shape()));
        }
        let c = vv.cols();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                axpy(wv.data()[i * k + j], vv.row(i * k + j), orow);
            }
        }
        let t = Tensor::matrix(n, c, out)?;
        Ok(self.push(t, Op::GroupWeightedSum(values, w)))
    }

    /// `out[i, j] = q[i] · keys[i·g + j]` for `q[n×c]`, `keys[n·g × c]`.
    pub fn group_dot(&mut self, q: Var, keys: Var, g: usize) -> Result<Var, TensorError> {
        let (qv, kv) = (self.value(q), self.value(keys));
        let n = qv.rows();
        if kv.rows() != n * g || kv.cols() != qv.cols() {
            return Err(shape_err("group_dot", qv.shape(), kv.shape()));
        }
        let mut out = vec![T::zero(); n * g];
        for i in 0..n {
            for j in 0..g {
                out[i * g + j] = dot(qv.row(i), kv.row(i * g + j));
            }
        }
        let t = Tensor::matrix(n, g, out)?;
        Ok(self.push(t, Op::GroupDot(q, keys)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err("concat_cols", va.shape(), vb.shape()));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.rows() * (ca + cb));
        for i in 0..va.rows() {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let t = Tensor::matrix(va.rows(), ca + cb, data)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        let c = v.cols();
        if start > end || end > c {
            return Err(shape_err("slice_cols", v.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for i in 0..v.rows() {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let t = Tensor::matrix(v.rows(), end - start, data)?;
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    /// `out[i] = x[i, cols[i]]`
    pub fn pick_cols(&mut self, x: Var, cols: Arc<Vec<usize>>) -> Result<Var, TensorError> {
        let v = self.value(x);
        if cols.len() != v.rows() {
            return Err(shape_err("pick_cols", v.shape(), &[cols.len()]));
        }
        let mut data = Vec::with_capacity(cols.len());
        for (i, &j) in cols.iter().enumerate() {
            if j >= v.cols() {
                return Err(TensorError::Index {
                    index: j,
                    rows: v.cols(),
                });
            }
            data.push(v.row(i)[j]);
        }
        let t = Tensor::new(vec![cols.len()], data)?;
        Ok(self.push(t, Op::PickCols(x, cols)))
    }

    /// Multiplies row `i` by the constant `coef[i]`.
    pub fn scale_rows(&mut self, x: Var, coef: Arc<Vec<T>>) -> Result<Var, TensorError> {
        let v = self.value(x);
        if coef.len() != v.rows() {
            return Err(shape_err("scale_rows", v.shape(), &[coef.len()]));
        }
        let c = v.cols();
        let mut t = v.clone();
        if c > 0 {
            for (row, &k) in t.data_mut().chunks_mut(c).zip(coef.iter()) {
                for e in row.iter_mut() {
                    *e *= k;
                }
            }
        }
        Ok(self.push(t, Op::ScaleRows(x, coef)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len().max(1);
        let s = v.data().iter().copied().sum::<T>() / T::of(n as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Linear layer on rows: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if need(*a) {
                    gemm_nt(g, val(*b).data(), acc(grads, *a, m * k), m, n, k);
                }
                if need(*b) {
                    gemm_tn(val(*a).data(), g, acc(grads, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if need(*a) {
                    gemm_nn(g, val(*b).data(), acc(grads, *a, m * k), m, n, k);
                }
                if need(*b) {
                    gemm_tn(g, val(*a).data(), acc(grads, *b, n * k), m, n, k);
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if need(*b) {
                    add_into(acc(grads, *b, g.len()), g);
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if need(*b) {
                    for (o, &e) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *o -= e;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if need(*a) {
                    for ((o, &e), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(vb) {
                        *o += e * y;
                    }
                }
                if need(*b) {
                    for ((o, &e), &x) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(va) {
                        *o += e * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if need(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                let c = out.cols();
                if c > 0 && need(*b) {
                    let gb = acc(grads, *b, c);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, &e) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += e * *c;
                }
            }
            Op::AddScalar(x) | Op::AddConst(x) | Op::Reshape(x) => {
                add_into(acc(grads, *x, g.len()), g);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                for ((o, &e), &xi) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *o += e;
                    }
                }
            }
            Op::Exp(x) => {
                for ((o, &e), &y) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(out.data()) {
                    *o += e * y;
                }
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                for ((o, &e), &xi) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    *o += e / xi;
                }
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                for ((o, &e), &xi) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *o += e;
                    } else if xi < T::zero() {
                        *o -= e;
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = val(*x).data();
                for ((o, &e), &xi) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    let s = T::one() / (T::one() + (-xi).exp());
                    *o += e * s;
                }
            }
            Op::LayerNorm(x, rstd) => {
                let c = out.cols();
                let inv_c = T::of(1.0 / c as f64);
                let gx = acc(grads, *x, g.len());
                for (r, ((grow, yrow), gxrow)) in g
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let gm = grow.iter().copied().sum::<T>() * inv_c;
                    let gy = dot(grow, yrow) * inv_c;
                    for ((o, &ge), &ye) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *o += rstd[r] * (ge - gm - ye * gy);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let gx = acc(grads, *x, g.len());
                for ((grow, yrow), gxrow) in
                    g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c))
                {
                    let s = dot(grow, yrow);
                    for ((o, &ge), &ye) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *o += ye * (ge - s);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let gx = acc(grads, *x, g.len());
                for ((grow, yrow), gxrow) in
                    g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c))
                {
                    let s = grow.iter().copied().sum::<T>();
                    for ((o, &ge), &ye) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *o += ge - ye.exp() * s;
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = out.cols();
                let gx = acc(grads, *x, val(*x).len());
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::SparseMix(x, m) => {
                let c = out.cols();
                let gx = acc(grads, *x, val(*x).len());
                for r in 0..m.out_rows() {
                    let grow = &g[r * c..(r + 1) * c];
                    for (s, w) in m.row(r) {
                        axpy(w, grow, &mut gx[s * c..(s + 1) * c]);
                    }
                }
            }
            Op::Bilinear {
                feat,
                coords,
                base,
                h,
                w,
            } => {
                let fv = val(*feat);
                let cv = val(*coords).data().to_vec();
                let c = fv.cols();
                let (nf, nc) = (need(*feat), need(*coords));
                let mut gc = vec![T::zero(); if nc { cv.len() } else { 0 }];
                let mut gf_slot = nf.then(|| {
                    grads[feat.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); fv.len()])
                });
                for r in 0..base.len() {
                    let grow = &g[r * c..(r + 1) * c];
                    let (u, v) = (cv[2 * r], cv[2 * r + 1]);
                    for (cell, wt, du, dv) in bilinear_corners(u, v, *h, *w) {
                        let src = base[r] + cell;
                        if let Some(gf) = gf_slot.as_mut() {
                            axpy(wt, grow, &mut gf[src * c..(src + 1) * c]);
                        }
                        if nc {
                            let d = dot(grow, fv.row(src));
                            gc[2 * r] += du * d;
                            gc[2 * r + 1] += dv * d;
                        }
                    }
                }
                if let Some(gf) = gf_slot {
                    grads[feat.0] = Some(gf);
                }
                if nc {
                    add_into(acc(grads, *coords, gc.len()), &gc);
                }
            }
            Op::GroupWeightedSum(values, w) => {
                let (vv, wv) = (val(*values), val(*w));
                let (n, k, c) = (wv.rows(), wv.cols(), vv.cols());
                if need(*values) {
                    let gv = acc(grads, *values, vv.len());
                    for i in 0..n {
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..k {
                            let r = i * k + j;
                            axpy(wv.data()[r], grow, &mut gv[r * c..(r + 1) * c]);
                        }
                    }
                }
                if need(*w) {
                    let gw = acc(grads, *w, wv.len());
                    for i in 0..n {
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..k {
                            gw[i * k + j] += dot(grow, vv.row(i * k + j));
                        }
                    }
                }
            }
            Op::GroupDot(q, keys) => {
                let (qv, kv) = (val(*q), val(*keys));
                let (n, c) = (qv.rows(), qv.cols());
                let gsz = out.cols();
                if need(*q) {
                    let gq = acc(grads, *q, qv.len());
                    for i in 0..n {
                        for j in 0..gsz {
                            axpy(
                                g[i * gsz + j],
                                kv.row(i * gsz + j),
                                &mut gq[i * c..(i + 1) * c],
                            );
                        }
                    }
                }
                if need(*keys) {
                    let gk = acc(grads, *keys, kv.len());
                    for i in 0..n {
                        for j in 0..gsz {
                            let r = i * gsz + j;
                            axpy(g[r], qv.row(i), &mut gk[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let rows = out.rows();
                if need(*a) {
                    let ga = acc(grads, *a, rows * ca);
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * ca..(r + 1) * ca],
                            &g[r * (ca + cb)..r * (ca + cb) + ca],
                        );
                    }
                }
                if need(*b) {
                    let gb = acc(grads, *b, rows * cb);
                    for r in 0..rows {
                        add_into(
                            &mut gb[r * cb..(r + 1) * cb],
                            &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                        );
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let c = val(*x).cols();
                let w = out.cols();
                let gx = acc(grads, *x, val(*x).len());
                for r in 0..out.rows() {
                    add_into(
                        &mut gx[r * c + start..r * c + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
            Op::PickCols(x, cols) => {
                let c = val(*x).cols();
                let gx = acc(grads, *x, val(*x).len());
                for (r, &j) in cols.iter().enumerate() {
                    gx[r * c + j] += g[r];
                }
            }
            Op::ScaleRows(x, coef) => {
                let c = out.cols();
                let gx = acc(grads, *x, g.len());
                if c > 0 {
                    for ((o, grow), &k) in gx.chunks_mut(c).zip(g.chunks(c)).zip(coef.iter()) {
                        axpy(k, grow, o);
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                for o in acc(grads, *x, n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let s = g[0] / T::of(n.max(1) as f64);
                for o in acc(grads, *x, n).iter_mut() {
                    *o += s;
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for e in row.iter_mut() {
        *e = (*e - m).exp();
        s += *e;
    }
    for e in row.iter_mut() {
        *e /= s;
    }
}

/// In-bounds bilinear corners of `(u, v)` on an `h×w` grid as
/// `(cell, weight, ∂weight/∂u, ∂weight/∂v)`.
fn bilinear_corners<T: Scalar>(
    u: T,
    v: T,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, T, T, T)> {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let one = T::one();
    let (xi, yi) = (
        x0.to_i64().unwrap_or(i64::MIN / 2),
        y0.to_i64().unwrap_or(i64::MIN / 2),
    );
    let corners = [
        (xi, yi, (one - fx) * (one - fy), -(one - fy), -(one - fx)),
        (xi + 1, yi, fx * (one - fy), one - fy, -fx),
        (xi, yi + 1, (one - fx) * fy, -fy, one - fx),
        (xi + 1, yi + 1, fx * fy, fy, fx),
    ];
    corners.into_iter().filter_map(move |(cx, cy, wt, du, dv)| {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            Some((cy as usize * w + cx as usize, wt, du, dv))
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[5.0], &[6.0]]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(p), &[2, 1]);
        assert_eq!(tape.value(p).data(), &[17.0, 39.0]);

        let z = tape.constant(Tensor::zeros(vec![3, 2]));
        let p = tape.matmul(z, a).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn unary_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[-1.0, 2.0]]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let x = tape.constant(t(&[&[1.0, 2.0]]));
        let s = tape.scale(x, 2.0);
        assert_eq!(tape.value(s).data(), &[2.0, 4.0]);
        let x = tape.constant(t(&[&[1.0, 3.0]]));
        let n = tape.layer_norm(x).unwrap();
        let d = tape.value(n).data();
        // mean 2, std 1; eps shifts the result by ~5e-6
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_single_column_rows() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![3, 1]));
        assert!(matches!(
            tape.layer_norm(x),
            Err(TensorError::Degenerate(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        let s = tape.softmax(x);
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[&[0.0, 2f64.ln()]]));
        let s = tape.softmax(x);
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_rows(&[&[1000.0f32, 1000.0]]).unwrap());
        let s = tape.softmax(x);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gather_rows_examples() {
        let mut tape = Tape::<f64>::new();
        let src = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let x = tape.param("x", src.clone());
        let all = tape.gather_rows(x, Arc::new(vec![0, 1, 2])).unwrap();
        assert_eq!(tape.value(all), &src);

        let twice = tape.gather_rows(x, Arc::new(vec![2, 2])).unwrap();
        let s = tape.sum(twice);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);

        let empty = tape.gather_rows(x, Arc::new(vec![])).unwrap();
        assert_eq!(tape.shape(empty), &[0, 2]);

        let err = tape.gather_rows(x, Arc::new(vec![3])).unwrap_err();
        assert_eq!(err, TensorError::Index { index: 3, rows: 3 });
    }

    #[test]
    fn backward_examples() {
        // constant root: every parameter gradient is zero
        let mut tape = Tape::<f64>::new();
        let p = tape.param("p", t(&[&[1.0, 2.0]]));
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        let params = g.params(&tape);
        assert_eq!(params["p"].data(), &[0.0, 0.0]);
        let _ = p;

        // sum(A @ B) with B fixed: dA = ones @ Bᵀ
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", t(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 1.0]]));
        let bt = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = tape.constant(bt);
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        // row sums of B: [3, 7, 11]
        assert_eq!(g.wrt(a).unwrap(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);

        // relu of an all-negative input kills the gradient
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", t(&[&[-1.0, -2.0]]));
        let r = tape.relu(w);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn bilinear_at_integer_point_copies_cell() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(t(&[&[1.0], &[2.0], &[3.0], &[4.0]])); // 2×2 map, one channel
        let c = tape.constant(t(&[&[1.0, 0.0], &[0.5, 0.5], &[-1.0, 0.0]]));
        let s = tape
            .bilinear_sample(f, c, Arc::new(vec![0, 0, 0]), 2, 2)
            .unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 2.5, 0.0]);
    }

    #[test]
    fn sparse_mix_weighted_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", t(&[&[1.0, 1.0], &[2.0, 4.0]]));
        let mut m = SparseRows::new(2);
        m.push_row([(0, 0.5), (1, 0.5)]);
        m.push_row([]);
        let y = tape.sparse_mix(x, Arc::new(m)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 0.0, 0.0]);
    }
}
