use std::sync::Arc;

use crate::error::TensorError;
use crate::graph::{CsrMatrix, CsrPattern};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM { mat: Arc<CsrMatrix>, x: Var },
    SpMMValues { pattern: Arc<CsrPattern>, values: Var, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScalarMul { s: Var, x: Var },
    AddRowBroadcast { x: Var, bias: Var },
    RowScale { scale: Var, x: Var },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Rsqrt(Var),
    RowSoftmax(Var),
    CrossEntropy { logits: Var, rows: Vec<usize>, targets: Vec<usize> },
    Mse { pred: Var, target: Tensor, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    PopVariance(Var),
    SqL2Norm(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    SegmentSoftmax { x: Var, pattern: Arc<CsrPattern> },
    ConcatCols(Var, Var),
    MinMax { x: Var, lo: usize, hi: usize },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order, so the backward pass is a single reverse
/// sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape(format!("{op}: {a:?} vs {b:?}"))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(op, value, needs_grad))
    }

    fn check_same(&self, name: &str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), out, &[a, b])
    }

    /// Product of a constant sparse matrix with a dense operand.
    pub fn sparse_dense_matmul(&mut self, mat: &Arc<CsrMatrix>, x: Var) -> Result<Var, TensorError> {
        let out = mat.matmul_dense(self.value(x))?;
        self.push("sparse_dense_matmul", Op::SpMM { mat: Arc::clone(mat), x }, out, &[x])
    }

    /// Product of a sparse matrix with differentiable stored values.
    pub fn sparse_values_matmul(
        &mut self,
        pattern: &Arc<CsrPattern>,
        values: Var,
        x: Var,
    ) -> Result<Var, TensorError> {
        let out = pattern.matmul_dense(self.value(values).data(), self.value(x))?;
        self.push(
            "sparse_values_matmul",
            Op::SpMMValues { pattern: Arc::clone(pattern), values, x },
            out,
            &[values, x],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), out, &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same("hadamard", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("hadamard", Op::Hadamard(a, b), out, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", Op::Scale(a, factor), out, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", Op::AddScalar(a), out, &[a])
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scalar_mul", self.value(s).shape(), &[]));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        self.push("scalar_mul", Op::ScalarMul { s, x }, out, &[s, x])
    }

    /// `x + 1·biasᵀ` for `x` of shape `n × m` and a bias of `m` entries.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() != 2 || bv.len() != xv.cols() {
            return Err(shape_err("add_row_broadcast", xv.shape(), bv.shape()));
        }
        let m = xv.cols();
        let mut out = xv.clone();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[k % m];
        }
        self.push("add_row_broadcast", Op::AddRowBroadcast { x, bias }, out, &[x, bias])
    }

    /// `diag(scale) · x`.
    pub fn row_scale(&mut self, scale: Var, x: Var) -> Result<Var, TensorError> {
        let (sv, xv) = (self.value(scale), self.value(x));
        if sv.len() != xv.rows() {
            return Err(shape_err("row_scale", sv.shape(), xv.shape()));
        }
        let m = xv.cols();
        let mut out = xv.clone();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o *= sv.data()[k / m];
        }
        self.push("row_scale", Op::RowScale { scale, x }, out, &[scale, x])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", Op::Relu(a), out, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", Op::LeakyRelu(a, slope), out, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", Op::Sigmoid(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), out, &[a])
    }

    /// Element-wise `1/√x`.
    pub fn rsqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| 1.0 / x.sqrt());
        self.push("rsqrt", Op::Rsqrt(a), out, &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..av.rows() {
            softmax_row(av.row(i), out.row_mut(i));
        }
        self.push("row_softmax", Op::RowSoftmax(a), out, &[a])
    }

    /// Mean softmax cross-entropy over the selected rows.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Var,
        rows: &[usize],
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        if rows.is_empty() || rows.len() != targets.len() {
            return Err(TensorError::Invalid("cross entropy needs matching, non-empty rows".into()));
        }
        let z = self.value(logits);
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(targets) {
            let row = z.row(r);
            if y >= row.len() {
                return Err(TensorError::Invalid(format!("target {y} out of range")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / rows.len() as f64);
        self.push(
            "cross_entropy_with_logits",
            Op::CrossEntropy { logits, rows: rows.to_vec(), targets: targets.to_vec() },
            out,
            &[logits],
        )
    }

    /// Mean squared error over the selected rows against a constant target
    /// with the same row width.
    pub fn mse(&mut self, pred: Var, target: &Tensor, rows: &[usize]) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if rows.is_empty() || p.rows() != target.rows() || p.cols() != target.cols() {
            return Err(shape_err("mse", p.shape(), target.shape()));
        }
        let m = p.cols();
        let mut total = 0.0;
        for &r in rows {
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                total += (a - b) * (a - b);
            }
        }
        let out = Tensor::scalar(total / (rows.len() * m) as f64);
        self.push("mse", Op::Mse { pred, target: target.clone(), rows: rows.to_vec() }, out, &[pred])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", Op::Sum(a), out, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push("mean", Op::Mean(a), out, &[a])
    }

    /// Variance over all entries with the `1/n` convention.
    pub fn population_variance(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Invalid("variance of empty tensor".into()));
        }
        let n = v.len() as f64;
        let mu = v.data().iter().sum::<f64>() / n;
        let var = v.data().iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        self.push("population_variance", Op::PopVariance(a), Tensor::scalar(var), &[a])
    }

    pub fn sq_l2_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).sq_norm());
        self.push("sq_l2_norm", Op::SqL2Norm(a), out, &[a])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let m = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= xv.rows() {
                return Err(TensorError::Invalid(format!("gather index {i} out of range")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let shape = if xv.rank() == 1 { vec![idx.len()] } else { vec![idx.len(), m] };
        let out = Tensor::new(shape, data)?;
        self.push("gather_rows", Op::GatherRows { x, idx: idx.to_vec() }, out, &[x])
    }

    /// Sums row `k` of `x` into row `idx[k]` of an `n`-row output.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(TensorError::Invalid("scatter index length".into()));
        }
        let m = xv.cols();
        let mut data = vec![0.0; n * m];
        for (k, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::Invalid(format!("scatter index {i} out of range")));
            }
            for (o, &v) in data[i * m..(i + 1) * m].iter_mut().zip(xv.row(k)) {
                *o += v;
            }
        }
        let shape = if xv.rank() == 1 { vec![n] } else { vec![n, m] };
        let out = Tensor::new(shape, data)?;
        self.push("scatter_add_rows", Op::ScatterAddRows { x, idx: idx.to_vec() }, out, &[x])
    }

    /// Softmax of per-entry scores within each row segment of `pattern`.
    pub fn segment_softmax(&mut self, x: Var, pattern: &Arc<CsrPattern>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.len() != pattern.nnz() {
            return Err(TensorError::Shape("segment_softmax length".into()));
        }
        let mut out = xv.clone();
        for i in 0..pattern.n_rows() {
            let r = pattern.row_range(i);
            if !r.is_empty() {
                softmax_row(&xv.data()[r.clone()], &mut out.data_mut()[r]);
            }
        }
        self.push("segment_softmax", Op::SegmentSoftmax { x, pattern: Arc::clone(pattern) }, out, &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av.shape(), bv.shape()));
        }
        let (n, ma, mb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::matrix(n, ma + mb, data)?;
        self.push("concat_cols", Op::ConcatCols(a, b), out, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", Op::Reshape(x), out, &[x])
    }

    /// `(x − min x) / (max x − min x)` over all entries; all ones when every
    /// entry is equal. The extremes are differentiated through the entries
    /// attaining them (lowest index on ties).
    pub fn min_max_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return self.push("min_max_normalize", Op::MinMax { x, lo: 0, hi: 0 }, xv.clone(), &[x]);
        }
        let (mut lo, mut hi) = (0, 0);
        for (k, &v) in xv.data().iter().enumerate() {
            if v < xv.data()[lo] {
                lo = k;
            }
            if v > xv.data()[hi] {
                hi = k;
            }
        }
        let (a, b) = (xv.data()[lo], xv.data()[hi]);
        let out = if b > a { xv.map(|v| (v - a) / (b - a)) } else { Tensor::filled(xv.shape(), 1.0) };
        self.push("min_max_normalize", Op::MinMax { x, lo, hi }, out, &[x])
    }

    /// Reverse sweep from the single-element output `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let shape = self.value(root).shape().to_vec();
        grads[root.0] = Some(Tensor::filled(&shape, 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(g.reshape(shape).expect("gradient size matches value"));
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul(&bv.transpose()?)?);
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, av.transpose()?.matmul(g)?);
                }
            }
            Op::SpMM { mat, x } => {
                let gx = mat.pattern().transpose_matmul_dense(mat.values(), g)?;
                self.accumulate(grads, *x, gx);
            }
            Op::SpMMValues { pattern, values, x } => {
                let vals = self.value(*values);
                if self.nodes[x.0].needs_grad {
                    let gx = pattern.transpose_matmul_dense(vals.data(), g)?;
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[values.0].needs_grad {
                    let xv = self.value(*x);
                    let mut gv = vec![0.0; pattern.nnz()];
                    for i in 0..pattern.n_rows() {
                        let grow = g.row(i);
                        for p in pattern.row_range(i) {
                            let j = pattern.col_idx()[p];
                            gv[p] = grow.iter().zip(xv.row(j)).map(|(a, b)| a * b).sum();
                        }
                    }
                    let shape = vals.shape().to_vec();
                    self.accumulate(grads, *values, Tensor::new(shape, gv)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                self.accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScalarMul { s, x } => {
                let k = self.value(*s).item();
                let xv = self.value(*x);
                let shape = self.value(*s).shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(shape, vec![g.dot(xv)])?);
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::AddRowBroadcast { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                let m = g.cols();
                let mut gb = vec![0.0; m];
                for (k, v) in g.data().iter().enumerate() {
                    gb[k % m] += v;
                }
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(shape, gb)?);
            }
            Op::RowScale { scale, x } => {
                let (sv, xv) = (self.value(*scale), self.value(*x));
                let m = xv.cols();
                let mut gx = g.clone();
                for (k, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= sv.data()[k / m];
                }
                self.accumulate(grads, *x, gx);
                let gs: Vec<f64> = (0..xv.rows())
                    .map(|i| g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum())
                    .collect();
                self.accumulate(grads, *scale, Tensor::new(sv.shape().to_vec(), gs)?);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, zip_map(g, av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let s = *slope;
                self.accumulate(grads, *a, zip_map(g, av, |gv, x| if x > 0.0 { gv } else { s * gv }));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y)),
            Op::Rsqrt(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| -0.5 * gv * y * y * y)),
            Op::RowSoftmax(a) => {
                let mut ga = out.clone();
                for i in 0..out.rows() {
                    let (p, gr) = (out.row(i), g.row(i));
                    let inner: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, v) in ga.row_mut(i).iter_mut().enumerate() {
                        *v = p[k] * (gr[k] - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy { logits, rows, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / rows.len() as f64;
                let mut gz = Tensor::zeros(z.shape());
                let mut p = vec![0.0; z.cols()];
                for (&r, &y) in rows.iter().zip(targets) {
                    softmax_row(z.row(r), &mut p);
                    p[y] -= 1.0;
                    for (o, v) in gz.row_mut(r).iter_mut().zip(&p) {
                        *o += v * scale;
                    }
                }
                self.accumulate(grads, *logits, gz);
            }
            Op::Mse { pred, target, rows } => {
                let pv = self.value(*pred);
                let m = pv.cols();
                let scale = 2.0 * g.item() / (rows.len() * m) as f64;
                let mut gp = Tensor::zeros(pv.shape());
                for &r in rows {
                    let diffs: Vec<f64> =
                        pv.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * scale).collect();
                    for (o, d) in gp.row_mut(r).iter_mut().zip(diffs) {
                        *o += d;
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
            Op::Sum(a) => {
                let k = g.item();
                self.accumulate(grads, *a, Tensor::filled(self.value(*a).shape(), k));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let k = g.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(av.shape(), k));
            }
            Op::PopVariance(a) => {
                let av = self.value(*a);
                let n = av.len() as f64;
                let mu = av.data().iter().sum::<f64>() / n;
                let k = 2.0 * g.item() / n;
                self.accumulate(grads, *a, av.map(|x| k * (x - mu)));
            }
            Op::SqL2Norm(a) => {
                let k = 2.0 * g.item();
                self.accumulate(grads, *a, self.value(*a).map(|x| k * x));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data()[k * m..(k + 1) * m];
                    for (o, v) in gx.row_mut(i).iter_mut().zip(src) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAddRows { x, idx } => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut data = Vec::with_capacity(xv.len());
                for &i in idx {
                    data.extend_from_slice(&g.data()[i * m..(i + 1) * m]);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::SegmentSoftmax { x, pattern } => {
                let mut gx = out.clone();
                for i in 0..pattern.n_rows() {
                    let r = pattern.row_range(i);
                    let p = &out.data()[r.clone()];
                    let gr = &g.data()[r.clone()];
                    let inner: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, v) in gx.data_mut()[r].iter_mut().enumerate() {
                        *v = p[k] * (gr[k] - inner);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(a, b) => {
                let (ma, mb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = g.rows();
                let mut ga = Vec::with_capacity(n * ma);
                let mut gb = Vec::with_capacity(n * mb);
                for i in 0..n {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..ma]);
                    gb.extend_from_slice(&row[ma..]);
                }
                self.accumulate(grads, *a, Tensor::matrix(n, ma, ga)?);
                self.accumulate(grads, *b, Tensor::matrix(n, mb, gb)?);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone()),
            Op::MinMax { x, lo, hi } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                if xv.is_empty() {
                    self.accumulate(grads, *x, gx);
                    return Ok(());
                }
                let (a, b) = (xv.data()[*lo], xv.data()[*hi]);
                if b > a {
                    let r = b - a;
                    let (mut ga, mut gb) = (0.0, 0.0);
                    for (k, (&gk, &v)) in g.data().iter().zip(xv.data()).enumerate() {
                        gx.data_mut()[k] += gk / r;
                        ga += gk * (v - b) / (r * r);
                        gb -= gk * (v - a) / (r * r);
                    }
                    gx.data_mut()[*lo] += ga;
                    gx.data_mut()[*hi] += gb;
                }
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}
