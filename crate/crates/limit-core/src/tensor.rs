//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] in topological order during the
//! forward pass and replayed in reverse by [`Tape::backward`]. Everything is
//! 64-bit and single-threaded per tape; plain [`Tensor`] values are immutable
//! carriers that can be shared freely.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid slice [{start}, {start}+{len}) of axis with extent {extent}")]
    BadSlice {
        start: usize,
        len: usize,
        extent: usize,
    },
}

/// Dense row-major f64 array. The plain value type; gradient bookkeeping
/// lives on the [`Tape`], not here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// i.i.d. normal entries scaled by `std`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Box-Muller; two uniforms in, one normal out.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    MeanAll(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert tape: records the forward pass, replays it in reverse.
///
/// A tape lives for one forward/backward cycle; parameters are plain
/// [`Tensor`]s owned outside and re-inserted as leaves each cycle, so
/// dropping the tape frees every recorded intermediate.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Insert a leaf. Gradients are reported only for `requires_grad` leaves.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a[m,k] . b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let out = matmul_raw(&va.data, &vb.data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Matmul whose forward value is invariant to consistent row
    /// permutations of its operands; each output cell sums its products
    /// in a canonical order. Used where set semantics demand that
    /// reordering set elements reorders outputs bit-exactly.
    pub fn matmul_exact(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_exact",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let out = matmul_canonical(&va.data, &vb.data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: va.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (va.shape[0], va.shape[1]);
        let out = transpose_raw(&va.data, m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    /// `x[b,n] + bias[n]`, the only broadcast supported.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape.len() != 2 || vb.shape.len() != 1 || vx.shape[1] != vb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: vx.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let n = vx.shape[1];
        let data = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb.data[i % n])
            .collect();
        let shape = vx.shape.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a non-differentiable mask (dropout carrier).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.shape != mask.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: va.shape.clone(),
                rhs: mask.shape.clone(),
            });
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&mask.data).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, mask), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x.max(0.0)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax with max-subtraction; accepts rank-1 or rank-2.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let t = softmax_raw(va);
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite("log_softmax"));
        }
        let cols = va.cols();
        let mut data = Vec::with_capacity(va.data.len());
        for r in 0..va.data.len() / cols {
            let row = &va.data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            data.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmaxRows(a), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(logits);
        let (b, n) = (v.rows(), v.cols());
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: v.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= n {
                return Err(TensorError::LabelOutOfRange {
                    label: l,
                    classes: n,
                });
            }
        }
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &v.data[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[l];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Per-row normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm_rows(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.shape != vec![d] || vb.shape != vec![d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape.clone(),
                rhs: vg.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(vx.data.len());
        for r in 0..vx.data.len() / d {
            let row = &vx.data[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for (j, v) in row.iter().enumerate() {
                data.push(vg.data[j] * (v - mean) * inv_std + vb.data[j]);
            }
        }
        let t = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNormRows { x, gamma, beta, eps }, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.data.iter().sum::<f64>() / va.data.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data.iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Stack rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: v.shape.clone(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if start + len > rows {
            return Err(TensorError::BadSlice {
                start,
                len,
                extent: rows,
            });
        }
        let data = va.data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![len, cols], data)?,
            Op::SliceRows(a, start, len),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if start + len > cols {
            return Err(TensorError::BadSlice {
                start,
                len,
                extent: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols(a, start, len),
            rg,
        ))
    }

    /// Train-mode inverted dropout; identity in eval mode or at p = 0.
    pub fn dropout<R: Rng>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !train || p == 0.0 {
            return Ok(a);
        }
        let va = self.value(a);
        let keep = 1.0 - p;
        let mask = Tensor {
            shape: va.shape.clone(),
            data: (0..va.data.len())
                .map(|_| {
                    if rng.random_range(0.0..1.0) < p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect(),
        };
        self.mul_const(a, mask)
    }

    /// Reverse sweep from a scalar loss; grads of `requires_grad` nodes
    /// accumulate into the returned buffer.
    pub fn backward(&self, loss: Var) -> Result<Grads, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor {
            shape: lv.shape.clone(),
            data: vec![1.0],
        });

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // d a = g . b^T ; d b = a^T . g
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.rg(*a) {
                    let bt = transpose_raw(&vb.data, k, n);
                    let da = matmul_raw(&g.data, &bt, m, n, k);
                    add_into(grads, a.0, va.shape.clone(), &da);
                }
                if self.rg(*b) {
                    let at = transpose_raw(&va.data, m, k);
                    let db = matmul_raw(&at, &g.data, k, m, n);
                    add_into(grads, b.0, vb.shape.clone(), &db);
                }
            }
            Op::Transpose(a) => {
                let va = self.value(*a);
                let (m, n) = (va.shape[0], va.shape[1]);
                let da = transpose_raw(&g.data, n, m);
                add_into(grads, a.0, va.shape.clone(), &da);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(grads, a.0, self.value(*a).shape.clone(), &g.data);
                }
                if self.rg(*b) {
                    add_into(grads, b.0, self.value(*b).shape.clone(), &g.data);
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.rg(*x) {
                    add_into(grads, x.0, self.value(*x).shape.clone(), &g.data);
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).shape[0];
                    let mut db = vec![0.0; n];
                    for (i, v) in g.data.iter().enumerate() {
                        db[i % n] += v;
                    }
                    add_into(grads, bias.0, vec![n], &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.data.iter().map(|v| v * c).collect();
                add_into(grads, a.0, self.value(*a).shape.clone(), &da);
            }
            Op::MulConst(a, mask) => {
                let da: Vec<f64> = g.data.iter().zip(&mask.data).map(|(v, m)| v * m).collect();
                add_into(grads, a.0, self.value(*a).shape.clone(), &da);
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(v, x)| if *x > 0.0 { *v } else { 0.0 })
                    .collect();
                add_into(grads, a.0, va.shape.clone(), &da);
            }
            Op::SoftmaxRows(a) => {
                // dx = s * (g - sum(g * s)) per row
                let s = &node.value;
                let cols = s.cols();
                let mut da = Vec::with_capacity(s.data.len());
                for r in 0..s.data.len() / cols {
                    let srow = &s.data[r * cols..(r + 1) * cols];
                    let grow = &g.data[r * cols..(r + 1) * cols];
                    let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    da.extend(srow.iter().zip(grow).map(|(sv, gv)| sv * (gv - dot)));
                }
                add_into(grads, a.0, self.value(*a).shape.clone(), &da);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax(x) * sum(g) per row
                let va = self.value(*a);
                let cols = va.cols();
                let s = softmax_raw(va);
                let mut da = Vec::with_capacity(va.data.len());
                for r in 0..va.data.len() / cols {
                    let srow = &s.data[r * cols..(r + 1) * cols];
                    let grow = &g.data[r * cols..(r + 1) * cols];
                    let gsum: f64 = grow.iter().sum();
                    da.extend(srow.iter().zip(grow).map(|(sv, gv)| gv - sv * gsum));
                }
                add_into(grads, a.0, va.shape.clone(), &da);
            }
            Op::CrossEntropy(logits, labels) => {
                let v = self.value(*logits);
                let (b, n) = (v.rows(), v.cols());
                let s = softmax_raw(v);
                let scale = g.data[0] / b as f64;
                let mut da = s.data;
                for (r, &l) in labels.iter().enumerate() {
                    da[r * n + l] -= 1.0;
                }
                for v in da.iter_mut() {
                    *v *= scale;
                }
                add_into(grads, logits.0, v.shape.clone(), &da);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let d = vx.cols();
                let rows = vx.data.len() / d;
                let mut dx = vec![0.0; vx.data.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &vx.data[r * d..(r + 1) * d];
                    let grow = &g.data[r * d..(r + 1) * d];
                    let (mean, inv_std) = row_moments(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let gy: Vec<f64> = grow
                        .iter()
                        .zip(&vg.data)
                        .map(|(gv, gamma)| gv * gamma)
                        .collect();
                    let m1 = gy.iter().sum::<f64>() / d as f64;
                    let m2 = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = (gy[j] - m1 - xhat[j] * m2) * inv_std;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.rg(*x) {
                    add_into(grads, x.0, vx.shape.clone(), &dx);
                }
                if self.rg(*gamma) {
                    add_into(grads, gamma.0, vec![d], &dgamma);
                }
                if self.rg(*beta) {
                    add_into(grads, beta.0, vec![d], &dbeta);
                }
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let c = g.data[0] / va.data.len() as f64;
                let da = vec![c; va.data.len()];
                add_into(grads, a.0, va.shape.clone(), &da);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                let da = vec![g.data[0]; va.data.len()];
                add_into(grads, a.0, va.shape.clone(), &da);
            }
            Op::ConcatRows(parts) => {
                let cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let rows = vp.rows();
                    if self.rg(p) {
                        let da = &g.data[offset * cols..(offset + rows) * cols];
                        add_into(grads, p.0, vp.shape.clone(), da);
                    }
                    offset += rows;
                }
            }
            Op::SliceRows(a, start, len) => {
                let va = self.value(*a);
                let cols = va.cols();
                let mut da = vec![0.0; va.data.len()];
                da[start * cols..(start + len) * cols].copy_from_slice(&g.data);
                add_into(grads, a.0, va.shape.clone(), &da);
            }
            Op::SliceCols(a, start, len) => {
                let va = self.value(*a);
                let (rows, cols) = (va.rows(), va.cols());
                let mut da = vec![0.0; va.data.len()];
                for r in 0..rows {
                    for j in 0..*len {
                        da[r * cols + start + j] = g.data[r * len + j];
                    }
                }
                add_into(grads, a.0, va.shape.clone(), &da);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Tensor>], idx: usize, shape: Vec<usize>, delta: &[f64]) {
    match &mut grads[idx] {
        Some(t) => {
            for (g, d) in t.data.iter_mut().zip(delta) {
                *g += d;
            }
        }
        None => {
            grads[idx] = Some(Tensor {
                shape,
                data: delta.to_vec(),
            });
        }
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_raw(v: &Tensor) -> Tensor {
    let cols = v.cols();
    let mut data = Vec::with_capacity(v.data.len());
    for r in 0..v.data.len() / cols {
        let row = &v.data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let sum = canonical_sum(exps.clone());
        data.extend(exps.iter().map(|e| e / sum));
    }
    Tensor {
        shape: v.shape.clone(),
        data,
    }
}

/// Sum in a canonical order so the result depends only on the multiset
/// of addends, not their arrangement.
fn canonical_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.iter().sum()
}

/// Like [`matmul_raw`] but accumulates each output row's addends in an
/// order keyed by value rather than index, so the result is invariant to
/// consistent row permutations of `a`'s columns and `b`'s rows.
fn matmul_canonical(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut idx: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        idx.sort_by(|&p, &q| {
            arow[p].total_cmp(&arow[q]).then_with(|| {
                let (bp, bq) = (&b[p * n..(p + 1) * n], &b[q * n..(q + 1) * n]);
                bp.iter()
                    .zip(bq)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let orow = &mut out[i * n..(i + 1) * n];
        for &p in &idx {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Central-difference gradient check.
///
/// `f` builds a scalar loss on a fresh tape from leaf vars created from
/// `params` (in order). Returns the max over all parameter components of
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zero;
        let analytic = match grads.get(*var) {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; params[pi].len()];
                &zero
            }
        };
        for ci in 0..params[pi].len() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[ci];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
