//! Eager reverse-mode tape. Every op computes its value immediately,
//! records its inputs, and checks the result for NaN/Inf; `backward` walks
//! the nodes in reverse creation order (which is a topological order) and
//! accumulates gradients into the named leaves.
//!
//! Shape rules are broadcasting-free: each op documents exactly which
//! shapes it accepts. Images, features and embeddings are 2D
//! (batch × features); point clouds pass through as flattened 2D and are
//! pooled with `max_over_axis` on a 3D view.

use super::store::ParamStore;
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowVec(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Concat(usize, usize, usize),
    Reshape(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    MaxOverAxis { x: usize, argmax: Vec<usize> },
    SumAxis(usize, usize),
    Mean(usize),
    Sum(usize),
    L2Normalize { x: usize, norms: Vec<f64> },
    CosineSim { a: usize, b: usize },
    SmoothL1(usize),
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: BTreeMap<String, usize>,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Statistics of one batch-norm training pass, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
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

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Unnamed leaf: a constant input that receives no gradient entry.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf)
    }

    /// Named leaf with an explicit value (used by grad_check and tests).
    pub fn leaf(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if let Some(&id) = self.named.get(name) {
            return Err(Error::Invalid(format!(
                "leaf {name} already on tape as node {id}"
            )));
        }
        let v = self.push("leaf", t, Op::Leaf)?;
        self.named.insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Copy a parameter out of the store onto the tape as a named leaf.
    /// Repeated lookups of the same name return the same node, so a shared
    /// parameter accumulates a single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&id) = self.named.get(name) {
            return Ok(Var(id));
        }
        let t = store.value(name)?.clone();
        let v = self.push("param", t, Op::Leaf)?;
        self.named.insert(name.to_string(), v.0);
        Ok(v)
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a.0, b.0))
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("sub", t, Op::Sub(a.0, b.0))
    }

    /// Elementwise (Hadamard) product; shapes must match.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a.0, b.0))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale(a.0, s))
    }

    /// (B×D) + (D): add a vector to every row (bias).
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.value(x).shape().to_vec(), self.value(v).shape().to_vec());
        if sx.len() != 2 || sv.len() != 1 || sx[1] != sv[0] {
            return Err(Self::shape_err("add_row_vec", format!("{sx:?} + {sv:?}")));
        }
        let (b, d) = (sx[0], sx[1]);
        let mut data = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for i in 0..b {
            for j in 0..d {
                data[i * d + j] += vd[j];
            }
        }
        let t = Tensor::new(sx, data)?;
        self.push("add_row_vec", t, Op::AddRowVec(x.0, v.0))
    }

    /// (m×k) @ (k×n) → (m×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        // Row-major GEMM; strides are (cols, 1) for each operand.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.value(a).data().as_ptr(),
                k as isize,
                1,
                self.value(b).data().as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a.0, b.0))
    }

    /// 2D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(Self::shape_err("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("transpose", t, Op::Transpose(a.0))
    }

    /// Concatenate two 2D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || axis > 1 || sa[1 - axis] != sb[1 - axis] {
            return Err(Self::shape_err(
                "concat",
                format!("{sa:?} ++ {sb:?} along axis {axis}"),
            ));
        }
        let t = if axis == 0 {
            let mut data = self.value(a).data().to_vec();
            data.extend_from_slice(self.value(b).data());
            Tensor::new(vec![sa[0] + sb[0], sa[1]], data)?
        } else {
            let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
            let mut data = Vec::with_capacity(rows * (ca + cb));
            for i in 0..rows {
                data.extend_from_slice(&self.value(a).data()[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&self.value(b).data()[i * cb..(i + 1) * cb]);
            }
            Tensor::new(vec![rows, ca + cb], data)?
        };
        self.push("concat", t, Op::Concat(a.0, b.0, axis))
    }

    /// Reinterpret the data with a new shape of the same total length.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            ));
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.push("reshape", t, Op::Reshape(a.0))
    }

    fn unary<F: Fn(f64) -> f64>(
        &mut self,
        name: &'static str,
        a: Var,
        f: F,
        op: Op,
    ) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(name, t, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    /// Natural log; non-positive inputs yield a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a.0))
    }

    /// Elementwise smooth-L1 with threshold 1:
    /// 0.5·x² for |x| < 1, |x| − 0.5 otherwise.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "smooth_l1",
            a,
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            Op::SmoothL1(a.0),
        )
    }

    /// Iterate the lanes of a 1D/2D tensor along `axis`; yields
    /// (start, stride, count) triples describing each lane.
    fn lanes(shape: &[usize], axis: usize) -> Result<Vec<(usize, usize, usize)>> {
        match (shape.len(), axis) {
            (1, 0) => Ok(vec![(0, 1, shape[0])]),
            (2, 0) => Ok((0..shape[1]).map(|j| (j, shape[1], shape[0])).collect()),
            (2, 1) => Ok((0..shape[0]).map(|i| (i * shape[1], 1, shape[1])).collect()),
            _ => Err(Error::Shape {
                op: "axis",
                detail: format!("axis {axis} of shape {shape:?}"),
            }),
        }
    }

    fn softmax_forward(data: &mut [f64], lanes: &[(usize, usize, usize)], log_form: bool) {
        for &(start, stride, count) in lanes {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..count {
                mx = mx.max(data[start + k * stride]);
            }
            let mut sum = 0.0;
            for k in 0..count {
                sum += (data[start + k * stride] - mx).exp();
            }
            if log_form {
                let lse = mx + sum.ln();
                for k in 0..count {
                    data[start + k * stride] -= lse;
                }
            } else {
                for k in 0..count {
                    let idx = start + k * stride;
                    data[idx] = (data[idx] - mx).exp() / sum;
                }
            }
        }
    }

    /// Softmax along `axis` of a 1D/2D tensor (shift-by-max form).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let lanes = Self::lanes(&shape, axis)?;
        let mut data = self.value(a).data().to_vec();
        Self::softmax_forward(&mut data, &lanes, false);
        let t = Tensor::new(shape, data)?;
        self.push("softmax", t, Op::Softmax(a.0, axis))
    }

    /// log(softmax) along `axis`, computed stably in one pass.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let lanes = Self::lanes(&shape, axis)?;
        let mut data = self.value(a).data().to_vec();
        Self::softmax_forward(&mut data, &lanes, true);
        let t = Tensor::new(shape, data)?;
        self.push("log_softmax", t, Op::LogSoftmax(a.0, axis))
    }

    /// Maximum over one axis of an nD tensor; the axis disappears from the
    /// output shape. Ties route the gradient to the first maximum.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Self::shape_err(
                "max_over_axis",
                format!("axis {axis} of shape {shape:?}"),
            ));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, d)| *d)
            .collect();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let count = shape[axis];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * count * st[axis] + i;
                let mut best = base;
                for k in 1..count {
                    let idx = base + k * st[axis];
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        self.push("max_over_axis", t, Op::MaxOverAxis { x: a.0, argmax })
    }

    /// Sum over one axis of a 1D/2D tensor; output is 1D (or scalar for 1D
    /// input).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let lanes = Self::lanes(&shape, axis)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(lanes.len());
        for &(start, stride, count) in &lanes {
            out.push((0..count).map(|k| src[start + k * stride]).sum());
        }
        let t = if shape.len() == 1 {
            Tensor::scalar(out[0])
        } else {
            Tensor::vector(out)
        };
        self.push("sum_axis", t, Op::SumAxis(a.0, axis))
    }

    /// Mean of all elements → scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Invalid("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        self.push("mean", Tensor::scalar(s / n as f64), Op::Mean(a.0))
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0))
    }

    /// Normalize rows of a 2D tensor (or the whole 1D vector) to unit L2
    /// norm. A zero-norm row is an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => return Err(Self::shape_err("l2_normalize", format!("{shape:?}"))),
        };
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(rows);
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Invalid(format!("l2_normalize: zero-norm row {r}")));
            }
            for (j, x) in row.iter().enumerate() {
                data[r * cols + j] = x / n;
            }
            norms.push(n);
        }
        let t = Tensor::new(shape, data)?;
        self.push("l2_normalize", t, Op::L2Normalize { x: a.0, norms })
    }

    /// Row-wise cosine similarity of two equally-shaped 2D tensors → 1D
    /// vector of length B. Zero-norm rows are an error.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("cosine_similarity", a, b)?;
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(Self::shape_err("cosine_similarity", format!("{shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (&da[r * cols..(r + 1) * cols], &db[r * cols..(r + 1) * cols]);
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Invalid(format!("cosine_similarity: zero-norm row {r}")));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let t = Tensor::vector(out);
        self.push("cosine_similarity", t, Op::CosineSim { a: a.0, b: b.0 })
    }

    /// Batch norm in training mode over a B×D input with per-feature gamma
    /// and beta (both length D). Returns the normalized output plus the
    /// batch statistics so the caller can update running stats.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(Self::shape_err("batch_norm", format!("{sx:?}")));
        }
        let (b, d) = (sx[0], sx[1]);
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Self::shape_err(
                "batch_norm",
                format!("gamma/beta must be [{d}]"),
            ));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                mean[j] += src[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= b as f64;
        }
        for i in 0..b {
            for j in 0..d {
                let c = src[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v /= b as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        let (gd, bd) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (src[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = gd[j] * h + bd[j];
            }
        }
        let t = Tensor::new(sx, out)?;
        let v = self.push(
            "batch_norm",
            t,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch norm in eval mode: normalize with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(Self::shape_err("batch_norm", format!("{sx:?}")));
        }
        let (b, d) = (sx[0], sx[1]);
        if self.value(gamma).shape() != [d]
            || self.value(beta).shape() != [d]
            || running_mean.len() != d
            || running_var.len() != d
        {
            return Err(Self::shape_err(
                "batch_norm",
                format!("stats/gamma/beta must be [{d}]"),
            ));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let src = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                out[i * d + j] = gd[j] * (src[i * d + j] - running_mean[j]) * inv_std[j] + bd[j];
            }
        }
        let t = Tensor::new(sx, out)?;
        self.push(
            "batch_norm",
            t,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                inv_std,
                mean: running_mean.to_vec(),
            },
        )
    }

    /// Reverse accumulation from a scalar root. Returns one gradient per
    /// named leaf; leaves that cannot be reached from the root get zeros.
    pub fn backward(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        if !self.value(root).is_scalar() {
            return Err(Error::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, &id) in &self.named {
            let t = match &grads[id] {
                Some(g) => Tensor::new(self.nodes[id].value.shape().to_vec(), g.clone())?,
                None => Tensor::zeros(self.nodes[id].value.shape().to_vec()),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let la = self.nodes[*a].value.len();
                let ga = Self::grad_buf(grads, *a, la);
                for (dst, s) in ga.iter_mut().zip(g) {
                    *dst += s;
                }
                let lb = self.nodes[*b].value.len();
                let gb = Self::grad_buf(grads, *b, lb);
                for (dst, s) in gb.iter_mut().zip(g) {
                    *dst += s;
                }
            }
            Op::Sub(a, b) => {
                let la = self.nodes[*a].value.len();
                let ga = Self::grad_buf(grads, *a, la);
                for (dst, s) in ga.iter_mut().zip(g) {
                    *dst += s;
                }
                let lb = self.nodes[*b].value.len();
                let gb = Self::grad_buf(grads, *b, lb);
                for (dst, s) in gb.iter_mut().zip(g) {
                    *dst -= s;
                }
            }
            Op::Mul(a, b) => {
                let vb: Vec<f64> = self.nodes[*b].value.data().to_vec();
                let va: Vec<f64> = self.nodes[*a].value.data().to_vec();
                let ga = Self::grad_buf(grads, *a, va.len());
                for ((dst, s), y) in ga.iter_mut().zip(g).zip(&vb) {
                    *dst += s * y;
                }
                let gb = Self::grad_buf(grads, *b, vb.len());
                for ((dst, s), x) in gb.iter_mut().zip(g).zip(&va) {
                    *dst += s * x;
                }
            }
            Op::Scale(a, s) => {
                let la = self.nodes[*a].value.len();
                let ga = Self::grad_buf(grads, *a, la);
                for (dst, gv) in ga.iter_mut().zip(g) {
                    *dst += gv * s;
                }
            }
            Op::AddRowVec(x, v) => {
                let (b, d) = (node.value.shape()[0], node.value.shape()[1]);
                let gx = Self::grad_buf(grads, *x, b * d);
                for (dst, s) in gx.iter_mut().zip(g) {
                    *dst += s;
                }
                let gv = Self::grad_buf(grads, *v, d);
                for i in 0..b {
                    for j in 0..d {
                        gv[j] += g[i * d + j];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].value.shape()[0], self.nodes[*a].value.shape()[1]);
                let n = self.nodes[*b].value.shape()[1];
                let (pa, pb) = (self.nodes[*a].value.data().as_ptr(), self.nodes[*b].value.data().as_ptr());
                {
                    let ga = Self::grad_buf(grads, *a, m * k);
                    // dA += G @ Bᵀ, using B's transposed strides.
                    unsafe {
                        matrixmultiply::dgemm(
                            m, n, k, 1.0, g.as_ptr(), n as isize, 1, pb, 1, n as isize, 1.0,
                            ga.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                {
                    let gb = Self::grad_buf(grads, *b, k * n);
                    // dB += Aᵀ @ G, using A's transposed strides.
                    unsafe {
                        matrixmultiply::dgemm(
                            k, m, n, 1.0, pa, 1, k as isize, g.as_ptr(), n as isize, 1, 1.0,
                            gb.as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let ga = Self::grad_buf(grads, *a, m * n);
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] += g[i * m + j];
                    }
                }
            }
            Op::Concat(a, b, axis) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                if *axis == 0 {
                    let ga = Self::grad_buf(grads, *a, sa[0] * sa[1]);
                    for (dst, s) in ga.iter_mut().zip(&g[..sa[0] * sa[1]]) {
                        *dst += s;
                    }
                    let gb = Self::grad_buf(grads, *b, sb[0] * sb[1]);
                    for (dst, s) in gb.iter_mut().zip(&g[sa[0] * sa[1]..]) {
                        *dst += s;
                    }
                } else {
                    let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
                    {
                        let ga = Self::grad_buf(grads, *a, rows * ca);
                        for i in 0..rows {
                            for j in 0..ca {
                                ga[i * ca + j] += g[i * (ca + cb) + j];
                            }
                        }
                    }
                    let gb = Self::grad_buf(grads, *b, rows * cb);
                    for i in 0..rows {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let la = self.nodes[*a].value.len();
                let ga = Self::grad_buf(grads, *a, la);
                for (dst, s) in ga.iter_mut().zip(g) {
                    *dst += s;
                }
            }
            Op::Relu(a) => {
                let va: Vec<f64> = self.nodes[*a].value.data().to_vec();
                let ga = Self::grad_buf(grads, *a, va.len());
                for ((dst, s), x) in ga.iter_mut().zip(g).zip(&va) {
                    if *x > 0.0 {
                        *dst += s;
                    }
                }
            }
            Op::Tanh(a) => {
                let y: Vec<f64> = node.value.data().to_vec();
                let ga = Self::grad_buf(grads, *a, y.len());
                for ((dst, s), yv) in ga.iter_mut().zip(g).zip(&y) {
                    *dst += s * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(a) => {
                let y: Vec<f64> = node.value.data().to_vec();
                let ga = Self::grad_buf(grads, *a, y.len());
                for ((dst, s), yv) in ga.iter_mut().zip(g).zip(&y) {
                    *dst += s * yv * (1.0 - yv);
                }
            }
            Op::Exp(a) => {
                let y: Vec<f64> = node.value.data().to_vec();
                let ga = Self::grad_buf(grads, *a, y.len());
                for ((dst, s), yv) in ga.iter_mut().zip(g).zip(&y) {
                    *dst += s * yv;
                }
            }
            Op::Log(a) => {
                let va: Vec<f64> = self.nodes[*a].value.data().to_vec();
                let ga = Self::grad_buf(grads, *a, va.len());
                for ((dst, s), x) in ga.iter_mut().zip(g).zip(&va) {
                    *dst += s / x;
                }
            }
            Op::SmoothL1(a) => {
                let va: Vec<f64> = self.nodes[*a].value.data().to_vec();
                let ga = Self::grad_buf(grads, *a, va.len());
                for ((dst, s), x) in ga.iter_mut().zip(g).zip(&va) {
                    let d = if x.abs() < 1.0 { *x } else { x.signum() };
                    *dst += s * d;
                }
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data().to_vec();
                let lanes = Self::lanes(node.value.shape(), *axis).expect("checked in forward");
                let ga = Self::grad_buf(grads, *a, y.len());
                for (start, stride, count) in lanes {
                    let mut dot = 0.0;
                    for k in 0..count {
                        let idx = start + k * stride;
                        dot += g[idx] * y[idx];
                    }
                    for k in 0..count {
                        let idx = start + k * stride;
                        ga[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                let y = node.value.data().to_vec();
                let lanes = Self::lanes(node.value.shape(), *axis).expect("checked in forward");
                let ga = Self::grad_buf(grads, *a, y.len());
                for (start, stride, count) in lanes {
                    let mut gsum = 0.0;
                    for k in 0..count {
                        gsum += g[start + k * stride];
                    }
                    for k in 0..count {
                        let idx = start + k * stride;
                        ga[idx] += g[idx] - y[idx].exp() * gsum;
                    }
                }
            }
            Op::MaxOverAxis { x, argmax } => {
                let lx = self.nodes[*x].value.len();
                let gx = Self::grad_buf(grads, *x, lx);
                for (out_idx, &src_idx) in argmax.iter().enumerate() {
                    gx[src_idx] += g[out_idx];
                }
            }
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let lanes = Self::lanes(&shape, *axis).expect("checked in forward");
                let la = self.nodes[*a].value.len();
                let ga = Self::grad_buf(grads, *a, la);
                for (lane, (start, stride, count)) in lanes.into_iter().enumerate() {
                    for k in 0..count {
                        ga[start + k * stride] += g[lane];
                    }
                }
            }
            Op::Mean(a) => {
                let la = self.nodes[*a].value.len();
                let ga = Self::grad_buf(grads, *a, la);
                let s = g[0] / la as f64;
                for dst in ga.iter_mut() {
                    *dst += s;
                }
            }
            Op::Sum(a) => {
                let la = self.nodes[*a].value.len();
                let ga = Self::grad_buf(grads, *a, la);
                for dst in ga.iter_mut() {
                    *dst += g[0];
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data().to_vec();
                let cols = y.len() / norms.len();
                let gx = Self::grad_buf(grads, *x, y.len());
                for (r, n) in norms.iter().enumerate() {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dot += g[base + j] * y[base + j];
                    }
                    for j in 0..cols {
                        gx[base + j] += (g[base + j] - y[base + j] * dot) / n;
                    }
                }
            }
            Op::CosineSim { a, b } => {
                let va = self.nodes[*a].value.data().to_vec();
                let vb = self.nodes[*b].value.data().to_vec();
                let rows = node.value.len();
                let cols = va.len() / rows;
                let c = node.value.data().to_vec();
                {
                    let ga = Self::grad_buf(grads, *a, va.len());
                    for r in 0..rows {
                        let (ra, rb) = (&va[r * cols..(r + 1) * cols], &vb[r * cols..(r + 1) * cols]);
                        let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                        for j in 0..cols {
                            ga[r * cols + j] += g[r] * (rb[j] / (na * nb) - c[r] * ra[j] / (na * na));
                        }
                    }
                }
                let gb = Self::grad_buf(grads, *b, vb.len());
                for r in 0..rows {
                    let (ra, rb) = (&va[r * cols..(r + 1) * cols], &vb[r * cols..(r + 1) * cols]);
                    let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for j in 0..cols {
                        gb[r * cols + j] += g[r] * (ra[j] / (na * nb) - c[r] * rb[j] / (nb * nb));
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, d) = (node.value.shape()[0], node.value.shape()[1]);
                let gv = self.nodes[*gamma].value.data().to_vec();
                {
                    let gg = Self::grad_buf(grads, *gamma, d);
                    for i in 0..b {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                {
                    let gb = Self::grad_buf(grads, *beta, d);
                    for i in 0..b {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
                // Standard batch-norm input gradient with batch statistics.
                let mut sum_dxhat = vec![0.0; d];
                let mut sum_dxhat_xhat = vec![0.0; d];
                for i in 0..b {
                    for j in 0..d {
                        let dxh = g[i * d + j] * gv[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat[i * d + j];
                    }
                }
                let gx = Self::grad_buf(grads, *x, b * d);
                let bn = b as f64;
                for i in 0..b {
                    for j in 0..d {
                        let dxh = g[i * d + j] * gv[j];
                        gx[i * d + j] += inv_std[j] / bn
                            * (bn * dxh - sum_dxhat[j] - xhat[i * d + j] * sum_dxhat_xhat[j]);
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                mean,
            } => {
                let (b, d) = (node.value.shape()[0], node.value.shape()[1]);
                let gv = self.nodes[*gamma].value.data().to_vec();
                let vx = self.nodes[*x].value.data().to_vec();
                {
                    let gg = Self::grad_buf(grads, *gamma, d);
                    for i in 0..b {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * (vx[i * d + j] - mean[j]) * inv_std[j];
                        }
                    }
                }
                {
                    let gb = Self::grad_buf(grads, *beta, d);
                    for i in 0..b {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
                let gx = Self::grad_buf(grads, *x, b * d);
                for i in 0..b {
                    for j in 0..d {
                        gx[i * d + j] += g[i * d + j] * gv[j] * inv_std[j];
                    }
                }
            }
        }
    }
}
