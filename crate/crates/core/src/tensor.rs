//! Dense float64 tensors and a reverse-mode autodiff graph.
//!
//! A [`Graph`] is an arena of nodes appended in evaluation order, so the node
//! list is already topologically sorted and [`Graph::backward`] walks it once
//! in reverse. Values are computed eagerly when an op is recorded.
//!
//! Broadcasting is limited to row-wise bias addition and scalar ops.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square root of 2/pi, the tanh-GELU scale constant.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Row-major float64 array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    GatherRows {
        src: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clip for probabilities fed to [`Graph::bce`].
pub const PROB_CLIP: f64 = 1e-12;

/// Arena of recorded operations; one graph per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + libm::tanh(inner))
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = libm::tanh(inner);
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| libm::exp(x - max)).sum();
    max + libm::log(s)
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn softmax_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are accumulated for it only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by [`Graph::backward`]; zeros when no path reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor {
                shape: value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&value.shape),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, &tb.data, m, k, n, &mut out);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Transpose(a),
            &[a],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, n) = ta.dims2("add_row")?;
        if tb.shape != [n] {
            return Err(shape_err("add_row", ta, tb));
        }
        let data = ta
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(&tb.data).map(|(x, y)| x + y))
            .collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x + c).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::AddScalar(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| gelu(x)).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Sigmoid(a), &[a])
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape.len() {
            return Err(Error::Axis {
                axis,
                shape: t.shape.clone(),
            });
        }
        let (outer, n, inner) = softmax_dims(&t.shape, axis);
        let mut out = vec![0.0; t.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n)
                    .map(|k| t.data[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = libm::exp(t.data[idx(k)] - max);
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[idx(k)] /= sum;
                }
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last dimension (population variance).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape.last().ok_or(Error::Shape {
            op: "layernorm",
            lhs: vec![],
            rhs: vec![],
        })?;
        for p in [gain, bias] {
            if self.value(p).shape != [n] {
                return Err(shape_err("layernorm", t, self.value(p)));
            }
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let rows = t.data.len() / n;
        let mut out = vec![0.0; t.data.len()];
        let mut xhat = vec![0.0; t.data.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let denom = var + eps;
            // zero-variance rows with eps = 0 normalize to zero instead of NaN
            let rs = if denom > 0.0 {
                1.0 / libm::sqrt(denom)
            } else {
                0.0
            };
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Reshape without moving data.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let (m, n) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: id,
                    size: m,
                });
            }
            data.extend_from_slice(&t.data[id * n..(id + 1) * n]);
        }
        if ids.is_empty() {
            return Err(Error::Index {
                op: "gather_rows",
                index: 0,
                size: 0,
            });
        }
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), n],
                data,
            },
            Op::GatherRows {
                src,
                ids: ids.to_vec(),
            },
            &[src],
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let (m, n) = t.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.data[r * n + start..r * n + start + len]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            Op::SliceCols { src, start },
            &[src],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let (m, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (mi, ni) = t.dims2("concat_cols")?;
            if mi != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let (_, n) = self.value(*first).dims2("concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = self.value(*p);
            let (mi, ni) = t.dims2("concat_rows")?;
            if ni != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(&t.data);
            m += mi;
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean negative log-softmax of the target class over rows whose target is
    /// not `ignore_index`. When every row is ignored the loss is exactly 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = t.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::LengthMismatch {
                what: "cross_entropy targets",
                left: n,
                right: targets.len(),
            });
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            if target == ignore_index {
                continue;
            }
            if target >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    size: v,
                });
            }
            let row = &t.data[r * v..(r + 1) * v];
            let lse = logsumexp(row);
            for j in 0..v {
                probs[r * v + j] = libm::exp(row[j] - lse);
            }
            total += lse - row[target];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    /// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(probs);
        if t.data.len() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "bce targets",
                left: t.data.len(),
                right: targets.len(),
            });
        }
        let n = targets.len() as f64;
        let loss = t
            .data
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
            &[probs],
        ))
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2("l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &t.data[r * n..(r + 1) * n];
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::L2NormalizeRows { x, norms },
            &[x],
        ))
    }

    /// Row-wise inner products of two m×n matrices, giving a length-m vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2("row_dot")?;
        if ta.shape != tb.shape {
            return Err(shape_err("row_dot", ta, tb));
        }
        let data = (0..m)
            .map(|r| {
                ta.data[r * n..(r + 1) * n]
                    .iter()
                    .zip(&tb.data[r * n..(r + 1) * n])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![m],
                data,
            },
            Op::RowDot(a, b),
            &[a, b],
        ))
    }

    /// Reverse pass from a scalar loss. A graph supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Moved out so node values can be read while grads are written.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape[0], self.nodes[a.0].value.shape[1]);
                let n = self.nodes[b.0].value.shape[1];
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data.clone();
                    let ga = self.acc(*a).expect("requires grad");
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    let gb = self.acc(*b).expect("requires grad");
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let aval = av[r * k + p];
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += aval * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].value.shape[0], self.nodes[a.0].value.shape[1]);
                if let Some(ga) = self.acc(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(*v) {
                        for (d, x) in gv.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(*a) {
                    for (d, x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(gb) = self.acc(*bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        for (d, x) in gb.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data.clone();
                    let ga = self.acc(*a).expect("requires grad");
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += x * y;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    let gb = self.acc(*b).expect("requires grad");
                    for ((d, x), y) in gb.iter_mut().zip(g).zip(&av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.acc(*a) {
                    for (d, x) in ga.iter_mut().zip(g) {
                        *d += x * c;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(*a) {
                    for (d, x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.nodes[a.0].requires_grad {
                    let xs = self.nodes[a.0].value.data.clone();
                    let ga = self.acc(*a).expect("requires grad");
                    for ((d, x), gv) in ga.iter_mut().zip(&xs).zip(g) {
                        *d += gv * gelu_grad(*x);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[a.0].requires_grad {
                    let ys = self.nodes[i].value.data.clone();
                    let ga = self.acc(*a).expect("requires grad");
                    for ((d, y), gv) in ga.iter_mut().zip(&ys).zip(g) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.nodes[x.0].requires_grad {
                    let y = self.nodes[i].value.data.clone();
                    let (outer, n, inner) = softmax_dims(&self.nodes[i].value.shape, *axis);
                    let gx = self.acc(*x).expect("requires grad");
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + c;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.nodes[gain.0].value.data.len();
                let rows = xhat.len() / n;
                if let Some(gb) = self.acc(*bias) {
                    for row in g.chunks(n) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if let Some(gg) = self.acc(*gain) {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, v), h) in gg.iter_mut().zip(row).zip(hrow) {
                            *d += v * h;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gain_v = self.nodes[gain.0].value.data.clone();
                    let gx = self.acc(*x).expect("requires grad");
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(&gain_v).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::GatherRows { src, ids } => {
                let n = self.nodes[src.0].value.shape[1];
                if let Some(gs) = self.acc(*src) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in gs[id * n..(id + 1) * n].iter_mut().zip(&g[r * n..]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let n = self.nodes[src.0].value.shape[1];
                let len = self.nodes[i].value.shape[1];
                let start = *start;
                if let Some(gs) = self.acc(*src) {
                    for (r, row) in g.chunks(len).enumerate() {
                        for (d, v) in gs[r * n + start..r * n + start + len].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape[1];
                    if let Some(gp) = self.acc(*p) {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            for (d, v) in dst.iter_mut().zip(&g[r * total + offset..]) {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.data.len();
                    if let Some(gp) = self.acc(*p) {
                        for (d, v) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(ga) = self.acc(*a) {
                    for d in ga.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(*a) {
                    let c = g[0] / ga.len() as f64;
                    for d in ga.iter_mut() {
                        *d += c;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if *count > 0 {
                    let v = self.nodes[logits.0].value.shape[1];
                    let c = g[0] / *count as f64;
                    if let Some(gl) = self.acc(*logits) {
                        for (r, &t) in targets.iter().enumerate() {
                            if t == *ignore_index {
                                continue;
                            }
                            for j in 0..v {
                                let y = if j == t { 1.0 } else { 0.0 };
                                gl[r * v + j] += c * (probs[r * v + j] - y);
                            }
                        }
                    }
                }
            }
            Op::Bce { probs, targets } => {
                if self.nodes[probs.0].requires_grad {
                    let ps = self.nodes[probs.0].value.data.clone();
                    let n = targets.len() as f64;
                    let gp = self.acc(*probs).expect("requires grad");
                    for ((d, &p), &y) in gp.iter_mut().zip(&ps).zip(targets) {
                        if p < PROB_CLIP || p > 1.0 - PROB_CLIP {
                            continue;
                        }
                        *d += g[0] * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.nodes[x.0].requires_grad {
                    let y = self.nodes[i].value.data.clone();
                    let n = self.nodes[i].value.shape[1];
                    let gx = self.acc(*x).expect("requires grad");
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let n = self.nodes[a.0].value.shape[1];
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data.clone();
                    let ga = self.acc(*a).expect("requires grad");
                    for (idx, d) in ga.iter_mut().enumerate() {
                        *d += g[idx / n] * bv[idx];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    let gb = self.acc(*b).expect("requires grad");
                    for (idx, d) in gb.iter_mut().enumerate() {
                        *d += g[idx / n] * av[idx];
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let p = g.matmul(eye, eye).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = g.constant(mat(&[&[1.0], &[1.0]]));
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let p = g.matmul(z, a).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![0.0, libm::log(3.0)]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[0.25, 0.75], 1e-15));

        assert!(matches!(g.softmax(x, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0, 1.0], &[0.0, 1.0]]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layernorm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(mat(&[&[1.0, 3.0]]));
        let y = g.layernorm(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let c = g.constant(mat(&[&[4.0, 4.0]]));
        let y = g.layernorm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let y = g.layernorm(c, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let zero_gain = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::vector(vec![0.3, -0.7]));
        let y = g.layernorm(x, zero_gain, b, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[1, 8]));
        let l = g.cross_entropy(uniform, &[3], usize::MAX).unwrap();
        assert!((g.value(l).item() - libm::log(8.0)).abs() < 1e-12);

        let mut favored = Tensor::zeros(&[1, 8]);
        favored.data_mut()[5] = 20.0;
        let f = g.constant(favored);
        let l = g.cross_entropy(f, &[5], usize::MAX).unwrap();
        assert!(g.value(l).item() < 1e-7);
        assert!((g.value(l).item() - 7.0 * libm::exp(-20.0)).abs() < 1e-15);

        let p = g.param(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(p, &[9, 9], 9).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(Error::BackwardTwice));
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expected = 0.5 * (1.0 + libm::tanh(GELU_SQRT_2_OVER_PI * 1.044_715));
        assert_eq!(gelu(1.0), expected);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-6);
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }
}
