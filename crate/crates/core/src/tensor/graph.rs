//! Define-by-run reverse-mode graph.
//!
//! Nodes live in an arena in creation order, which is also a topological
//! order: every op references only earlier ids. `backward` walks the arena in
//! reverse from the loss node, visiting each node at most once and
//! accumulating (`+=`) into input gradients, so reusing a tensor is safe.
//!
//! The graph also counts multiply-accumulates as it executes. Only matmuls
//! count (one MAC per scalar multiply-add); gathers, normalizations and
//! activations contribute zero. The analytical cost model follows the same
//! convention, and the two are required to agree exactly.

use super::kernels;
use super::{for_each_lane, Precision, Tensor};
use crate::error::TensorError;

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_COEF: f64 = 0.044715;
const L2_NORM_FLOOR: f64 = 1e-12;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    ScaleBy { a: usize, s: usize },
    Exp { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Gelu { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    LayerNorm { a: usize, eps: f64 },
    L2Normalize { a: usize, axis: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    GatherRows { a: usize, indices: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    StackRows { parts: Vec<usize> },
    MeanRows { a: usize },
    Sum { a: usize },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Arena of recorded operations plus the values flowing through them.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    macs: u64,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            macs: 0,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Multiply-accumulates executed so far (forward and backward matmuls).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Tracking is taken from the tensor itself.
    pub fn leaf(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.clear_grad();
        tensor.quantize(self.precision);
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        NodeId(id)
    }

    /// Untracked leaf from raw parts.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId, TensorError> {
        Ok(self.leaf(Tensor::from_vec(shape, data)?))
    }

    pub fn scalar_input(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.precision.quantize_slice(&mut data);
        let mut tensor = Tensor::from_vec(shape, data).expect("internal shape/data mismatch");
        if requires_grad {
            tensor = tensor.tracked();
        }
        let id = self.nodes.len();
        self.nodes.push(Node { tensor, op });
        NodeId(id)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    fn rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), m, ka, n, &mut out);
        self.macs += (m * ka * n) as u64;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0, m, k: ka, n }, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a: a.0, b: b.0 }, req))
    }

    /// `[n,d] + [d]` (or `[1,d]`): bias broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rank2(a, "add_bias")?;
        let bshape = self.shape(bias);
        let blen: usize = bshape.iter().product();
        if blen != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let bdata = self.data(bias);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data(a).chunks(cols) {
            out.extend(row.iter().zip(bdata).map(|(x, y)| x + y));
        }
        let req = self.requires(a) || self.requires(bias);
        Ok(self.push(vec![rows, cols], out, Op::AddBias { a: a.0, bias: bias.0 }, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub { a: a.0, b: b.0 }, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a: a.0, b: b.0 }, req))
    }

    /// Elementwise multiply by a row vector: `[n,d] ⊙ [d]` broadcast over rows.
    pub fn mul_rows(&mut self, a: NodeId, scale: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rank2(a, "mul_rows")?;
        let slen: usize = self.shape(scale).iter().product();
        if slen != cols {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        // tile the row vector, keeping the gather differentiable so a tracked
        // scale still receives its summed-over-rows gradient
        if self.requires(scale) {
            let reshaped = self.reshape(scale, vec![1, cols])?;
            let tiled = self.gather_rows(reshaped, &vec![0; rows])?;
            return self.mul(a, tiled);
        }
        let sdata = self.data(scale).to_vec();
        let mut expanded = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            expanded.extend_from_slice(&sdata);
        }
        let expanded = self.input(vec![rows, cols], expanded)?;
        self.mul(a, expanded)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddScalar { a: a.0 }, req))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulScalar { a: a.0, c }, req))
    }

    /// Multiply every element of `a` by the scalar node `s` (shape `[1]`).
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::BadRank {
                op: "scale_by",
                expected: 1,
                shape: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let req = self.requires(a) || self.requires(s);
        Ok(self.push(self.shape(a).to_vec(), data, Op::ScaleBy { a: a.0, s: s.0 }, req))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Exp { a: a.0 }, req))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Clamp { a: a.0, lo, hi }, req))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh()))
            .collect();
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Gelu { a: a.0 }, req))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |lane| {
            let idx: Vec<usize> = lane.collect();
            let max = idx.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in &idx {
                let e = (src[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for &i in &idx {
                out[i] /= sum;
            }
        });
        let req = self.requires(a);
        Ok(self.push(shape, out, Op::Softmax { a: a.0, axis }, req))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |lane| {
            let idx: Vec<usize> = lane.collect();
            let max = idx.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = idx.iter().map(|&i| (src[i] - max).exp()).sum::<f64>().ln() + max;
            for &i in &idx {
                out[i] = src[i] - lse;
            }
        });
        let req = self.requires(a);
        Ok(self.push(shape, out, Op::LogSoftmax { a: a.0, axis }, req))
    }

    /// Normalize each lane along the last axis to mean 0, variance 1.
    pub fn layernorm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidEps(eps));
        }
        let shape = self.shape(a).to_vec();
        let axis = shape.len() - 1;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |lane| {
            let idx: Vec<usize> = lane.collect();
            let d = idx.len() as f64;
            let mean = idx.iter().map(|&i| src[i]).sum::<f64>() / d;
            let var = idx.iter().map(|&i| (src[i] - mean).powi(2)).sum::<f64>() / d;
            let denom = (var + eps).sqrt();
            for &i in &idx {
                out[i] = (src[i] - mean) / denom;
            }
        });
        let req = self.requires(a);
        Ok(self.push(shape, out, Op::LayerNorm { a: a.0, eps }, req))
    }

    /// Divide each lane along `axis` by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |lane| {
            let idx: Vec<usize> = lane.collect();
            let norm = idx.iter().map(|&i| src[i] * src[i]).sum::<f64>().sqrt();
            let denom = norm.max(L2_NORM_FLOOR);
            for &i in &idx {
                out[i] = src[i] / denom;
            }
        });
        let req = self.requires(a);
        Ok(self.push(shape, out, Op::L2Normalize { a: a.0, axis }, req))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.rank2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let req = self.requires(a);
        Ok(self.push(vec![n, m], out, Op::Transpose { a: a.0 }, req))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::BadReshape {
                from: self.shape(a).to_vec(),
                from_len: self.value(a).numel(),
                to: new_shape,
                to_len: numel,
            });
        }
        let data = self.data(a).to_vec();
        let req = self.requires(a);
        Ok(self.push(new_shape, data, Op::Reshape { a: a.0 }, req))
    }

    /// Select rows of a `[n,d]` tensor by index, in the order given.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rank2(a, "gather_rows")?;
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    extent: rows,
                });
            }
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let req = self.requires(a);
        Ok(self.push(
            vec![indices.len(), cols],
            out,
            Op::GatherRows {
                a: a.0,
                indices: indices.to_vec(),
            },
            req,
        ))
    }

    /// Contiguous row range `[start, start+len)`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rank2(a, "slice_rows")?;
        if start + len > rows {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                extent: rows,
            });
        }
        let data = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let req = self.requires(a);
        Ok(self.push(vec![len, cols], data, Op::SliceRows { a: a.0, start }, req))
    }

    /// Contiguous column range `[start, start+len)`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rank2(a, "slice_cols")?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                extent: cols,
            });
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let req = self.requires(a);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a: a.0, start }, req))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols on empty list");
        let (rows, _) = self.rank2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, w) = self.rank2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(w);
            total += w;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.data(p);
                out.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            req,
        ))
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "stack_rows on empty list");
        let (_, cols) = self.rank2(parts[0], "stack_rows")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "stack_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            vec![total, cols],
            out,
            Op::StackRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            req,
        ))
    }

    /// Mean over rows: `[n,d] -> [1,d]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rank2(a, "mean_rows")?;
        let src = self.data(a);
        let mut out = vec![0.0; cols];
        for row in src.chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        let req = self.requires(a);
        Ok(self.push(vec![1, cols], out, Op::MeanRows { a: a.0 }, req))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let total: f64 = self.data(a).iter().sum();
        let req = self.requires(a);
        Ok(self.push(vec![1], vec![total], Op::Sum { a: a.0 }, req))
    }

    fn check_axis(&self, a: NodeId, axis: usize) -> Result<(), TensorError> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        Ok(())
    }

    // ---- backward ----

    /// Reverse pass from `loss` (must be scalar). Accumulates gradients into
    /// every tracked node reachable from it; tracked leaves that do not
    /// influence the loss end up with an explicit zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::ContractViolation(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.nodes[loss.0].tensor.requires_grad() {
            self.nodes[loss.0].tensor.set_grad(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &mut right[0];
            if !node.tensor.requires_grad() || node.tensor.grad().is_none() {
                continue;
            }
            // the gradient is final here: all consumers have higher ids
            if self.precision == Precision::F32 {
                if let Some(g) = node.tensor.grad.as_deref_mut() {
                    Precision::F32.quantize_slice(g);
                }
            }
            let macs = apply_backward(node, left);
            self.macs += macs;
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf)
                && node.tensor.requires_grad()
                && node.tensor.grad().is_none()
            {
                node.tensor.set_grad(vec![0.0; node.tensor.numel()]);
            }
        }
        Ok(())
    }

    /// Drop all recorded gradients (e.g. before reusing leaves elsewhere).
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.clear_grad();
        }
    }
}

fn add_grad(nodes: &mut [Node], id: usize, contrib: &[f64]) {
    let tensor = &mut nodes[id].tensor;
    if !tensor.requires_grad() {
        return;
    }
    match tensor.grad.as_deref_mut() {
        Some(g) => {
            for (gi, &c) in g.iter_mut().zip(contrib) {
                *gi += c;
            }
        }
        None => tensor.set_grad(contrib.to_vec()),
    }
}

/// Apply one node's backward rule, accumulating into `earlier` (all ids < the
/// node's id). Returns multiply-accumulates spent on backward matmuls.
fn apply_backward(node: &Node, earlier: &mut [Node]) -> u64 {
    let grad = node.tensor.grad().expect("checked by caller");
    let out_data = node.tensor.data();
    let mut macs = 0u64;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n } => {
            if earlier[*a].tensor.requires_grad() {
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt(grad, earlier[*b].tensor.data(), *m, *n, *k, &mut da);
                macs += (m * n * k) as u64;
                add_grad(earlier, *a, &da);
            }
            if earlier[*b].tensor.requires_grad() {
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn(earlier[*a].tensor.data(), grad, *m, *k, *n, &mut db);
                macs += (m * k * n) as u64;
                add_grad(earlier, *b, &db);
            }
        }
        Op::Add { a, b } => {
            add_grad(earlier, *a, grad);
            add_grad(earlier, *b, grad);
        }
        Op::AddBias { a, bias } => {
            add_grad(earlier, *a, grad);
            if earlier[*bias].tensor.requires_grad() {
                let cols = earlier[*bias].tensor.numel();
                let mut db = vec![0.0; cols];
                for row in grad.chunks(cols) {
                    for (o, &g) in db.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                add_grad(earlier, *bias, &db);
            }
        }
        Op::Sub { a, b } => {
            add_grad(earlier, *a, grad);
            if earlier[*b].tensor.requires_grad() {
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                add_grad(earlier, *b, &neg);
            }
        }
        Op::Mul { a, b } => {
            if earlier[*a].tensor.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(earlier[*b].tensor.data())
                    .map(|(g, y)| g * y)
                    .collect();
                add_grad(earlier, *a, &da);
            }
            if earlier[*b].tensor.requires_grad() {
                let db: Vec<f64> = grad
                    .iter()
                    .zip(earlier[*a].tensor.data())
                    .map(|(g, x)| g * x)
                    .collect();
                add_grad(earlier, *b, &db);
            }
        }
        Op::AddScalar { a } => add_grad(earlier, *a, grad),
        Op::MulScalar { a, c } => {
            if earlier[*a].tensor.requires_grad() {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                add_grad(earlier, *a, &da);
            }
        }
        Op::ScaleBy { a, s } => {
            let sv = earlier[*s].tensor.data()[0];
            if earlier[*a].tensor.requires_grad() {
                let da: Vec<f64> = grad.iter().map(|g| g * sv).collect();
                add_grad(earlier, *a, &da);
            }
            if earlier[*s].tensor.requires_grad() {
                let ds: f64 = grad
                    .iter()
                    .zip(earlier[*a].tensor.data())
                    .map(|(g, x)| g * x)
                    .sum();
                add_grad(earlier, *s, &[ds]);
            }
        }
        Op::Exp { a } => {
            if earlier[*a].tensor.requires_grad() {
                let da: Vec<f64> = grad.iter().zip(out_data).map(|(g, y)| g * y).collect();
                add_grad(earlier, *a, &da);
            }
        }
        Op::Clamp { a, lo, hi } => {
            if earlier[*a].tensor.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(earlier[*a].tensor.data())
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                add_grad(earlier, *a, &da);
            }
        }
        Op::Gelu { a } => {
            if earlier[*a].tensor.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(earlier[*a].tensor.data())
                    .map(|(g, &x)| {
                        let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                add_grad(earlier, *a, &da);
            }
        }
        Op::Softmax { a, axis } => {
            if earlier[*a].tensor.requires_grad() {
                let shape = node.tensor.shape().to_vec();
                let mut da = vec![0.0; grad.len()];
                for_each_lane(&shape, *axis, |lane| {
                    let idx: Vec<usize> = lane.collect();
                    let dot: f64 = idx.iter().map(|&i| grad[i] * out_data[i]).sum();
                    for &i in &idx {
                        da[i] = out_data[i] * (grad[i] - dot);
                    }
                });
                add_grad(earlier, *a, &da);
            }
        }
        Op::LogSoftmax { a, axis } => {
            if earlier[*a].tensor.requires_grad() {
                let shape = node.tensor.shape().to_vec();
                let mut da = vec![0.0; grad.len()];
                for_each_lane(&shape, *axis, |lane| {
                    let idx: Vec<usize> = lane.collect();
                    let gsum: f64 = idx.iter().map(|&i| grad[i]).sum();
                    for &i in &idx {
                        da[i] = grad[i] - out_data[i].exp() * gsum;
                    }
                });
                add_grad(earlier, *a, &da);
            }
        }
        Op::LayerNorm { a, eps } => {
            if earlier[*a].tensor.requires_grad() {
                let shape = node.tensor.shape().to_vec();
                let axis = shape.len() - 1;
                let src = earlier[*a].tensor.data();
                let mut da = vec![0.0; grad.len()];
                for_each_lane(&shape, axis, |lane| {
                    let idx: Vec<usize> = lane.collect();
                    let d = idx.len() as f64;
                    let mean = idx.iter().map(|&i| src[i]).sum::<f64>() / d;
                    let var = idx.iter().map(|&i| (src[i] - mean).powi(2)).sum::<f64>() / d;
                    let denom = (var + eps).sqrt();
                    let m1: f64 = idx.iter().map(|&i| grad[i]).sum::<f64>() / d;
                    let m2: f64 = idx.iter().map(|&i| grad[i] * out_data[i]).sum::<f64>() / d;
                    for &i in &idx {
                        da[i] = (grad[i] - m1 - out_data[i] * m2) / denom;
                    }
                });
                add_grad(earlier, *a, &da);
            }
        }
        Op::L2Normalize { a, axis } => {
            if earlier[*a].tensor.requires_grad() {
                let shape = node.tensor.shape().to_vec();
                let src = earlier[*a].tensor.data();
                let mut da = vec![0.0; grad.len()];
                for_each_lane(&shape, *axis, |lane| {
                    let idx: Vec<usize> = lane.collect();
                    let norm = idx.iter().map(|&i| src[i] * src[i]).sum::<f64>().sqrt();
                    let denom = norm.max(L2_NORM_FLOOR);
                    if norm > L2_NORM_FLOOR {
                        let dot: f64 = idx.iter().map(|&i| grad[i] * out_data[i]).sum();
                        for &i in &idx {
                            da[i] = (grad[i] - out_data[i] * dot) / denom;
                        }
                    } else {
                        // norm clipped to the floor: denominator is constant
                        for &i in &idx {
                            da[i] = grad[i] / denom;
                        }
                    }
                });
                add_grad(earlier, *a, &da);
            }
        }
        Op::Transpose { a } => {
            if earlier[*a].tensor.requires_grad() {
                let out_shape = node.tensor.shape();
                let (n, m) = (out_shape[0], out_shape[1]);
                let mut da = vec![0.0; grad.len()];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = grad[j * m + i];
                    }
                }
                add_grad(earlier, *a, &da);
            }
        }
        Op::Reshape { a } => add_grad(earlier, *a, grad),
        Op::GatherRows { a, indices } => {
            if earlier[*a].tensor.requires_grad() {
                let cols = node.tensor.shape()[1];
                let mut da = vec![0.0; earlier[*a].tensor.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        da[i * cols + c] += grad[r * cols + c];
                    }
                }
                add_grad(earlier, *a, &da);
            }
        }
        Op::SliceRows { a, start } => {
            if earlier[*a].tensor.requires_grad() {
                let cols = node.tensor.shape()[1];
                let mut da = vec![0.0; earlier[*a].tensor.numel()];
                da[start * cols..start * cols + grad.len()].copy_from_slice(grad);
                add_grad(earlier, *a, &da);
            }
        }
        Op::SliceCols { a, start } => {
            if earlier[*a].tensor.requires_grad() {
                let rows = node.tensor.shape()[0];
                let len = node.tensor.shape()[1];
                let src_cols = earlier[*a].tensor.shape()[1];
                let mut da = vec![0.0; earlier[*a].tensor.numel()];
                for r in 0..rows {
                    for c in 0..len {
                        da[r * src_cols + start + c] = grad[r * len + c];
                    }
                }
                add_grad(earlier, *a, &da);
            }
        }
        Op::ConcatCols { parts } => {
            let rows = node.tensor.shape()[0];
            let total = node.tensor.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = earlier[p].tensor.shape()[1];
                if earlier[p].tensor.requires_grad() {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    add_grad(earlier, p, &dp);
                }
                offset += w;
            }
        }
        Op::StackRows { parts } => {
            let cols = node.tensor.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let r = earlier[p].tensor.shape()[0];
                if earlier[p].tensor.requires_grad() {
                    add_grad(earlier, p, &grad[offset * cols..(offset + r) * cols]);
                }
                offset += r;
            }
        }
        Op::MeanRows { a } => {
            if earlier[*a].tensor.requires_grad() {
                let rows = earlier[*a].tensor.shape()[0];
                let cols = node.tensor.shape()[1];
                let scale = 1.0 / rows as f64;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = grad[c] * scale;
                    }
                }
                add_grad(earlier, *a, &da);
            }
        }
        Op::Sum { a } => {
            if earlier[*a].tensor.requires_grad() {
                let da = vec![grad[0]; earlier[*a].tensor.numel()];
                add_grad(earlier, *a, &da);
            }
        }
    }
    macs
}
