//! Dense tensor storage and the reverse-mode graph built on it.
//!
//! Values are held as contiguous `f64` buffers regardless of mode. In 32-bit
//! mode every primitive quantizes its output (and leaf data on entry) to f32,
//! so results track single-precision compute while accumulation inside one
//! primitive stays in f64. The 64-bit mode leaves values untouched and is the
//! one gradient checks run in.

pub mod graph;
pub mod grad_check;
pub mod kernels;

pub use grad_check::max_rel_err;
pub use graph::{Graph, NodeId};

use crate::error::TensorError;

/// Compute precision for a graph and the tensors flowing through it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Quantize values to f32 at operation boundaries (training default).
    #[default]
    F32,
    /// Full f64; used for gradient verification.
    F64,
}

impl Precision {
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn quantize_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Dense n-dimensional float array, optionally tracked for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadReshape {
                from: vec![data.len()],
                from_len: data.len(),
                to: shape,
                to_len: numel,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark this tensor as a gradient-tracked leaf.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer; present only on tracked tensors after a backward pass.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub(crate) fn quantize(&mut self, precision: Precision) {
        precision.quantize_slice(&mut self.data);
    }
}

/// Iterate the lanes of `shape` along `axis`: calls `f` with the flat indices
/// of one lane at a time. A lane is the 1-D slice obtained by fixing all
/// coordinates except `axis`.
pub(crate) fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(&mut dyn Iterator<Item = usize>),
) {
    let lane_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane_len * inner + i;
            let mut it = (0..lane_len).map(move |l| base + l * inner);
            f(&mut it);
        }
    }
}
