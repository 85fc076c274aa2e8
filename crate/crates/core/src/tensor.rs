//! Dense n-dimensional f64 tensor values.
//!
//! A [`Tensor`] is a plain value: shape plus row-major data. Gradient
//! tracking is opt-in — a tensor returned by a [`crate::tape::Tape`]
//! operation carries the id of its tape node, an untracked tensor does
//! not. All math lives on the tape; this module only holds the value
//! type, constructors and read access.

use std::sync::Arc;
use thiserror::Error;

/// Identifier of a node on a computation tape.
pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for shape {shape:?}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: domain violation ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: root must be a tracked scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: root tensor is not attached to this tape")]
    UntrackedRoot,
    #[error("{op}: operand belongs to a different or stale tape (node {node})")]
    ForeignNode { op: &'static str, node: NodeId },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense f64 tensor. Shape `[]` is a scalar holding one element.
///
/// Data is shared copy-on-write: clones and tape handles alias one
/// allocation, and in-place gradient accumulation only copies when a
/// buffer is actually shared.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || numel(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "new",
                shape,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    /// Internal constructor without the finiteness check; gradient
    /// buffers use it so a non-finite gradient surfaces as a named
    /// optimizer error instead of a panic here.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel(shape)]),
            node: None,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data: Arc::new(data),
            node: None,
        }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// Handle to the same data with tracking stripped; cheap.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarRoot {
                shape: self.shape.clone(),
            })
        }
    }

    /// Element at a 2-D position. Panics on rank != 2 in debug builds.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Row `r` of a 2-D tensor as a slice.
    pub fn row_slice(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.ndim(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Maximum absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
