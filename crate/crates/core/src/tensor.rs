//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value: shape plus shared storage. All
//! differentiable arithmetic lives on the tape (see [`crate::autodiff`]);
//! this module only provides construction, indexing and the broadcasting
//! helpers the tape ops are built on.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul: inner dimensions differ ({lhs:?} x {rhs:?})")]
    InnerDim { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("split: extent {extent} along axis {axis} is odd")]
    OddSplit { axis: usize, extent: usize },
    #[error("{op}: input outside the domain ({value})")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("tensor data has {got} elements but shape {shape:?} needs {expected}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("ctc: {labels} labels need at least {required} frames, got {frames}")]
    Inadmissible {
        labels: usize,
        required: usize,
        frames: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected = numel(shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn matrix<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged matrix rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_parts(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} (extent {ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let mut list = f.debug_list();
        list.entries(self.data.iter().take(SHOWN));
        if self.numel() > SHOWN {
            list.entry(&format_args!("... {} more", self.numel() - SHOWN));
        }
        list.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// How an operand `b` is laid over a target shape `a` under trailing-axis
/// broadcasting. `b` may have lower rank (missing leading axes) and any of
/// its axes may have extent 1.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// `b` is a contiguous suffix block repeated over leading axes.
    Tile(usize),
    /// General case: flat index into `b` for every flat index of `a`.
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.len() > a.len() {
            return Err(err());
        }
        let offset = a.len() - b.len();
        for (i, &eb) in b.iter().enumerate() {
            let ea = a[offset + i];
            if eb != ea && eb != 1 {
                return Err(err());
            }
        }
        // Suffix match with no unit-extent stretching inside it: plain tiling.
        let first_mismatch = b
            .iter()
            .enumerate()
            .rposition(|(i, &eb)| eb != a[offset + i]);
        match first_mismatch {
            None => Ok(Broadcast::Tile(numel(b))),
            Some(pos) if b[..=pos].iter().all(|&e| e == 1) => {
                Ok(Broadcast::Tile(numel(&b[pos + 1..])))
            }
            Some(_) => {
                let b_strides = strides(b);
                let mut eff = vec![0usize; a.len()];
                for (i, &eb) in b.iter().enumerate() {
                    if eb != 1 {
                        eff[offset + i] = b_strides[i];
                    }
                }
                let total = numel(a);
                let mut map = Vec::with_capacity(total);
                let mut idx = vec![0usize; a.len()];
                let mut cur = 0usize;
                for _ in 0..total {
                    map.push(cur);
                    for ax in (0..a.len()).rev() {
                        idx[ax] += 1;
                        cur += eff[ax];
                        if idx[ax] < a[ax] {
                            break;
                        }
                        cur -= eff[ax] * idx[ax];
                        idx[ax] = 0;
                    }
                }
                Ok(Broadcast::Map(map))
            }
        }
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Tile(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }

    /// Sum-reduce a gradient laid out over the target shape back onto `b`.
    pub(crate) fn reduce(&self, grad: &[f64], b_numel: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![0.0; b_numel];
                for (i, g) in grad.iter().enumerate() {
                    out[self.index(i)] += g;
                }
                out
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
