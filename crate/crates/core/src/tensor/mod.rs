//! Dense `f64` arrays and a dynamically built reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is a topological order and the
//! backward sweep simply walks the node list in reverse.

mod check;
mod graph;

pub use check::{finite_diff_check, gradient_error, probe_loss, probe_weights};
pub use graph::{Backward, ElementwiseKind, Graph, NodeId, NodeKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest element count a tensor may hold.
pub const MAX_ELEMENTS: usize = (1 << 31) - 1;

/// Ordered extents, channels-first for volumes (`C, D, H, W`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape needs at least one dimension"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("extent {pos} of {dims:?} is zero")));
        }
        let mut count: usize = 1;
        for &d in &dims {
            count = count
                .checked_mul(d)
                .filter(|&c| c <= MAX_ELEMENTS)
                .ok_or_else(|| Error::shape(format!("{dims:?} has too many elements")))?;
        }
        Ok(Shape(dims))
    }

    /// Scalar shape `[1]`.
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Splits a rank-4 volume shape into `(C, [D, H, W])`.
    pub fn volume(&self) -> Result<(usize, [usize; 3])> {
        match self.0.as_slice() {
            &[c, d, h, w] => Ok((c, [d, h, w])),
            other => Err(Error::shape(format!("expected a [C, D, H, W] volume, got {other:?}"))),
        }
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Row-major buffer of 64-bit floats with a validated shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of length {} does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn full(shape: Shape, fill: f64) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![fill; n],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!("item() on a tensor of shape {}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(Shape::new(dims)?, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channels `start..start + len` of a volume.
    pub fn channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (c, [d, h, w]) = self.shape.volume()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "channel range {start}..{} out of {c}",
                start + len
            )));
        }
        let plane = d * h * w;
        Tensor::from_vec([len, d, h, w], self.data[start * plane..(start + len) * plane].to_vec())
    }

    /// Channel-axis concatenation of two volumes with equal spatial shape.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (ca, sa) = self.shape.volume()?;
        let (cb, sb) = other.shape.volume()?;
        if sa != sb {
            return Err(Error::shape(format!(
                "cannot concatenate spatial shapes {sa:?} and {sb:?}"
            )));
        }
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec([ca + cb, sa[0], sa[1], sa[2]], data)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
