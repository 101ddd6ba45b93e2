//! Tensor value type shared by all modules.

use std::fmt;
use std::sync::Arc;

/// Floating-point element type of the tensor core.
///
/// `f64` is the test/gradient-check mode, `f32` the training mode.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Identifies a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape_id: u64,
    pub(crate) index: usize,
}

/// An n-dimensional real array, optionally tracked on a tape for
/// reverse-mode differentiation.
///
/// Values are stored contiguously in row-major order and are immutable after
/// construction; the buffer is shared cheaply via `Arc`.
#[derive(Clone)]
pub struct DiffTensor<F: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<NodeRef>,
}

impl<F: Scalar> DiffTensor<F> {
    /// Builds an untracked (constant) tensor. Panics if the buffer length
    /// does not equal the product of the extents or any extent is zero.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} elements, buffer has {}",
            data.len()
        );
        DiffTensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    /// Constant scalar wrapped as a 1-element tensor.
    pub fn scalar(v: F) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![F::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Arc<Vec<F>>, node: NodeRef) -> Self {
        DiffTensor {
            shape,
            data,
            node: Some(node),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Tape node backing this tensor, if it is tracked.
    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Detached copy: same shape and values, no tape node.
    pub fn detach(&self) -> Self {
        DiffTensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Converts elementwise into another scalar type.
    pub fn cast<T: Scalar>(&self) -> DiffTensor<T> {
        DiffTensor::from_vec(
            &self.shape,
            self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        )
    }
}

impl<F: Scalar> fmt::Debug for DiffTensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffTensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}
