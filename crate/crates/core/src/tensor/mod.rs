//! Dense tensors and the layer kernels that operate on them.
//!
//! Everything is plain row-major `Vec` storage. The canonical element type is
//! `f32`; `f64` is available through the same generic code path and is used by
//! the gradient-check tests, where finite differences need the extra
//! precision.

mod ops;
mod tape;

pub use ops::{
    batchnorm_forward, conv2d_forward, dense_forward, gaussian_nll, global_avg_pool_forward,
    relu_forward, residual_add, softmax_cross_entropy,
};
pub use tape::{GradTape, Gradients, ValueId};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Element types the kernels accept: `f32` in production, `f64` for
/// verification.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense n-dimensional array in row-major layout.
///
/// The element count always equals the product of the extents; rank-0 tensors
/// hold exactly one element and are used for scalar losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    elems: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, elems: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != elems.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                detail: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    elems.len()
                ),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        Ok(Self { shape, elems })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            elems: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            elems: vec![value; n],
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            elems: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.elems.len()
    }

    pub fn elems(&self) -> &[T] {
        &self.elems
    }

    pub fn elems_mut(&mut self) -> &mut [T] {
        &mut self.elems
    }

    /// The single element of a scalar (or single-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.elems.len(), 1, "item() on non-scalar tensor");
        self.elems[0]
    }

    pub fn is_finite(&self) -> bool {
        self.elems.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            elems: self.elems.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Lossy cast between element types via `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            elems: self
                .elems
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Flat offset of an (n, c, h, w) index into a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.elems[self.idx4(n, c, h, w)]
    }

    /// Squared L2 norm of a contiguous sub-range, accumulated in f64.
    pub(crate) fn sq_norm_range_f64(&self, start: usize, len: usize) -> f64 {
        self.elems[start..start + len]
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum()
    }
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.elems[i]
    }
}

pub(crate) fn check_rank<T: Scalar>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}
