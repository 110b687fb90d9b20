//! Dense row-major tensors.
//!
//! Storage is generic over [`Element`] so the same engine runs in `f32` for
//! training and in `f64` for finite-difference checking. Every reduction
//! accumulates in `f64` in ascending flat-index order and rounds once, which
//! makes results bit-identical across runs and thread counts.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Scalar type a [`Tensor`] can hold.
pub trait Element:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + Add<Output = Self>
    + AddAssign
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Element + Serialize + serde::de::DeserializeOwned")]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

/// Product of a shape's extents, `None` on overflow.
pub fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("shape {shape:?} has a zero extent"));
        }
        let numel = checked_numel(&shape).ok_or_else(|| shape_err!("shape {shape:?} overflows"))?;
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics if any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive: {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if checked_numel(shape) != Some(self.data.len()) || shape.contains(&0) {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Square root of the sum of squares, accumulated in `f64`.
    pub fn frobenius_norm(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(invalid!("norm of an empty tensor"));
        }
        Ok(sum_squares(&self.data).sqrt())
    }

    /// Arithmetic mean over every axis except the last `kept_trailing_axes`.
    ///
    /// For a `(C_out, C_in, K, K)` weight with `kept_trailing_axes = 2` this
    /// is the mean `K x K` kernel.
    pub fn mean_over_leading_axes(&self, kept_trailing_axes: usize) -> Result<Self> {
        if kept_trailing_axes >= self.rank() {
            return Err(invalid!(
                "cannot keep {kept_trailing_axes} trailing axes of a rank-{} tensor",
                self.rank()
            ));
        }
        let split = self.rank() - kept_trailing_axes;
        let out_shape = if kept_trailing_axes == 0 {
            vec![1]
        } else {
            self.shape[split..].to_vec()
        };
        let inner: usize = self.shape[split..].iter().product();
        let outer: usize = self.shape[..split].iter().product();
        let mut acc = vec![0f64; inner];
        for row in self.data.chunks_exact(inner) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.to_f64();
            }
        }
        let data: Vec<T> = acc.iter().map(|a| T::from_f64(a / outer as f64)).collect();
        finite_or_err(Self {
            shape: out_shape,
            data,
        }, "mean")
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        finite_or_err(
            Self {
                shape: self.shape.clone(),
                data: self.data.iter().map(|&v| v * c).collect(),
            },
            "scale",
        )
    }

    /// 2-D matrix product with `f64` accumulation along the inner axis.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(shape_err!(
                "matmul needs two matrices, got {:?} and {:?}",
                self.shape,
                other.shape
            ));
        };
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = 0f64;
                for (p, a) in row.iter().enumerate() {
                    acc += a.to_f64() * other.data[p * n + j].to_f64();
                }
                data.push(T::from_f64(acc));
            }
        }
        finite_or_err(
            Self {
                shape: vec![m, n],
                data,
            },
            "matmul",
        )
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{op}: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite_or_err(
            Self {
                shape: self.shape.clone(),
                data,
            },
            op,
        )
    }
}

fn finite_or_err<T: Element>(t: Tensor<T>, op: &str) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(format!("{op} produced a non-finite element")))
    }
}

/// Sum of squares in ascending index order, accumulated in `f64`.
pub fn sum_squares<T: Element>(values: &[T]) -> f64 {
    values.iter().fold(0f64, |acc, v| {
        let x = v.to_f64();
        acc + x * x
    })
}
