//! Dense row-major tensors and the handful of primitives the rest of the
//! crate is built from.
//!
//! Feature maps are stored channel-major (`C × H × W`); matrices are rank-2
//! tensors with one row per item. Every differentiable primitive has a
//! hand-written backward function next to it.

mod gradcheck;
mod io;
mod linear;
mod ops;
mod sample;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, numerical_gradient, GRAD_CHECK_STEP};
pub use io::{decode as decode_tensor, encode as encode_tensor, read_header, read_tensor, write_tensor, AnyTensor, Mct1Header, MAX_RANK, MCT1_MAGIC};
pub use linear::{LinearGrad, LinearMap};
pub use ops::{
    cosine, cosine_backward, dot, softmax, softmax_backward, softmax_unchecked, EPSILON_NORM,
};
pub use sample::{bilinear_sample, pixel_center, Stencil};

/// Scalar element type. Implemented for `f32` (pipeline runs) and `f64`
/// (gradient checks).
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    const DTYPE: Dtype;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting zero extents, size mismatches and
    /// non-finite scalars.
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::ShapeMismatch {
                expected: vec![],
                actual: dims,
            });
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::LengthMismatch {
                left: n,
                right: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput)?.as_ref().len();
        let mut data = Vec::with_capacity(first * rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != first {
                return Err(Error::LengthMismatch {
                    left: first,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), first], data)
    }

    pub(crate) fn from_raw(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.dims.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.dims.clone(),
            self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        )
    }

    /// Elementwise sum of products with another tensor of the same size.
    pub fn inner(&self, other: &Tensor<T>) -> T {
        dot(&self.data, &other.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    // ---- matrix view (rank 2) ----

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = (self.rows(), self.cols());
        let m = other.cols();
        if other.rows() != k {
            return Err(Error::ShapeMismatch {
                expected: vec![k, m],
                actual: other.dims.clone(),
            });
        }
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a = self.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                for (ov, &bv) in o.iter_mut().zip(other.row(p)) {
                    *ov = *ov + av * bv;
                }
            }
        }
        Ok(Tensor::from_raw(vec![n, m], out))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cols() != other.cols() {
            return Err(Error::ShapeMismatch {
                expected: vec![other.rows(), self.cols()],
                actual: other.dims.clone(),
            });
        }
        let (n, m) = (self.rows(), other.rows());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(dot(self.row(i), other.row(j)));
            }
        }
        Ok(Tensor::from_raw(vec![n, m], out))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rows() != other.rows() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.rows(), other.cols()],
                actual: other.dims.clone(),
            });
        }
        let (k, m) = (self.cols(), other.cols());
        let mut out = vec![T::zero(); k * m];
        for r in 0..self.rows() {
            let a = self.row(r);
            let b = other.row(r);
            for (p, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let o = &mut out[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov = *ov + av * bv;
                }
            }
        }
        Ok(Tensor::from_raw(vec![k, m], out))
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    // ---- feature-map view (rank 3, C × H × W) ----

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[self.rank() - 2]
    }

    pub fn width(&self) -> usize {
        self.dims[self.rank() - 1]
    }

    /// Feature vector at pixel `(i, j)` of a `C × H × W` map.
    pub fn pixel(&self, i: usize, j: usize) -> Vec<T> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        (0..self.channels())
            .map(|c| self.data[c * plane + i * w + j])
            .collect()
    }

    /// Rearranges a `C × H × W` map into an `(H·W) × C` matrix, one row per
    /// pixel in row-major order.
    pub fn pixels_as_rows(&self) -> Tensor<T> {
        let c = self.channels();
        let plane = self.height() * self.width();
        let mut out = Vec::with_capacity(c * plane);
        for p in 0..plane {
            for ch in 0..c {
                out.push(self.data[ch * plane + p]);
            }
        }
        Tensor::from_raw(vec![plane, c], out)
    }

    /// Inverse of [`Tensor::pixels_as_rows`].
    pub fn rows_as_map(rows: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let plane = h * w;
        if rows.rows() != plane {
            return Err(Error::ShapeMismatch {
                expected: vec![plane, rows.cols()],
                actual: rows.dims.clone(),
            });
        }
        let c = rows.cols();
        let mut out = vec![T::zero(); c * plane];
        for p in 0..plane {
            for (ch, &v) in rows.row(p).iter().enumerate() {
                out[ch * plane + p] = v;
            }
        }
        Ok(Tensor::from_raw(vec![c, h, w], out))
    }
}

impl<T: Real> Tensor<T> {
    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }
}
