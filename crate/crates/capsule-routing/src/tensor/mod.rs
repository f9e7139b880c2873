//! Dense n-dimensional arrays with reverse-mode automatic differentiation.
//!
//! Storage is always dense row-major. Two precisions are supported through
//! the [`Scalar`] trait: `f32` for training and `f64` for verification
//! (finite-difference checks are unreliable at 32 bits).

pub mod gradcheck;
pub mod params;
pub mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Element type for tensors: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype tag used in checkpoint manifests.
    const DTYPE: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("convertible")
    }

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    /// Bytes per element in checkpoint blobs.
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument {
                what: format!(
                    "tensor shape {:?} implies {} values, got {}",
                    shape,
                    n,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 4x4 identity, flattened row-major.
    pub fn eye4() -> Self {
        let mut t = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            t.data[i * 4 + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert precision (used by verification tooling).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64c())).collect(),
        }
    }
}

/// Decompose a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
}

pub(crate) fn matmul_new<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// out[n,m] = a[m,n] transposed
pub(crate) fn transpose2<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Frobenius norm of all elements: sqrt(sum x^2).
pub fn frobenius_norm<T: Scalar>(t: &Tensor<T>) -> T {
    t.data()
        .iter()
        .map(|&x| x * x)
        .fold(T::zero(), |a, b| a + b)
        .sqrt()
}

/// Squared L2 norm of all elements.
pub fn sq_norm<T: Scalar>(t: &Tensor<T>) -> T {
    t.data()
        .iter()
        .map(|&x| x * x)
        .fold(T::zero(), |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn frobenius_of_ones_4x4_is_4() {
        let t = Tensor::<f64>::ones(&[4, 4]);
        assert!((frobenius_norm(&t) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.clone().reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.clone().reshaped(vec![4, 2]).is_err());
    }
}
