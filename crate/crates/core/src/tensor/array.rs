use std::sync::Arc;

use super::{Scalar, TensorError};

/// Dense row-major array with shared, copy-on-write storage.
///
/// Cloning is cheap: clones share the underlying buffer until one of them
/// is written through [`Tensor::data_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: Arc::new(vec![value]) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self { shape, data: Arc::new(vec![value; n]) })
    }

    pub fn from_fn(
        shape: impl Into<Vec<usize>>,
        mut f: impl FnMut(usize) -> T,
    ) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Ok(Self { shape, data: Arc::new(data) })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; detaches from any clone sharing the buffer.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    /// Same buffer viewed with another shape of equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Identity of the storage buffer, used to bind parameters on a tape.
    pub(crate) fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    /// Extent of the leading axis (the "row" count of a row-major matrix view).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (off-tape) matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k, n) = super::kernels::matmul_dims(&self.shape, &rhs.shape)?;
        let mut out = vec![T::zero(); m * n];
        super::kernels::gemm_nn(m, k, n, self.data(), rhs.data(), &mut out);
        Tensor::new(vec![m, n], out)
    }

    /// Mean over the leading axis: `[n, rest..] -> [rest..]`.
    pub fn mean_rows(&self) -> Result<Tensor<T>, TensorError> {
        if self.rank() < 2 {
            return Err(TensorError::AxisOutOfRange { axis: 0, rank: self.rank() });
        }
        let w = self.row_len();
        let mut acc = vec![T::zero(); w];
        for r in 0..self.rows() {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a = *a + v;
            }
        }
        let inv = T::one() / T::from_f64(self.rows() as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
        Tensor::new(self.shape[1..].to_vec(), acc)
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.contains(&0) {
        return Err(TensorError::EmptyExtent { shape: shape.to_vec() });
    }
    Ok(())
}
