//! Dense row-major tensors and the scalar types they carry.

use num_traits::Float;
use thiserror::Error;

/// Numeric width of a tensor's elements.
///
/// Wide (64-bit) is used for gradient checks and the algebraic oracles,
/// narrow (32-bit) for training-speed runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Wide,
    Narrow,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Wide => write!(f, "wide"),
            Precision::Narrow => write!(f, "narrow"),
        }
    }
}

/// Scalar element type usable throughout the stack.
///
/// Implemented for `f64` (wide) and `f32` (narrow). The `gemm` hook routes
/// matrix products through the `matrixmultiply` kernels.
pub trait Real: Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static {
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C := alpha * A * B + beta * C for row/col-strided operands.
    ///
    /// A is m x k with strides (rsa, csa), B is k x n with (rsb, csb),
    /// C is m x n with (rsc, csc). Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    last as usize + 1
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Wide;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
        assert!(c.len() >= span(m, n, rsc, csc));
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Narrow;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
        assert!(c.len() >= span(m, n, rsc, csc));
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Errors raised by tensor construction and tensor-level operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("sqrt of negative value {value}")]
    SqrtDomain { value: f64 },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("operands recorded on different tapes")]
    TapeMismatch,
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("row {row} has zero norm; a positive radius is required")]
    ZeroNormRow { row: usize },
}

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> DenseTensor<T> {
    /// Builds a tensor from a shape and row-major values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zero-sized tensor shape");
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zero-sized tensor shape");
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `(rows, last_dim)`.
    pub fn row_count(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> T {
        assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of row `r` under the `(rows, last_dim)` view.
    pub fn row_norm(&self, r: usize) -> T {
        let d = self.last_dim();
        self.data[r * d..(r + 1) * d]
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Converts element values to another precision.
    pub fn cast<U: Real>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
