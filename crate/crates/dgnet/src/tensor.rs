//! Dense tensors of real scalars with a runtime precision tag.
//!
//! Storage is always `f64`; a tensor tagged [`Precision::Single`] keeps every
//! entry rounded to the nearest `f32` value, and every operation producing
//! single-precision output re-rounds its result. Accumulations (dot products,
//! matrix products, reductions) run in `f64` and round once at the end. This
//! keeps the whole stack monomorphic while preserving the two observable
//! effects of precision: value granularity and serialized width.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scalar width tag carried by every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    /// Machine epsilon of the tagged width.
    pub fn epsilon(self) -> f64 {
        match self {
            Precision::Single => f32::EPSILON as f64,
            Precision::Double => f64::EPSILON,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("division by zero entry at index {0}")]
    DivisionByZero(usize),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("precision mismatch between operands")]
    PrecisionMismatch,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense multi-dimensional array of real scalars.
///
/// The data buffer is shared (`Arc`), so clones are cheap and reshapes are
/// zero-copy. Mutation goes through copy-on-write.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor from raw data, rejecting NaN/Inf entries.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} holds {} entries, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        let data = data.into_iter().map(|x| precision.round(x)).collect();
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            precision,
        })
    }

    /// Internal constructor for op outputs; rounds but trusts finiteness.
    pub(crate) fn from_raw(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if precision == Precision::Single {
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
            precision,
        }
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            precision,
        }
    }

    pub fn ones(shape: &[usize], precision: Precision) -> Self {
        Tensor::filled(shape, 1.0, precision)
    }

    pub fn filled(shape: &[usize], value: f64, precision: Precision) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![precision.round(value); numel]),
            precision,
        }
    }

    /// Rank-0 tensor holding one scalar.
    pub fn scalar(value: f64, precision: Precision) -> Self {
        Tensor::from_raw(vec![], vec![value], precision)
    }

    pub fn vector(data: Vec<f64>, precision: Precision) -> Result<Self> {
        let n = data.len();
        Tensor::from_vec(vec![n], data, precision)
    }

    /// Row-major matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data, precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Copy-on-write mutable access.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Scalar value of a rank-0 or single-entry tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} entries", self.numel());
        self.data[0]
    }

    /// Zero-copy view with a different shape of equal size.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            precision: self.precision,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        if self.precision != other.precision {
            return Err(TensorError::PrecisionMismatch);
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data, self.precision))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        if let Some(i) = other.data.iter().position(|&b| b == 0.0) {
            return Err(TensorError::DivisionByZero(i));
        }
        self.zip(other, |a, b| a / b)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let data = self.data.iter().map(|&x| mul * x + add).collect();
        Tensor::from_raw(self.shape.clone(), data, self.precision)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.affine(c, 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Tensor::from_raw(self.shape.clone(), data, self.precision)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sum(&self) -> f64 {
        self.precision.round(self.data.iter().sum())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        let s = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.precision.round(s))
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    /// `self + c * other`, shape-checked.
    pub fn add_scaled(&self, c: f64, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + c * b)
    }

    /// Entrywise selection: `mask ? a : b`.
    pub fn select(mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.check_same_shape(b)?;
        if mask.len() != a.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "mask length {} vs {} entries",
                mask.len(),
                a.numel()
            )));
        }
        let data = mask
            .iter()
            .zip(a.data.iter().zip(b.data.iter()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        Ok(Tensor::from_raw(a.shape.clone(), data, a.precision))
    }

    /// Matrix product. Accepts `[m,k]×[k,n] → [m,n]` and `[m,k]×[k] → [m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.precision != other.precision {
            return Err(TensorError::PrecisionMismatch);
        }
        let (m, k) = match self.shape.as_slice() {
            [m, k] => (*m, *k),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul lhs must be a matrix, got {:?}",
                    self.shape
                )))
            }
        };
        let (k2, n, vec_rhs) = match other.shape.as_slice() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul rhs must be a matrix or vector, got {:?}",
                    other.shape
                )))
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "inner dimensions {} vs {}",
                k, k2
            )));
        }
        let out = gemm(GemmSide::NN, m, k, n, &self.data, &other.data);
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        Ok(Tensor::from_raw(shape, out, self.precision))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.precision != other.precision {
            return Err(TensorError::PrecisionMismatch);
        }
        let (k, m) = dims2(self, "matmul_tn lhs")?;
        let (k2, n, vec_rhs) = match other.shape.as_slice() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul_tn rhs must be a matrix or vector, got {:?}",
                    other.shape
                )))
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "inner dimensions {} vs {}",
                k, k2
            )));
        }
        let out = gemm(GemmSide::TN, m, k, n, &self.data, &other.data);
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        Ok(Tensor::from_raw(shape, out, self.precision))
    }

    /// `self · otherᵀ`. Vectors are treated as single-column matrices, so
    /// `[m] · [n]ᵀ` is an outer product.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.precision != other.precision {
            return Err(TensorError::PrecisionMismatch);
        }
        let (m, k) = match self.shape.as_slice() {
            [m, k] => (*m, *k),
            [m] => (*m, 1),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul_nt lhs must be a matrix or vector, got {:?}",
                    self.shape
                )))
            }
        };
        let (n, k2) = match other.shape.as_slice() {
            [n, k2] => (*n, *k2),
            [n] => (*n, 1),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul_nt rhs must be a matrix or vector, got {:?}",
                    other.shape
                )))
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "inner dimensions {} vs {}",
                k, k2
            )));
        }
        let out = gemm(GemmSide::NT, m, k, n, &self.data, &other.data);
        Ok(Tensor::from_raw(vec![m, n], out, self.precision))
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(TensorError::ShapeMismatch(format!(
            "{} must be a matrix, got {:?}",
            what, t.shape
        ))),
    }
}

enum GemmSide {
    NN,
    TN,
    NT,
}

/// `C[m,n] = op(A) · op(B)` in row-major layout via `matrixmultiply`.
fn gemm(side: GemmSide, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // Row strides (rs) and column strides (cs) encode the transposes.
    let ((rsa, csa), (rsb, csb)) = match side {
        GemmSide::NN => (((k as isize), 1), ((n as isize), 1)),
        GemmSide::TN => ((1, (m as isize)), ((n as isize), 1)),
        GemmSide::NT => (((k as isize), 1), (1, (k as isize))),
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Periodic cross-correlation of `x: [c_in, fields*len]` with a learnable
/// kernel `[c_out, c_in, k]`. Each of the `fields` length-`len` blocks wraps
/// independently, so batched fields never bleed into each other.
///
/// `out[co, f*len + i] = Σ_{ci,j} kernel[co,ci,j] · x[ci, f*len + wrap(i + j - k/2)]`
pub fn conv1d_periodic(
    kernel: &Tensor,
    x: &Tensor,
    fields: usize,
) -> Result<Tensor> {
    let (c_out, c_in, k) = match kernel.shape() {
        [a, b, c] => (*a, *b, *c),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "conv kernel must be [c_out, c_in, k], got {:?}",
                kernel.shape()
            )))
        }
    };
    if k % 2 == 0 {
        return Err(TensorError::Invalid(format!("kernel size {} must be odd", k)));
    }
    let (ci2, total) = dims2(x, "conv input")?;
    if ci2 != c_in {
        return Err(TensorError::ShapeMismatch(format!(
            "conv input channels {} vs kernel {}",
            ci2, c_in
        )));
    }
    if fields == 0 || total % fields != 0 {
        return Err(TensorError::Invalid(format!(
            "input width {} not divisible into {} fields",
            total, fields
        )));
    }
    let len = total / fields;
    if len < k {
        return Err(TensorError::Invalid(format!(
            "field length {} shorter than kernel {}",
            len, k
        )));
    }
    let half = k / 2;
    let kd = kernel.as_slice();
    let xd = x.as_slice();
    let mut out = vec![0.0; c_out * total];
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * k;
            let xrow = ci * total;
            let orow = co * total;
            for f in 0..fields {
                let off = f * len;
                for i in 0..len {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let src = (i + j + len - half) % len;
                        acc += kd[kbase + j] * xd[xrow + off + src];
                    }
                    out[orow + off + i] += acc;
                }
            }
        }
    }
    Ok(Tensor::from_raw(
        vec![c_out, total],
        out,
        x.precision(),
    ))
}

/// Gradient of [`conv1d_periodic`] with respect to the kernel:
/// `dK[co,ci,j] = Σ_{f,i} g[co, f*len+i] · x[ci, f*len + wrap(i + j - k/2)]`.
pub fn conv1d_periodic_kernel_grad(
    x: &Tensor,
    g: &Tensor,
    k: usize,
    fields: usize,
) -> Result<Tensor> {
    let (c_in, total) = dims2(x, "conv input")?;
    let (c_out, total2) = dims2(g, "conv upstream gradient")?;
    if total != total2 {
        return Err(TensorError::ShapeMismatch(format!(
            "widths {} vs {}",
            total, total2
        )));
    }
    if fields == 0 || total % fields != 0 {
        return Err(TensorError::Invalid("bad field split".into()));
    }
    let len = total / fields;
    let half = k / 2;
    let xd = x.as_slice();
    let gd = g.as_slice();
    let mut out = vec![0.0; c_out * c_in * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * k;
            for f in 0..fields {
                let off = f * len;
                for i in 0..len {
                    let gv = gd[co * total + off + i];
                    if gv == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let src = (i + j + len - half) % len;
                        out[kbase + j] += gv * xd[ci * total + off + src];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c_out, c_in, k], out, x.precision()))
}

/// Swap the channel axes of a conv kernel and reverse its taps:
/// `out[ci,co,j] = kernel[co,ci,k−1−j]`. Applying a conv with the transformed
/// kernel computes the adjoint of the original conv.
pub fn kernel_transpose_flip(kernel: &Tensor) -> Result<Tensor> {
    let (c_out, c_in, k) = match kernel.shape() {
        [a, b, c] => (*a, *b, *c),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel must be rank 3, got {:?}",
                kernel.shape()
            )))
        }
    };
    let kd = kernel.as_slice();
    let mut out = vec![0.0; c_in * c_out * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            for j in 0..k {
                out[(ci * c_out + co) * k + j] = kd[(co * c_in + ci) * k + (k - 1 - j)];
            }
        }
    }
    Ok(Tensor::from_raw(
        vec![c_in, c_out, k],
        out,
        kernel.precision(),
    ))
}

/// Fixed-coefficient periodic stencil along the last axis, per field block.
///
/// With `transposed = false`: `out[i] = Σ_j w[j] · x[wrap(i + j - k/2)]`.
/// With `transposed = true` the adjoint is applied instead. Accepts vectors
/// `[fields*len]` or matrices `[rows, fields*len]` (row-wise application).
pub fn stencil_periodic(
    x: &Tensor,
    weights: &[f64],
    transposed: bool,
    fields: usize,
) -> Result<Tensor> {
    let (rows, total) = match x.shape() {
        [n] => (1usize, *n),
        [r, n] => (*r, *n),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "stencil input must be rank 1 or 2, got {:?}",
                x.shape()
            )))
        }
    };
    let k = weights.len();
    if k % 2 == 0 {
        return Err(TensorError::Invalid(format!("stencil size {} must be odd", k)));
    }
    if fields == 0 || total % fields != 0 {
        return Err(TensorError::Invalid("bad field split".into()));
    }
    let len = total / fields;
    if len < k {
        return Err(TensorError::Invalid(format!(
            "field length {} shorter than stencil {}",
            len, k
        )));
    }
    let half = k / 2;
    let xd = x.as_slice();
    let mut out = vec![0.0; rows * total];
    for r in 0..rows {
        let base = r * total;
        for f in 0..fields {
            let off = base + f * len;
            for i in 0..len {
                let mut acc = 0.0;
                for j in 0..k {
                    // Adjoint gathers from wrap(i - (j - half)).
                    let src = if transposed {
                        (i + len + half - j) % len
                    } else {
                        (i + j + len - half) % len
                    };
                    acc += weights[j] * xd[off + src];
                }
                out[off + i] = acc;
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out, x.precision()))
}
