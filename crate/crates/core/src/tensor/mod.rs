//! Minimal n-dimensional arrays with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major buffer with a shape. Differentiable
//! computation happens on a [`Tape`]: every operation on a [`Var`] appends a
//! node holding its value and enough information to run the vector-Jacobian
//! product later. [`Var::backward`] walks the tape in reverse.
//!
//! The operator set is deliberately small: exactly what the encoder,
//! transformer, NetVLAD head and triplet loss need. Broadcasting is limited
//! to a vector along one axis (bias add, per-channel gain).
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and inference and in `f64` for finite-difference checks.

mod backward;
pub mod checkpoint;
mod ops;
mod tape;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use backward::Gradients;
pub use tape::{Tape, Var};

/// Floating-point element type of tensors.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
    /// `op(b)` is `k x n`, all row-major. `a_trans` means `a` is stored as
    /// `k x m`; `b_trans` means `b` is stored as `n x k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_trans: bool, b_trans: bool) -> [isize; 4] {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

/// `c = alpha * a * op(b) + beta * c` for a single row `a` of length `k`.
#[allow(clippy::too_many_arguments)]
fn gemv<T: Float>(k: usize, n: usize, alpha: T, a: &[T], b: &[T], b_trans: bool, beta: T, c: &mut [T]) {
    let mut acc = vec![T::zero(); n];
    if b_trans {
        for (j, out) in acc.iter_mut().enumerate() {
            let row = &b[j * k..(j + 1) * k];
            *out = a.iter().zip(row).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    } else {
        for (i, &x) in a.iter().enumerate() {
            for (out, &y) in acc.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *out = *out + x * y;
            }
        }
    }
    for (dst, v) in c.iter_mut().zip(acc) {
        // `beta == 0` overwrites, so stale NaNs in `c` do not propagate.
        *dst = if beta == T::zero() { alpha * v } else { alpha * v + beta * *dst };
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if m == 1 {
                    // A packed GEMM would copy all of `b` for a single row.
                    gemv(k, n, alpha, &a[..k], b, b_trans, beta, &mut c[..n]);
                    return;
                }
                let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_trans, b_trans);
                // SAFETY: the slices were checked to cover every element
                // addressed by the strides above.
                unsafe {
                    $gemm(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major n-dimensional array. A scalar has an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-type conversion, used to build `f64` shadows of `f32` models.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` so that the
/// element at `(o, i, r)` lives at `(o * len + i) * inner + r`.
pub(crate) fn axis_dims(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
