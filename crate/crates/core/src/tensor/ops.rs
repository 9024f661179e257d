//! Forward definitions of the differentiable operators.

use super::tape::Op;
use super::{axis_dims, Real, Tensor, Var};
use crate::error::{Error, Result};

fn same_tape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::invalid(op, "operands live on different tapes"))
    }
}

/// Output spatial size of a valid (unpadded) convolution along one axis.
pub(crate) fn valid_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel >= 1 && stride >= 1 && input >= kernel).then(|| (input - kernel) / stride + 1)
}

/// Unfolds `x` (`[c, h, w]`) into the `[c*kh*kw, oh*ow]` patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), c * h * w);
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * kh * kw * p];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for y in 0..oh {
                    let src = &x[(ci * h + y * sh + i) * w..][..w];
                    let out = &mut dst[y * ow..(y + 1) * ow];
                    if sw == 1 {
                        out.copy_from_slice(&src[j..j + ow]);
                    } else {
                        for (xo, o) in out.iter_mut().enumerate() {
                            *o = src[xo * sw + j];
                        }
                    }
                }
            }
        }
    }
    cols
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        node: Op<T>,
    ) -> Result<Var<'t, T>> {
        same_tape(op, &self, &other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push(out, node, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    fn along(
        self,
        v: Var<'t, T>,
        axis: usize,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize)> {
        same_tape(op, &self, &v)?;
        let (x, vv) = (self.value(), v.value());
        let (outer, n, inner) = axis_dims(op, x.shape(), axis)?;
        if vv.shape() != [n] {
            return Err(Error::Shape {
                op,
                lhs: x.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for (i, &b) in vv.data().iter().enumerate() {
                let start = (o * n + i) * inner;
                for e in &mut data[start..start + inner] {
                    *e = f(*e, b);
                }
            }
        }
        Ok((Tensor::new(x.shape(), data)?, axis))
    }

    /// Adds the vector `v` along `axis` (bias add).
    pub fn add_along(self, v: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let (out, axis) = self.along(v, axis, "add_along", |x, b| x + b)?;
        let node = Op::AddAlong {
            x: self.id,
            v: v.id,
            axis,
        };
        Ok(self.tape.push(out, node, &[self.id, v.id]))
    }

    /// Multiplies by the vector `v` along `axis` (per-channel gain).
    pub fn mul_along(self, v: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let (out, axis) = self.along(v, axis, "mul_along", |x, g| x * g)?;
        let node = Op::MulAlong {
            x: self.id,
            v: v.id,
            axis,
        };
        Ok(self.tape.push(out, node, &[self.id, v.id]))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().map(|&e| e * s).collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        self.tape.push(out, Op::Scale { x: self.id, s }, &[self.id])
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().map(|&e| e + s).collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        self.tape.push(out, Op::AddScalar { x: self.id }, &[self.id])
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    fn matmul_impl(
        self,
        other: Var<'t, T>,
        a_trans: bool,
        b_trans: bool,
        op: &'static str,
    ) -> Result<Var<'t, T>> {
        same_tape(op, &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let shape_err = || Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() != 2 || b.rank() != 2 {
            return Err(shape_err());
        }
        let (m, k) = if a_trans {
            (a.shape()[1], a.shape()[0])
        } else {
            (a.shape()[0], a.shape()[1])
        };
        let (kb, n) = if b_trans {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        if k != kb {
            return Err(shape_err());
        }
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), a.data(), a_trans, b.data(), b_trans, T::zero(), &mut data);
        let out = Tensor::new(&[m, n], data)?;
        let node = Op::MatMul {
            a: self.id,
            b: other.id,
            a_trans,
            b_trans,
            m,
            k,
            n,
        };
        Ok(self.tape.push(out, node, &[self.id, other.id]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, false, "matmul")
    }

    /// `self * other^T` for `[m, k]` and `[n, k]`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, true, "matmul_nt")
    }

    /// `self^T * other` for `[k, m]` and `[k, n]`.
    pub fn matmul_tn(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true, false, "matmul_tn")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        axis_dims("concat", &base, axis)?;
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            same_tape("concat", first, p)?;
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_dims("concat", &shape, axis)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(&shape, data)?;
        let node = Op::Concat {
            inputs: ids.clone(),
            axis,
        };
        Ok(first.tape.push(out, node, &ids))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = axis_dims("narrow", x.shape(), axis)?;
        if start + len > n {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis length {n}", start + len),
            ));
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        let node = Op::Narrow {
            x: self.id,
            axis,
            start,
        };
        Ok(self.tape.push(out, node, &[self.id]))
    }

    /// Splits into `parts` equal slices along `axis`.
    pub fn split(self, axis: usize, parts: usize) -> Result<Vec<Var<'t, T>>> {
        let shape = self.shape();
        let (_, n, _) = axis_dims("split", &shape, axis)?;
        if parts == 0 || n % parts != 0 {
            return Err(Error::invalid(
                "split",
                format!("axis length {n} is not divisible into {parts} parts"),
            ));
        }
        let len = n / parts;
        (0..parts).map(|p| self.narrow(axis, p * len, len)).collect()
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = axis_dims("softmax", x.shape(), axis)?;
        let mut data = x.data().to_vec();
        if inner == 1 {
            for row in data.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    sum = sum + *e;
                }
                let inv = sum.recip();
                for e in row.iter_mut() {
                    *e = *e * inv;
                }
            }
        } else {
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let max = (0..n).map(|i| data[idx(i)]).fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for i in 0..n {
                        let e = (data[idx(i)] - max).exp();
                        data[idx(i)] = e;
                        sum = sum + e;
                    }
                    for i in 0..n {
                        data[idx(i)] = data[idx(i)] / sum;
                    }
                }
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.tape.push(out, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().map(|&e| e.max(T::zero())).collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        self.tape.push(out, Op::Relu { x: self.id }, &[self.id])
    }

    /// Normalizes to zero mean and unit variance along `axis`, without affine
    /// parameters.
    pub fn layer_norm(self, axis: usize, eps: T) -> Result<Var<'t, T>> {
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let x = self.value();
        let (outer, n, inner) = axis_dims("layer_norm", x.shape(), axis)?;
        let mut data = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        let nf = T::from_usize(n).unwrap();
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + r;
                // Shifted by the first element so constant inputs give an exact mean.
                let pivot = data[idx(0)];
                let mean = pivot + (0..n).fold(T::zero(), |s, i| s + (data[idx(i)] - pivot)) / nf;
                let var = (0..n).fold(T::zero(), |s, i| {
                    let d = data[idx(i)] - mean;
                    s + d * d
                }) / nf;
                let inv = (var + eps).sqrt().recip();
                for i in 0..n {
                    data[idx(i)] = (data[idx(i)] - mean) * inv;
                }
                inv_std.push(inv);
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        let node = Op::LayerNorm {
            x: self.id,
            axis,
            inv_std,
        };
        Ok(self.tape.push(out, node, &[self.id]))
    }

    /// Valid (unpadded) 2-D convolution of a `[c_in, h, w]` input with a
    /// `[c_out, c_in, kh, kw]` kernel.
    pub fn conv2d_valid(
        self,
        kernel: Var<'t, T>,
        stride_h: usize,
        stride_w: usize,
    ) -> Result<Var<'t, T>> {
        same_tape("conv2d_valid", &self, &kernel)?;
        let (x, k) = (self.value(), kernel.value());
        let shape_err = || Error::Shape {
            op: "conv2d_valid",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        };
        if x.rank() != 3 || k.rank() != 4 || x.shape()[0] != k.shape()[1] {
            return Err(shape_err());
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = valid_len(h, kh, stride_h).ok_or_else(shape_err)?;
        let ow = valid_len(w, kw, stride_w).ok_or_else(shape_err)?;
        let cols = im2col(x.data(), c, h, w, kh, kw, stride_h, stride_w, oh, ow);
        let kdim = c * kh * kw;
        let p = oh * ow;
        let mut data = vec![T::zero(); co * p];
        T::gemm(co, kdim, p, T::one(), k.data(), false, &cols, false, T::zero(), &mut data);
        let out = Tensor::new(&[co, oh, ow], data)?;
        let node = Op::Conv2d {
            x: self.id,
            w: kernel.id,
            stride_h,
            stride_w,
        };
        Ok(self.tape.push(out, node, &[self.id, kernel.id]))
    }

    fn reduce(self, axis: usize, op: &'static str, scale: T) -> Result<Tensor<T>> {
        let x = self.value();
        let (outer, n, inner) = axis_dims(op, x.shape(), axis)?;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for i in 0..n {
                let src = &x.data()[(o * n + i) * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * scale;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Tensor::new(&shape, data)
    }

    /// Sum over `axis`, removing it.
    pub fn sum(self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.reduce(axis, "sum", T::one())?;
        Ok(self.tape.push(out, Op::Sum { x: self.id, axis }, &[self.id]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1);
        let out = self.reduce(axis, "mean", T::from_usize(n).unwrap().recip())?;
        Ok(self.tape.push(out, Op::Mean { x: self.id, axis }, &[self.id]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let s = x.data().iter().fold(T::zero(), |a, &b| a + b);
        self.tape.push(Tensor::scalar(s), Op::SumAll { x: self.id }, &[self.id])
    }

    /// `x / sqrt(sum(x^2) + eps)` along `axis`.
    pub fn l2_normalize(self, axis: usize, eps: T) -> Result<Var<'t, T>> {
        if eps <= T::zero() {
            return Err(Error::invalid("l2_normalize", "eps must be positive"));
        }
        let x = self.value();
        let (outer, n, inner) = axis_dims("l2_normalize", x.shape(), axis)?;
        let mut data = x.data().to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + r;
                let ss = (0..n).fold(T::zero(), |s, i| s + data[idx(i)] * data[idx(i)]);
                let norm = (ss + eps).sqrt();
                for i in 0..n {
                    data[idx(i)] = data[idx(i)] / norm;
                }
                norms.push(norm);
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        let node = Op::L2Normalize {
            x: self.id,
            axis,
            norms,
        };
        Ok(self.tape.push(out, node, &[self.id]))
    }

    /// Transpose of a matrix.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected a matrix, got shape {:?}", x.shape()),
            ));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], data)?;
        Ok(self.tape.push(out, Op::Transpose { x: self.id }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = Tensor::clone(&x).reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Maximum along `axis`, removing it. Ties resolve to the lowest index.
    pub fn max(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = axis_dims("max", x.shape(), axis)?;
        if n == 0 {
            return Err(Error::invalid("max", "empty axis"));
        }
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for r in 0..inner {
                let mut best = 0;
                let mut best_v = x.data()[o * n * inner + r];
                for i in 1..n {
                    let v = x.data()[(o * n + i) * inner + r];
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        let node = Op::Max {
            x: self.id,
            axis,
            argmax,
        };
        Ok(self.tape.push(out, node, &[self.id]))
    }

    /// Squared Euclidean distance between two equally shaped variables.
    pub fn squared_distance(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.sub(other)?;
        Ok(d.mul(d)?.sum_all())
    }
}
