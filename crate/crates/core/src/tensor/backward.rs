//! Reverse sweep over a tape.

use super::ops::{im2col, valid_len};
use super::tape::{Node, Op};
use super::{axis_dims, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to the leaves of its tape.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, if it is a leaf that the loss depends on.
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

struct GradStore<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradStore<T> {
    fn slot(&mut self, id: usize, len: usize) -> &mut [T] {
        self.slots[id].get_or_insert_with(|| vec![T::zero(); len])
    }
}

impl<T: Real> Var<'_, T> {
    /// Back-propagates from this scalar and returns the gradients of all
    /// leaves that require them.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if !self.tape.grad_enabled() || !root.requires_grad {
            return Err(Error::Detached);
        }
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut store = GradStore {
            slots: (0..=self.id).map(|_| None).collect(),
        };
        store.slots[self.id] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=self.id).rev() {
            let Some(g) = store.slots[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            propagate(&nodes, node, &g, &mut store)?;
        }
        Ok(Gradients { grads: leaves })
    }
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    store: &mut GradStore<T>,
) -> Result<()> {
    let needs = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &nodes[id].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if needs(*a) {
                for (d, &s) in store.slot(*a, g.len()).iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
            if needs(*b) {
                for (d, &s) in store.slot(*b, g.len()).iter_mut().zip(g) {
                    *d = *d + sign * s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if needs(*a) {
                let dst = store.slot(*a, g.len());
                for ((d, &s), &o) in dst.iter_mut().zip(g).zip(bv.data()) {
                    *d = *d + s * o;
                }
            }
            if needs(*b) {
                let dst = store.slot(*b, g.len());
                for ((d, &s), &o) in dst.iter_mut().zip(g).zip(av.data()) {
                    *d = *d + s * o;
                }
            }
        }
        Op::AddAlong { x, v, axis } => {
            let (outer, n, inner) = axis_dims("add_along", val(*x).shape(), *axis)?;
            if needs(*x) {
                for (d, &s) in store.slot(*x, g.len()).iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
            if needs(*v) {
                let dst = store.slot(*v, n);
                for o in 0..outer {
                    for (i, d) in dst.iter_mut().enumerate() {
                        let start = (o * n + i) * inner;
                        *d = g[start..start + inner].iter().fold(*d, |acc, &s| acc + s);
                    }
                }
            }
        }
        Op::MulAlong { x, v, axis } => {
            let xv = val(*x);
            let vv = val(*v);
            let (outer, n, inner) = axis_dims("mul_along", xv.shape(), *axis)?;
            if needs(*x) {
                let dst = store.slot(*x, g.len());
                for o in 0..outer {
                    for (i, &gain) in vv.data().iter().enumerate() {
                        let start = (o * n + i) * inner;
                        for (d, &s) in dst[start..start + inner].iter_mut().zip(&g[start..]) {
                            *d = *d + s * gain;
                        }
                    }
                }
            }
            if needs(*v) {
                let dst = store.slot(*v, n);
                for o in 0..outer {
                    for (i, d) in dst.iter_mut().enumerate() {
                        let start = (o * n + i) * inner;
                        for r in start..start + inner {
                            *d = *d + g[r] * xv.data()[r];
                        }
                    }
                }
            }
        }
        Op::Scale { x, s } => {
            for (d, &gi) in store.slot(*x, g.len()).iter_mut().zip(g) {
                *d = *d + gi * *s;
            }
        }
        Op::AddScalar { x } => {
            for (d, &gi) in store.slot(*x, g.len()).iter_mut().zip(g) {
                *d = *d + gi;
            }
        }
        Op::MatMul {
            a,
            b,
            a_trans,
            b_trans,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            let one = T::one();
            if needs(*a) {
                let dst = store.slot(*a, m * k);
                if !a_trans {
                    // dA[m,k] = dC[m,n] * op(B)^T
                    T::gemm(m, n, k, one, g, false, bv.data(), !b_trans, one, dst);
                } else {
                    // dA[k,m] = op(B)[k,n] * dC^T
                    T::gemm(k, n, m, one, bv.data(), *b_trans, g, true, one, dst);
                }
            }
            if needs(*b) {
                let dst = store.slot(*b, k * n);
                if !b_trans {
                    // dB[k,n] = op(A)^T * dC
                    T::gemm(k, m, n, one, av.data(), !a_trans, g, false, one, dst);
                } else {
                    // dB[n,k] = dC^T * op(A)
                    T::gemm(n, m, k, one, g, true, av.data(), *a_trans, one, dst);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_dims("concat", y.shape(), *axis)?;
            let total = y.shape()[*axis] * inner;
            let mut offset = 0;
            for &id in inputs {
                let len = val(id).shape()[*axis] * inner;
                if needs(id) {
                    let dst = store.slot(id, outer * len);
                    for o in 0..outer {
                        let src = &g[o * total + offset..][..len];
                        for (d, &s) in dst[o * len..(o + 1) * len].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape().to_vec();
            let (outer, n, inner) = axis_dims("narrow", &xs, *axis)?;
            let len = y.shape()[*axis];
            let dst = store.slot(*x, outer * n * inner);
            for o in 0..outer {
                let from = (o * n + start) * inner;
                let src = &g[o * len * inner..(o + 1) * len * inner];
                for (d, &s) in dst[from..from + len * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_dims("softmax", y.shape(), *axis)?;
            let yd = y.data();
            let dst = store.slot(*x, g.len());
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let dot = (0..n).fold(T::zero(), |s, i| s + g[idx(i)] * yd[idx(i)]);
                    for i in 0..n {
                        dst[idx(i)] = dst[idx(i)] + yd[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
        }
        Op::Relu { x } => {
            let dst = store.slot(*x, g.len());
            for ((d, &s), &o) in dst.iter_mut().zip(g).zip(y.data()) {
                if o > T::zero() {
                    *d = *d + s;
                }
            }
        }
        Op::LayerNorm { x, axis, inv_std } => {
            let (outer, n, inner) = axis_dims("layer_norm", y.shape(), *axis)?;
            let yd = y.data();
            let nf = T::from_usize(n).unwrap();
            let dst = store.slot(*x, g.len());
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let (mut sg, mut sgy) = (T::zero(), T::zero());
                    for i in 0..n {
                        sg = sg + g[idx(i)];
                        sgy = sgy + g[idx(i)] * yd[idx(i)];
                    }
                    let (mg, mgy) = (sg / nf, sgy / nf);
                    let inv = inv_std[o * inner + r];
                    for i in 0..n {
                        dst[idx(i)] = dst[idx(i)] + inv * (g[idx(i)] - mg - yd[idx(i)] * mgy);
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            stride_h,
            stride_w,
        } => {
            let (xv, kv) = (val(*x).clone(), val(*w).clone());
            let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (co, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
            let oh = valid_len(h, kh, *stride_h).expect("checked in forward");
            let ow = valid_len(wd, kw, *stride_w).expect("checked in forward");
            let kdim = c * kh * kw;
            let p = oh * ow;
            let one = T::one();
            if needs(*w) {
                let cols = im2col(xv.data(), c, h, wd, kh, kw, *stride_h, *stride_w, oh, ow);
                let dst = store.slot(*w, co * kdim);
                T::gemm(co, p, kdim, one, g, false, &cols, true, one, dst);
            }
            if needs(*x) {
                let mut dcols = vec![T::zero(); kdim * p];
                T::gemm(kdim, co, p, one, kv.data(), true, g, false, T::zero(), &mut dcols);
                let dst = store.slot(*x, c * h * wd);
                for ci in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let row = (ci * kh + i) * kw + j;
                            for yy in 0..oh {
                                let base = (ci * h + yy * stride_h + i) * wd;
                                for xx in 0..ow {
                                    let d = &mut dst[base + xx * stride_w + j];
                                    *d = *d + dcols[row * p + yy * ow + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let xs = val(*x).shape().to_vec();
            let (outer, n, inner) = axis_dims("sum", &xs, *axis)?;
            let scale = if matches!(node.op, Op::Mean { .. }) {
                T::from_usize(n).unwrap().recip()
            } else {
                T::one()
            };
            let dst = store.slot(*x, outer * n * inner);
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for i in 0..n {
                    let start = (o * n + i) * inner;
                    for (d, &s) in dst[start..start + inner].iter_mut().zip(src) {
                        *d = *d + s * scale;
                    }
                }
            }
        }
        Op::SumAll { x } => {
            let n = val(*x).numel();
            for d in store.slot(*x, n).iter_mut() {
                *d = *d + g[0];
            }
        }
        Op::L2Normalize { x, axis, norms } => {
            let (outer, n, inner) = axis_dims("l2_normalize", y.shape(), *axis)?;
            let yd = y.data();
            let dst = store.slot(*x, g.len());
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let dot = (0..n).fold(T::zero(), |s, i| s + g[idx(i)] * yd[idx(i)]);
                    let norm = norms[o * inner + r];
                    for i in 0..n {
                        dst[idx(i)] = dst[idx(i)] + (g[idx(i)] - yd[idx(i)] * dot) / norm;
                    }
                }
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (y.shape()[1], y.shape()[0]);
            let dst = store.slot(*x, r * c);
            for i in 0..r {
                for j in 0..c {
                    dst[i * c + j] = dst[i * c + j] + g[j * r + i];
                }
            }
        }
        Op::Reshape { x } => {
            for (d, &s) in store.slot(*x, g.len()).iter_mut().zip(g) {
                *d = *d + s;
            }
        }
        Op::Max { x, axis, argmax } => {
            let xs = val(*x).shape().to_vec();
            let (outer, n, inner) = axis_dims("max", &xs, *axis)?;
            let dst = store.slot(*x, outer * n * inner);
            for o in 0..outer {
                for r in 0..inner {
                    let i = argmax[o * inner + r];
                    let d = &mut dst[(o * n + i) * inner + r];
                    *d = *d + g[o * inner + r];
                }
            }
        }
    }
    Ok(())
}
