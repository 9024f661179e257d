use std::sync::Arc;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-10;

#[derive(Clone, Copy)]
struct Linear<'t, T: Real> {
    weight: Var<'t, T>,
    bias: Var<'t, T>,
}

impl<'t, T: Real> Linear<'t, T> {
    /// `x [n, d_in] -> [n, d_out]`.
    fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.weight)?.add_along(self.bias, 1)
    }
}

#[derive(Clone, Copy)]
struct LayerNorm<'t, T: Real> {
    gain: Var<'t, T>,
    bias: Var<'t, T>,
}

impl<'t, T: Real> LayerNorm<'t, T> {
    /// Normalizes each row of `x [n, d]`.
    fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(1, T::lit(LN_EPS))?
            .mul_along(self.gain, 1)?
            .add_along(self.bias, 1)
    }
}

struct ConvLayer<'t, T: Real> {
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    stride_h: usize,
}

struct TmBlock<'t, T: Real> {
    query: Linear<'t, T>,
    key: Linear<'t, T>,
    value: Linear<'t, T>,
    out: Linear<'t, T>,
    ln_a: LayerNorm<'t, T>,
    ffn0: Linear<'t, T>,
    ffn1: Linear<'t, T>,
    ln_b: LayerNorm<'t, T>,
    proj: Linear<'t, T>,
}

struct Gdg<'t, T: Real> {
    assign: Linear<'t, T>,
    centers: Var<'t, T>,
    mlp0: Linear<'t, T>,
    mlp1: Linear<'t, T>,
}

struct Cursor<'a, 't, T: Real>(std::slice::Iter<'a, Var<'t, T>>);

impl<'t, T: Real> Cursor<'_, 't, T> {
    fn next(&mut self) -> Var<'t, T> {
        *self.0.next().expect("parameter count matches layout")
    }

    fn linear(&mut self) -> Linear<'t, T> {
        Linear {
            weight: self.next(),
            bias: self.next(),
        }
    }

    fn layer_norm(&mut self) -> LayerNorm<'t, T> {
        LayerNorm {
            gain: self.next(),
            bias: self.next(),
        }
    }
}

/// Parameters placed on a tape, ready for forward passes.
///
/// Feature volumes are `[w, c]` matrices: one row per image column.
pub struct Bound<'t, T: Real> {
    n_head: usize,
    h: usize,
    w: usize,
    vars: Vec<Var<'t, T>>,
    rie: Vec<ConvLayer<'t, T>>,
    tm: Vec<TmBlock<'t, T>>,
    gdg: Gdg<'t, T>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Parameters become leaves on gradient tapes and constants otherwise.
    pub fn new(tape: &'t Tape<T>, cfg: &ModelConfig, params: &ModelParams<T>) -> Self {
        let vars: Vec<Var<'t, T>> = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(Arc::clone(t)))
            .collect();
        let mut it = Cursor(vars.iter());
        let rie = cfg
            .rie_layers
            .iter()
            .map(|l| ConvLayer {
                weight: it.next(),
                bias: it.next(),
                stride_h: l.stride_h,
            })
            .collect();
        let tm = (0..cfg.num_tm_blocks)
            .map(|_| TmBlock {
                query: it.linear(),
                key: it.linear(),
                value: it.linear(),
                out: it.linear(),
                ln_a: it.layer_norm(),
                ffn0: it.linear(),
                ffn1: it.linear(),
                ln_b: it.layer_norm(),
                proj: it.linear(),
            })
            .collect();
        let gdg = Gdg {
            assign: it.linear(),
            centers: it.next(),
            mlp0: it.linear(),
            mlp1: it.linear(),
        };
        Self {
            n_head: cfg.n_head,
            h: cfg.h,
            w: cfg.w,
            vars,
            rie,
            tm,
            gdg,
        }
    }

    /// Parameter variables in layout order.
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Range image encoder: `[1, h, w] -> [w, c]`.
    pub fn rie(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape != [1, self.h, self.w] {
            return Err(Error::Shape {
                op: "rie",
                lhs: shape,
                rhs: vec![1, self.h, self.w],
            });
        }
        let mut y = x;
        for l in &self.rie {
            y = y.conv2d_valid(l.weight, l.stride_h, 1)?.add_along(l.bias, 0)?.relu();
        }
        let s = y.shape();
        y.reshape(&[s[0], s[2]])?.transpose()
    }

    /// Multi-head self-attention of block `b` without positional encoding.
    pub fn attention(&self, b: usize, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let blk = &self.tm[b];
        let q = blk.query.apply(f)?.split(1, self.n_head)?;
        let k = blk.key.apply(f)?.split(1, self.n_head)?;
        let v = blk.value.apply(f)?.split(1, self.n_head)?;
        let d_k = q[0].shape()[1];
        let scale = T::lit(1.0 / (d_k as f64).sqrt());
        let heads = (0..self.n_head)
            .map(|i| q[i].matmul_nt(k[i])?.scale(scale).softmax(1)?.matmul(v[i]))
            .collect::<Result<Vec<_>>>()?;
        blk.out.apply(Var::concat(&heads, 1)?)
    }

    /// `S = LN(FFN(LN(Conc(F, A))) + LN(Conc(F, A)))` of block `b`, `[w, 2c]`.
    pub fn tm_block_s(&self, b: usize, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let blk = &self.tm[b];
        let a = self.attention(b, f)?;
        let x = blk.ln_a.apply(Var::concat(&[f, a], 1)?)?;
        let ffn = blk.ffn1.apply(blk.ffn0.apply(x)?.relu())?;
        blk.ln_b.apply(ffn.add(x)?)
    }

    /// Transformer module: every block followed by its `2c -> c` projection.
    pub fn tm(&self, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = f;
        for b in 0..self.tm.len() {
            x = self.tm[b].proj.apply(self.tm_block_s(b, x)?)?;
        }
        Ok(x)
    }

    /// NetVLAD pooling of the L2-normalized rows of `s [w, c]`, intra- and globally
    /// normalized, `[1, K * c]`.
    pub fn netvlad(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = &self.gdg;
        let s = s.l2_normalize(1, T::lit(L2_EPS))?;
        let assign = g.assign.apply(s)?.softmax(1)?;
        let weighted = assign.matmul_tn(s)?;
        let mass = assign.sum(0)?;
        let residual = weighted.sub(g.centers.mul_along(mass, 0)?)?;
        let intra = residual.l2_normalize(1, T::lit(L2_EPS))?;
        let n = intra.value().numel();
        intra.reshape(&[1, n])?.l2_normalize(1, T::lit(L2_EPS))
    }

    /// Global descriptor generator: NetVLAD, two-layer MLP, L2 normalization.
    pub fn gdg(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = &self.gdg;
        let v = self.netvlad(s)?;
        let hidden = g.mlp0.apply(v)?.relu();
        let out = g.mlp1.apply(hidden)?.l2_normalize(1, T::lit(L2_EPS))?;
        let d = out.shape()[1];
        out.reshape(&[d])
    }

    /// Full network: `[1, h, w]` range image tensor to a unit descriptor.
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.gdg(self.tm(self.rie(x)?)?)
    }
}

/// Runs `f` on an inference tape and returns the value it produced.
pub(crate) fn eval<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    input: &Tensor<T>,
    f: impl for<'t> FnOnce(&Bound<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let bound = Bound::new(&tape, cfg, params);
    let x = tape.constant(input.clone());
    let y = f(&bound, x)?;
    let value = y.value();
    drop(bound);
    Ok(Arc::try_unwrap(value).unwrap_or_else(|shared| (*shared).clone()))
}
