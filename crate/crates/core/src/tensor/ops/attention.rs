//! Scaled dot-product attention split over heads, and the projected
//! multi-head wrapper built on top of it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::tape::Op;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Returns `(output [n, t, c], probs [n, heads, t, t])`.
pub fn sdpa_forward<T: Element>(q: &[T], k: &[T], v: &[T], n: usize, t: usize, c: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); n * t * c];
    let mut probs = vec![T::zero(); n * heads * t * t];
    out.par_chunks_mut(t * c).zip(probs.par_chunks_mut(heads * t * t)).enumerate().for_each(|(s, (o, p))| {
        let base = s * t * c;
        for h in 0..heads {
            let ph = &mut p[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &q[base + i * c + h * d..base + i * c + (h + 1) * d];
                let row = &mut ph[i * t..(i + 1) * t];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[base + j * c + h * d..base + j * c + (h + 1) * d];
                    *r = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    total = total + *r;
                }
                for r in row.iter_mut() {
                    *r = *r / total;
                }
                let oi = &mut o[i * c + h * d..i * c + (h + 1) * d];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &v[base + j * c + h * d..base + j * c + (h + 1) * d];
                    oi.iter_mut().zip(vj).for_each(|(a, &b)| *a = *a + pij * b);
                }
            }
        }
    });
    (out, probs)
}

pub(crate) struct SdpaGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sdpa_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    n: usize,
    t: usize,
    c: usize,
    heads: usize,
) -> SdpaGrads<T> {
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut dq = vec![T::zero(); n * t * c];
    let mut dk = vec![T::zero(); n * t * c];
    let mut dv = vec![T::zero(); n * t * c];
    let mut ds = vec![T::zero(); t];
    for s in 0..n {
        let base = s * t * c;
        for h in 0..heads {
            let ph = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            let cols = |i: usize| base + i * c + h * d..base + i * c + (h + 1) * d;
            for i in 0..t {
                let gi = &g[cols(i)];
                let pi = &ph[i * t..(i + 1) * t];
                let mut dot = T::zero();
                for j in 0..t {
                    let dp = gi.iter().zip(&v[cols(j)]).map(|(&a, &b)| a * b).sum::<T>();
                    ds[j] = dp;
                    dot = dot + dp * pi[j];
                    let dvj = &mut dv[cols(j)];
                    dvj.iter_mut().zip(gi).for_each(|(a, &b)| *a = *a + pi[j] * b);
                }
                for j in 0..t {
                    let w = pi[j] * (ds[j] - dot) * scale;
                    for (e, col) in cols(i).zip(cols(j)) {
                        dq[e] = dq[e] + w * k[col];
                        dk[col] = dk[col] + w * q[e];
                    }
                }
            }
        }
    }
    SdpaGrads { dq, dk, dv }
}

/// Projection weights of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl<T: Element> Tape<T> {
    /// Softmax(Q K^T / sqrt(C / heads)) V per head over `[N, T, C]` inputs.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let &[n, t, c] = self.shape(q) else {
            return Err(Error::Shape(format!("attention expects [N, T, C], got {:?}", self.shape(q))));
        };
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{c} channels are not divisible by {heads} heads")));
        }
        if self.shape(k) != [n, t, c] || self.shape(v) != [n, t, c] {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        let (out, probs) = sdpa_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), n, t, c, heads);
        let out = Tensor::new(&[n, t, c], out)?;
        self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs }, "attention")
    }

    /// Projected multi-head self-attention over `[N, T, C]` tokens.
    pub fn multi_head_attention(&mut self, tokens: Var, heads: usize, p: &AttentionParams) -> Result<Var> {
        let c = *self.shape(tokens).last().unwrap_or(&0);
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{c} channels are not divisible by {heads} heads")));
        }
        let q = self.linear(tokens, p.wq, p.bq)?;
        let k = self.linear(tokens, p.wk, p.bk)?;
        let v = self.linear(tokens, p.wv, p.bv)?;
        let a = self.scaled_dot_product_attention(q, k, v, heads)?;
        self.linear(a, p.wo, p.bo)
    }

    /// Attention probabilities saved by an attention node, `[N, heads, T, T]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }
}
