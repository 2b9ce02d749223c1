use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { weight_decay: 1e-8, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Moment buffers are created lazily on the first step and indexed by the
/// position of each parameter in the iterator handed to [`AdamW::step`], so
/// callers must always pass parameters in the same order.
#[derive(Clone, Debug)]
pub struct AdamW<T: Element = f32> {
    pub config: AdamWConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> Option<(&[T], &[T])> {
        Some((self.m.get(index)?, self.v.get(index)?))
    }

    /// One update of every `(name, param, grad)` triple.
    ///
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
    {
        let params: Vec<_> = params.into_iter().collect();
        for (name, p, g) in &params {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of {name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p, _)| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::Shape(format!("optimizer tracks {} parameters, got {}", self.m.len(), params.len())));
        }

        self.t += 1;
        let AdamWConfig { weight_decay, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, (_, p, g)) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.as_f64();
                let m_new = beta1 * mv.as_f64() + (1.0 - beta1) * gv;
                let v_new = beta2 * vv.as_f64() + (1.0 - beta2) * gv * gv;
                *mv = T::from_f64(m_new);
                *vv = T::from_f64(v_new);
                let decayed = w.as_f64() * decay;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *w = T::from_f64(decayed - update);
            }
        }
        Ok(())
    }
}
