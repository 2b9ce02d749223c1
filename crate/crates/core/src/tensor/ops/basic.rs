use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::tape::Op;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Reflect padding amounts for the two spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Mirror index without edge repetition, periodic for pads wider than the input.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r >= n as isize { period - r } else { r }) as usize
}

pub(crate) fn tiled_sum<T: Element>(g: &[T], tile: usize) -> Vec<T> {
    let mut out = vec![T::zero(); tile];
    for chunk in g.chunks(tile) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o = *o + v);
    }
    out
}

pub(crate) struct BatchNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// `sum(f(a_i, b_i))` in f64 with eight fixed accumulator lanes.
#[inline]
fn lane_sum<T: Element>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += f(x[l].as_f64(), y[l].as_f64());
        }
    }
    let mut s: f64 = lanes.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += f(x.as_f64(), y.as_f64());
    }
    s
}

/// Per-channel statistics over (N, H, W), accumulated in f64.
fn channel_stats<T: Element>(x: &[T], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let m = (n * hw) as f64;
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let plane = |s: usize| &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let sum: f64 = (0..n).map(|s| lane_sum(plane(s), plane(s), |v, _| v)).sum();
            let mean = sum / m;
            let sq: f64 = (0..n).map(|s| lane_sum(plane(s), plane(s), |v, _| (v - mean) * (v - mean))).sum();
            (mean, sq / m)
        })
        .unzip()
}

pub(crate) fn batch_norm_backward<T: Element>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    [n, c, h, w]: [usize; 4],
    batch_stats: bool,
) -> BatchNormGrads<T> {
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); g.len()];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for s in 0..n {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            sg += lane_sum(&g[r.clone()], &g[r.clone()], |v, _| v);
            sgx += lane_sum(&g[r.clone()], &xhat[r], |a, b| a * b);
        }
        dgamma[ch] = T::from_f64(sgx);
        dbeta[ch] = T::from_f64(sg);
        let scale = gamma[ch] * inv_std[ch];
        let mean_g = T::from_f64(sg / m);
        let mean_gx = T::from_f64(sgx / m);
        for s in 0..n {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for ((d, &gv), &xv) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                *d = if batch_stats { scale * (gv - mean_g - xv * mean_gx) } else { scale * gv };
            }
        }
    }
    BatchNormGrads { dx, dgamma, dbeta }
}

pub(crate) fn concat_channels_backward<T: Element>(g: &[T], [n, ca, h, w]: [usize; 4], cb: usize) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for chunk in g.chunks((ca + cb) * hw) {
        ga.extend_from_slice(&chunk[..ca * hw]);
        gb.extend_from_slice(&chunk[ca * hw..]);
    }
    (ga, gb)
}

pub(crate) fn reflect_pad_backward<T: Element>(g: &[T], [n, c, h, w]: [usize; 4], p: Pads) -> Vec<T> {
    let (ph, pw) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, d) in dx.chunks_mut(h * w).enumerate() {
        let gp = &g[plane * ph * pw..(plane + 1) * ph * pw];
        for y in 0..ph {
            let sy = reflect_index(y as isize - p.top as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize - p.left as isize, w);
                d[sy * w + sx] = d[sy * w + sx] + gp[y * pw + x];
            }
        }
    }
    dx
}

pub(crate) fn crop_backward<T: Element>(g: &[T], [n, c, h, w]: [usize; 4], top: usize, left: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, d) in dx.chunks_mut(h * w).enumerate() {
        for y in 0..oh {
            let src = &g[(plane * oh + y) * ow..(plane * oh + y + 1) * ow];
            d[(top + y) * w + left..(top + y) * w + left + ow].copy_from_slice(src);
        }
    }
    dx
}

/// `[n, a, b] -> [n, b, a]`
pub(crate) fn transpose_last2<T: Element>(x: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let src = &x[s * a * b..(s + 1) * a * b];
        let dst = &mut out[s * a * b..(s + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

pub(crate) struct LinearGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn linear_backward<T: Element>(x: &[T], weight: &Tensor<T>, g: &[T], need_dx: bool) -> LinearGrads<T> {
    let (cout, cin) = (weight.shape()[0], weight.shape()[1]);
    let rows = x.len() / cin;
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * cin];
        T::gemm(rows, cout, cin, T::one(), g, (cout as isize, 1), weight.data(), (cin as isize, 1), T::zero(), &mut dx, (cin as isize, 1));
        dx
    });
    let mut dw = vec![T::zero(); cout * cin];
    T::gemm(cout, rows, cin, T::one(), g, (1, cout as isize), x, (cin as isize, 1), T::zero(), &mut dw, (cin as isize, 1));
    LinearGrads { dx, dw, db: tiled_sum(g, cout) }
}

impl<T: Element> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, Op::Add(a.0, b.0), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, Op::Mul(a.0, b.0), "mul")
    }

    /// `x + bias` where `bias` is repeated over the leading axes of `x`.
    pub fn add_tiled(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tile = self.value(bias).numel();
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() < bs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::Shape(format!("add_tiled: {xs:?} does not end with {bs:?}")));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(tile).flat_map(|c| c.iter().zip(b).map(|(&v, &o)| v + o)).collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, Op::AddTiled { x: x.0, bias: bias.0 }, "add_tiled")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x.0), "sum")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x.0), "relu")
    }

    /// Batch normalisation using the statistics of this batch.
    ///
    /// Returns the output together with the per-channel batch mean and biased
    /// variance so the caller can maintain running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let dims = self.value(x).dims4()?;
        let (mean, var) = channel_stats(self.value(x).data(), dims);
        let out = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64, batch_stats: bool) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batch_norm: {c} channels vs gamma {:?}", self.shape(gamma))));
        }
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        xhat.par_chunks_mut(hw).zip(y.par_chunks_mut(hw)).enumerate().for_each(|(plane, (xh, yo))| {
            let ch = plane % c;
            let src = &xs[plane * hw..(plane + 1) * hw];
            for ((xh, yo), &v) in xh.iter_mut().zip(yo.iter_mut()).zip(src) {
                *xh = (v - mean_t[ch]) * inv_std[ch];
                *yo = g[ch] * *xh + b[ch];
            }
        });
        let out = Tensor::new(&[n, c, h, w], y)?;
        self.push(out, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, batch_stats }, "batch_norm")
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!("concat: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            data.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data)?;
        self.push(out, Op::Concat { a: a.0, b: b.0 }, "concat")
    }

    pub fn reflect_pad(&mut self, x: Var, pads: Pads) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (ph, pw) = (h + pads.top + pads.bottom, w + pads.left + pads.right);
        let src = self.value(x).data();
        let rows: Vec<usize> = (0..ph).map(|y| reflect_index(y as isize - pads.top as isize, h)).collect();
        let cols: Vec<usize> = (0..pw).map(|x| reflect_index(x as isize - pads.left as isize, w)).collect();
        let mut data = Vec::with_capacity(n * c * ph * pw);
        for plane in src.chunks(h * w) {
            for &sy in &rows {
                data.extend(cols.iter().map(|&sx| plane[sy * w + sx]));
            }
        }
        let out = Tensor::new(&[n, c, ph, pw], data)?;
        self.push(out, Op::ReflectPad { x: x.0, pads }, "reflect_pad")
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if top + out_h > h || left + out_w > w {
            return Err(Error::Shape(format!("crop {out_h}x{out_w}+{top}+{left} outside {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for plane in src.chunks(h * w) {
            for y in top..top + out_h {
                data.extend_from_slice(&plane[y * w + left..y * w + left + out_w]);
            }
        }
        let out = Tensor::new(&[n, c, out_h, out_w], data)?;
        self.push(out, Op::Crop { x: x.0, top, left }, "crop")
    }

    /// `[N, C, H, W] -> [N, H*W, C]`
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let data = transpose_last2(self.value(x).data(), n, c, h * w);
        let out = Tensor::new(&[n, h * w, c], data)?;
        self.push(out, Op::ToTokens(x.0), "to_tokens")
    }

    /// `[N, H*W, C] -> [N, C, H, W]`
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let &[n, t, c] = self.shape(x) else {
            return Err(Error::Shape(format!("from_tokens expects [N, T, C], got {:?}", self.shape(x))));
        };
        if t != h * w {
            return Err(Error::Shape(format!("from_tokens: {t} tokens cannot form {h}x{w}")));
        }
        let data = transpose_last2(self.value(x).data(), n, t, c);
        let out = Tensor::new(&[n, c, h, w], data)?;
        self.push(out, Op::FromTokens(x.0), "from_tokens")
    }

    /// `x @ weight^T + bias` over the last axis; `weight` is `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (&[cout, cin], xs) = (self.shape(weight), self.shape(x)) else {
            return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", self.shape(weight))));
        };
        if xs.last() != Some(&cin) || self.shape(bias) != [cout] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight [{cout}, {cin}], bias {:?}", self.shape(bias))));
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let rows = self.value(x).numel() / cin;
        let b = self.value(bias).data();
        let mut y: Vec<T> = (0..rows).flat_map(|_| b.iter().copied()).collect();
        T::gemm(
            rows,
            cin,
            cout,
            T::one(),
            self.value(x).data(),
            (cin as isize, 1),
            self.value(weight).data(),
            (1, cin as isize),
            T::one(),
            &mut y,
            (cout as isize, 1),
        );
        let out = Tensor::new(&shape, y)?;
        self.push(out, Op::Linear { x: x.0, weight: weight.0, bias: bias.0 }, "linear")
    }
}
