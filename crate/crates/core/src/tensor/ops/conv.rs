//! 2D cross-correlation over NCHW tensors.
//!
//! Narrow stride-1 layers use a direct row-wise kernel; everything else goes
//! through im2col + GEMM, which is memory bound when there are few output
//! channels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::tape::Op;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(Error::Shape(format!("conv2d expects NCHW input and OIHW weight, got {input:?} / {weight:?}")));
        };
        if cin != wcin {
            return Err(Error::Shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let oh = out_dim(h, kh, stride, pad)?;
        let ow = out_dim(w, kw, stride, pad)?;
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn use_direct(&self) -> bool {
        self.stride == 1 && !self.is_pointwise() && self.cout <= DIRECT_MAX_COUT && self.pad < self.kh && self.pad < self.kw
    }
}

/// `floor((size + 2 * pad - kernel) / stride) + 1`
pub fn out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || size + 2 * pad < kernel {
        return Err(Error::Shape(format!("kernel {kernel} larger than padded input {}", size + 2 * pad)));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, p) = (g.h as isize, g.w as isize, g.p());
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let shift = kj as isize - pad;
                        let lo = (-shift).clamp(0, g.ow as isize) as usize;
                        let hi = (w - shift).clamp(0, g.ow as isize) as usize;
                        drow[..lo].fill(T::zero());
                        if hi > lo {
                            let s = (lo as isize + shift) as usize;
                            drow[lo..hi].copy_from_slice(&src[s..s + hi - lo]);
                        }
                        drow[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            *d = if ix >= 0 && ix < w { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, p) = (g.h as isize, g.w as isize, g.p());
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w {
                            let d = &mut drow[ix as usize];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Widest layer routed to the direct kernel.
pub const DIRECT_MAX_COUT: usize = 16;

const LANES: usize = 8;
const CO_BLOCK: usize = 4;

#[inline(always)]
fn fma_lanes<T: Element>(acc: &mut [T; LANES], w: T, s: &[T; LANES]) {
    for (a, &x) in acc.iter_mut().zip(s) {
        *a = *a + w * x;
    }
}

#[inline(always)]
fn mul_add_lanes<T: Element>(acc: &mut [T; LANES], d: &[T; LANES], s: &[T; LANES]) {
    for ((a, &x), &y) in acc.iter_mut().zip(d).zip(s) {
        *a = *a + x * y;
    }
}

/// Zero-padded copy of `planes` planes of `h x w`, with `LANES` spare
/// columns on the right so full tiles can always be read.
struct Padded<T> {
    data: Vec<T>,
    h: usize,
    stride: usize,
}

fn pad_planes<T: Element>(x: &[T], planes: usize, h: usize, w: usize, py: usize, px: usize) -> Padded<T> {
    let (ph, stride) = (h + 2 * py, w + 2 * px + LANES);
    let mut data = vec![T::zero(); planes * ph * stride];
    for p in 0..planes {
        for r in 0..h {
            let dst = (p * ph + r + py) * stride + px;
            data[dst..dst + w].copy_from_slice(&x[(p * h + r) * w..(p * h + r + 1) * w]);
        }
    }
    Padded { data, h: ph, stride }
}

/// Weights regrouped as `[cout / CO_BLOCK][cin][kh][kw][CO_BLOCK]`, zero-filled past `cout`.
fn pack_weights<T: Element>(w: &[T], cout: usize, cin: usize, kk: usize) -> Vec<T> {
    let groups = cout.div_ceil(CO_BLOCK);
    let mut out = vec![T::zero(); groups * cin * kk * CO_BLOCK];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..kk {
                out[(((co / CO_BLOCK) * cin + ci) * kk + t) * CO_BLOCK + co % CO_BLOCK] = w[(co * cin + ci) * kk + t];
            }
        }
    }
    out
}

/// Accumulates one `CO_BLOCK x LANES` output tile starting at `(oy, ox)`.
#[inline(never)]
#[allow(clippy::too_many_arguments)]
fn tile<T: Element>(
    xp: &[T],
    ph: usize,
    stride: usize,
    cin: usize,
    wg: &[T],
    kh: usize,
    kw: usize,
    oy: usize,
    ox: usize,
) -> [[T; LANES]; CO_BLOCK] {
    let kk = kh * kw;
    let mut acc = [[T::zero(); LANES]; CO_BLOCK];
    for ci in 0..cin {
        for ki in 0..kh {
            let row = &xp[(ci * ph + oy + ki) * stride + ox..];
            for kj in 0..kw {
                let s: &[T; LANES] = row[kj..kj + LANES].try_into().expect("padded row");
                let wv: &[T; CO_BLOCK] = wg[(ci * kk + ki * kw + kj) * CO_BLOCK..][..CO_BLOCK].try_into().expect("packed");
                for (a, &wc) in acc.iter_mut().zip(wv) {
                    fma_lanes(a, wc, s);
                }
            }
        }
    }
    acc
}

/// `out[co, oy, ox] += sum w[co, ci, ki, kj] * xp[ci, oy + ki, ox + kj]` (valid correlation).
#[allow(clippy::too_many_arguments)]
fn correlate<T: Element>(xp: &Padded<T>, cin: usize, packed: &[T], cout: usize, kh: usize, kw: usize, out: &mut [T], oh: usize, ow: usize) {
    let kk = kh * kw;
    for oy in 0..oh {
        for group in 0..cout.div_ceil(CO_BLOCK) {
            let wg = &packed[group * cin * kk * CO_BLOCK..(group + 1) * cin * kk * CO_BLOCK];
            let nco = (cout - group * CO_BLOCK).min(CO_BLOCK);
            let mut ox = 0;
            while ox < ow {
                let acc = tile(&xp.data, xp.h, xp.stride, cin, wg, kh, kw, oy, ox);
                let n = (ow - ox).min(LANES);
                for (c, a) in acc.iter().enumerate().take(nco) {
                    let base = ((group * CO_BLOCK + c) * oh + oy) * ow + ox;
                    for (o, &v) in out[base..base + n].iter_mut().zip(a) {
                        *o = *o + v;
                    }
                }
                ox += LANES;
            }
        }
    }
}

fn direct_forward<T: Element>(x_n: &[T], weight: &[T], g: &ConvGeom, out_n: &mut [T]) {
    let xp = pad_planes(x_n, g.cin, g.h, g.w, g.pad, g.pad);
    let packed = pack_weights(weight, g.cout, g.cin, g.kh * g.kw);
    correlate(&xp, g.cin, &packed, g.cout, g.kh, g.kw, out_n, g.oh, g.ow);
}

/// Input gradient as a correlation of the padded output gradient with the
/// flipped, transposed kernel.
fn direct_backward_input<T: Element>(weight: &[T], dy_n: &[T], g: &ConvGeom, dx_n: &mut [T]) {
    let kk = g.kh * g.kw;
    let mut flipped = vec![T::zero(); weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    flipped[(ci * g.cout + co) * kk + (g.kh - 1 - ki) * g.kw + (g.kw - 1 - kj)] =
                        weight[(co * g.cin + ci) * kk + ki * g.kw + kj];
                }
            }
        }
    }
    let dyp = pad_planes(dy_n, g.cout, g.oh, g.ow, g.kh - 1 - g.pad, g.kw - 1 - g.pad);
    let packed = pack_weights(&flipped, g.cin, g.cout, kk);
    correlate(&dyp, g.cout, &packed, g.cin, g.kh, g.kw, dx_n, g.h, g.w);
}

/// Lane-wise `sum_ox d[c][ox] * s[ox]` over the first `full` columns.
#[inline(never)]
fn row_products<T: Element>(dy_rows: &[&[T]], s: &[T], full: usize) -> [[T; LANES]; CO_BLOCK] {
    let mut acc = [[T::zero(); LANES]; CO_BLOCK];
    for ox in (0..full).step_by(LANES) {
        let sv: &[T; LANES] = s[ox..ox + LANES].try_into().expect("padded row");
        for (a, d) in acc.iter_mut().zip(dy_rows) {
            let d: &[T; LANES] = d[ox..ox + LANES].try_into().expect("full tile");
            mul_add_lanes(a, d, sv);
        }
    }
    acc
}

fn direct_backward_weight<T: Element>(x_n: &[T], dy_n: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.kh * g.kw;
    let xp = pad_planes(x_n, g.cin, g.h, g.w, g.pad, g.pad);
    let mut dw = vec![T::zero(); g.cout * g.cin * kk];
    let full = g.ow / LANES * LANES;
    for group in 0..g.cout.div_ceil(CO_BLOCK) {
        let nco = (g.cout - group * CO_BLOCK).min(CO_BLOCK);
        for oy in 0..g.oh {
            let dy_rows: Vec<&[T]> = (0..nco)
                .map(|c| &dy_n[((group * CO_BLOCK + c) * g.oh + oy) * g.ow..][..g.ow])
                .collect();
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    let row = &xp.data[(ci * xp.h + oy + ki) * xp.stride..][..xp.stride];
                    for kj in 0..g.kw {
                        let acc = row_products(&dy_rows, &row[kj..], full);
                        for (c, d) in dy_rows.iter().enumerate() {
                            let mut sum = acc[c].iter().fold(T::zero(), |a, &v| a + v);
                            for ox in full..g.ow {
                                sum = sum + d[ox] * row[ox + kj];
                            }
                            let slot = &mut dw[((group * CO_BLOCK + c) * g.cin + ci) * kk + ki * g.kw + kj];
                            *slot = *slot + sum;
                        }
                    }
                }
            }
        }
    }
    dw
}

pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    out.par_chunks_mut(g.cout * p).enumerate().for_each(|(n, out_n)| {
        let x_n = &x[n * in_len..(n + 1) * in_len];
        if let Some(b) = bias {
            for (co, row) in out_n.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.use_direct() {
            direct_forward(x_n, weight, g, out_n);
        } else if g.is_pointwise() {
            T::gemm(g.cout, k, p, T::one(), weight, (k as isize, 1), x_n, (p as isize, 1), beta, out_n, (p as isize, 1));
        } else {
            let mut cols = vec![T::zero(); k * p];
            im2col(x_n, g, &mut cols);
            T::gemm(g.cout, k, p, T::one(), weight, (k as isize, 1), &cols, (p as isize, 1), beta, out_n, (p as isize, 1));
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dx = if need_dx { vec![T::zero(); g.n * in_len] } else { Vec::new() };

    let per_sample = |n: usize, dx_n: Option<&mut [T]>| -> Option<Vec<T>> {
        let x_n = &x[n * in_len..(n + 1) * in_len];
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        if g.use_direct() {
            if let Some(dx_n) = dx_n {
                direct_backward_input(weight, dy_n, g, dx_n);
            }
            return need_dw.then(|| direct_backward_weight(x_n, dy_n, g));
        }
        let pointwise = g.is_pointwise();
        let cols_owned;
        let cols: &[T] = if pointwise || !need_dw {
            x_n
        } else {
            let mut c = vec![T::zero(); k * p];
            im2col(x_n, g, &mut c);
            cols_owned = c;
            &cols_owned
        };
        let dw_n = need_dw.then(|| {
            let mut dw = vec![T::zero(); g.cout * k];
            // dW = dY (cout x p) @ cols^T (p x k)
            T::gemm(g.cout, p, k, T::one(), dy_n, (p as isize, 1), cols, (1, p as isize), T::zero(), &mut dw, (k as isize, 1));
            dw
        });
        if let Some(dx_n) = dx_n {
            if pointwise {
                // dX = W^T (cin x cout) @ dY (cout x p)
                T::gemm(k, g.cout, p, T::one(), weight, (1, k as isize), dy_n, (p as isize, 1), T::zero(), dx_n, (p as isize, 1));
            } else {
                let mut dcols = vec![T::zero(); k * p];
                T::gemm(k, g.cout, p, T::one(), weight, (1, k as isize), dy_n, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                col2im(&dcols, g, dx_n);
            }
        }
        dw_n
    };

    let partial: Vec<Option<Vec<T>>> = if need_dx {
        dx.par_chunks_mut(in_len).enumerate().map(|(n, dx_n)| per_sample(n, Some(dx_n))).collect()
    } else {
        (0..g.n).into_par_iter().map(|n| per_sample(n, None)).collect()
    };

    // Summed in sample order so results do not depend on thread scheduling.
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); g.cout * k];
        for part in partial.into_iter().flatten() {
            acc.iter_mut().zip(&part).for_each(|(a, b)| *a = *a + *b);
        }
        acc
    });
    ConvGrads { dx: need_dx.then_some(dx), dw }
}

pub fn bias_grad<T: Element>(dy: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.p();
    let mut db = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            let start = (n * g.cout + co) * p;
            *d = *d + dy[start..start + p].iter().copied().sum::<T>();
        }
    }
    db
}

impl<T: Element> Tape<T> {
    /// Cross-correlation with zero padding; `bias` has one entry per output channel.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Shape(format!("conv2d bias {:?} != [{}]", self.shape(b), geom.cout)));
            }
        }
        let data = conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(&[geom.n, geom.cout, geom.oh, geom.ow], data)?;
        self.push(out, Op::Conv2d { x: x.0, weight: weight.0, bias: bias.map(|b| b.0), geom }, "conv2d")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sextuple loop used as an oracle for the im2col path.
    fn conv_naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        acc += x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                            * w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                                    }
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_for_various_geometries() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(h, w, k, s, p) in &[(5, 7, 3, 1, 1), (8, 8, 3, 2, 1), (8, 8, 4, 4, 0), (6, 5, 1, 1, 0), (9, 9, 5, 2, 2)] {
            let g = ConvGeom::new(&[2, 3, h, w], &[4, 3, k, k], s, p).unwrap();
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|_| next()).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..4).map(|_| next()).collect();
            let fast = conv2d_forward(&x, &wt, Some(&b), &g);
            let slow = conv_naive(&x, &wt, &b, &g);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    /// Adjoint of `conv_naive`.
    fn conv_naive_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let d = dy[((n * g.cout + co) * g.oh + oy) * g.ow + ox];
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        let xi = ((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize;
                                        let wi = ((co * g.cin + ci) * g.kh + ki) * g.kw + kj;
                                        dx[xi] += w[wi] * d;
                                        dw[wi] += x[xi] * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }

    #[test]
    fn direct_and_gemm_paths_match_naive() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for cout in [3, DIRECT_MAX_COUT, DIRECT_MAX_COUT + 4] {
            for &(h, w, k, p) in &[(6, 11, 3, 1), (5, 4, 3, 0), (7, 6, 5, 2), (3, 3, 3, 2)] {
                let g = ConvGeom::new(&[2, 3, h, w], &[cout, 3, k, k], 1, p).unwrap();
                let x: Vec<f64> = (0..2 * 3 * h * w).map(|_| next()).collect();
                let wt: Vec<f64> = (0..cout * 3 * k * k).map(|_| next()).collect();
                let b = vec![0.25; cout];
                let dy: Vec<f64> = (0..2 * cout * g.oh * g.ow).map(|_| next()).collect();
                let y = conv2d_forward(&x, &wt, Some(&b), &g);
                for (a, e) in y.iter().zip(&conv_naive(&x, &wt, &b, &g)) {
                    assert!((a - e).abs() < 1e-12, "forward cout {cout}: {a} vs {e}");
                }
                let grads = conv2d_backward(&x, &wt, &dy, &g, true, true);
                let (dx, dw) = conv_naive_backward(&x, &wt, &dy, &g);
                for (a, e) in grads.dx.unwrap().iter().zip(&dx).chain(grads.dw.unwrap().iter().zip(&dw)) {
                    assert!((a - e).abs() < 1e-12, "backward cout {cout}: {a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn all_ones_three_by_three() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        assert_eq!(out.data()[12], 9.0);
        for corner in [0, 4, 20, 24] {
            assert_eq!(out.data()[corner], 4.0);
        }
        assert_eq!(out.data()[2], 6.0);
    }

    #[test]
    fn identity_kernel_is_exact() {
        let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|v| (v as f32 * 0.37).sin()).collect();
        let x_t = Tensor::new(&[2, 3, 4, 4], data.clone()).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(x_t);
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        // 3x3 kernel with a single centre tap, padding 1.
        let mut w3 = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w3.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let w3 = tape.constant(w3);
        let y3 = tape.conv2d(x, w3, None, 1, 1).unwrap();
        assert_eq!(tape.value(y3).data(), &data[..]);
    }

    #[test]
    fn strided_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], f32::MAX));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 2.0));
        assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::NonFinite(_))));
    }
}
