//! Bilinear resampling with the half-pixel-centre convention.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::tape::Op;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Source taps for one output axis: `out[d] = lerp(in[lo[d]], in[hi[d]], frac[d])`.
pub(crate) struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

pub(crate) fn axis_taps<T: Element>(input: usize, output: usize) -> AxisTaps<T> {
    let scale = input as f64 / output as f64;
    let mut taps = AxisTaps { lo: Vec::with_capacity(output), hi: Vec::with_capacity(output), frac: Vec::with_capacity(output) };
    for d in 0..output {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = if lo == hi { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(T::from_f64(frac));
    }
    taps
}

#[inline]
fn lerp<T: Element>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Resizes one `h x w` plane. The lerp form keeps constants and same-size
/// resizes exact.
pub fn bilinear_plane<T: Element>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut out = vec![T::zero(); oh * ow];
    plane_forward(src, w, &ty, &tx, &mut out);
    out
}

fn plane_forward<T: Element>(src: &[T], w: usize, ty: &AxisTaps<T>, tx: &AxisTaps<T>, out: &mut [T]) {
    let ow = tx.lo.len();
    for (oy, row) in out.chunks_mut(ow).enumerate() {
        let r0 = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
        let r1 = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
        let fy = ty.frac[oy];
        for (ox, o) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let top = lerp(r0[x0], r0[x1], fx);
            let bot = lerp(r1[x0], r1[x1], fx);
            *o = lerp(top, bot, fy);
        }
    }
}

pub fn bilinear_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, o)| {
        plane_forward(&x[p * h * w..(p + 1) * h * w], w, &ty, &tx, o);
    });
    out
}

/// Adjoint of [`bilinear_forward`]: scatters each output gradient onto its four taps.
pub fn bilinear_backward<T: Element>(g: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let fy = ty.frac[oy];
            let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
            for ox in 0..ow {
                let fx = tx.frac[ox];
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                let go = gp[oy * ow + ox];
                let top = go * (T::one() - fy);
                let bot = go * fy;
                d[y0 * w + x0] = d[y0 * w + x0] + top * (T::one() - fx);
                d[y0 * w + x1] = d[y0 * w + x1] + top * fx;
                d[y1 * w + x0] = d[y1 * w + x0] + bot * (T::one() - fx);
                d[y1 * w + x1] = d[y1 * w + x1] + bot * fx;
            }
        }
    });
    dx
}

impl<T: Element> Tape<T> {
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("resize {h}x{w} -> {out_h}x{out_w}")));
        }
        let data = bilinear_forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let out = Tensor::new(&[n, c, out_h, out_w], data)?;
        self.push(out, Op::Resize { x: x.0 }, "resize_bilinear")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar-loop oracle written straight from the half-pixel mapping.
    fn oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let sample = |y: usize, x: usize| src[y * w + x];
        let mut out = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                out.push(
                    sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + sample(y0, x1) * (1.0 - fy) * fx
                        + sample(y1, x0) * fy * (1.0 - fx)
                        + sample(y1, x1) * fy * fx,
                );
            }
        }
        out
    }

    #[test]
    fn ramp_upsample_matches_oracle() {
        let src = [0.0, 1.0, 2.0, 3.0];
        let fast = bilinear_plane(&src, 1, 4, 1, 8);
        let slow = oracle(&src, 1, 4, 1, 8);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-6);
        }
        // Interior samples lie on the line v = (x + 0.5) / 2 - 0.5.
        for (x, v) in fast.iter().enumerate().take(7).skip(1) {
            assert!((v - ((x as f64 + 0.5) / 2.0 - 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_oracle_on_random_planes() {
        let src: Vec<f64> = (0..35).map(|v| ((v * 7919) % 101) as f64 / 101.0).collect();
        for &(oh, ow) in &[(3, 3), (10, 14), (5, 7), (1, 1), (12, 2)] {
            let fast = bilinear_plane(&src, 5, 7, oh, ow);
            let slow = oracle(&src, 5, 7, oh, ow);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constants_and_identity_are_exact() {
        let c = vec![0.1f32; 6 * 9];
        for &(oh, ow) in &[(6, 9), (13, 4), (1, 1), (20, 30)] {
            assert!(bilinear_plane(&c, 6, 9, oh, ow).iter().all(|&v| v == 0.1f32));
        }
        let src: Vec<f32> = (0..54).map(|v| (v as f32).sqrt()).collect();
        assert_eq!(bilinear_plane(&src, 6, 9, 6, 9), src);
    }
}
