//! Projective warps of samples by inverse mapping.

use crate::error::{Error, Result};
use crate::phantom::Sample;

/// 3x3 projective transform acting on `(col, row, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Linear 2x2 part embedded in a homography.
    pub fn linear(m: [[f64; 2]; 2]) -> Self {
        Homography([[m[0][0], m[0][1], 0.0], [m[1][0], m[1][1], 0.0], [0.0, 0.0, 1.0]])
    }

    /// `m` applied about `(cx, cy)` instead of the origin.
    pub fn about(m: [[f64; 2]; 2], cx: f64, cy: f64) -> Self {
        Homography::translation(cx, cy).then_after(&Homography::linear(m)).then_after(&Homography::translation(-cx, -cy))
    }

    /// Matrix product `self * other` (apply `other` first).
    pub fn then_after(&self, other: &Homography) -> Homography {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Homography(out)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Invalid("singular transform".into()));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Ok(Homography(adj.map(|row| row.map(|v| v / det))))
    }

    /// Homography taking each `src[i]` to `dst[i]`, solved as an 8x8 linear system with `h33 = 1`.
    pub fn from_correspondences(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Result<Homography> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let ((x, y), (u, v)) = (src[i], dst[i]);
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        for col in 0..8 {
            let pivot = (col..8).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap_or(col);
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::Invalid("degenerate point correspondence".into()));
            }
            a.swap(col, pivot);
            for r in 0..8 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..9 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let h: Vec<f64> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
        Ok(Homography([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]))
    }
}

/// Bilinear sample at continuous pixel-centre coordinates; zero outside the frame.
fn sample_bilinear(img: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    if !(x > -0.5 && y > -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5) {
        return 0.0;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = img[y0 * w + x0] + tx * (img[y0 * w + x1] - img[y0 * w + x0]);
    let bot = img[y1 * w + x0] + tx * (img[y1 * w + x1] - img[y1 * w + x0]);
    (top + ty * (bot - top)).clamp(0.0, 1.0)
}

fn nearest(x: f64, y: f64, h: usize, w: usize) -> Option<usize> {
    let (c, r) = (x.round(), y.round());
    (c >= 0.0 && r >= 0.0 && c < w as f64 && r < h as f64).then(|| r as usize * w + c as usize)
}

/// Warps a sample by `forward` (input to output coordinates). Image bilinear,
/// masks nearest, zero fill; the fovea is mapped and its heatmap regenerated.
pub fn warp_sample(sample: &Sample, forward: &Homography) -> Result<Sample> {
    let inv = forward.inverse()?;
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for r in 0..h {
        for c in 0..w {
            let (x, y) = inv.apply(c as f64, r as f64);
            let i = r * w + c;
            out.image[i] = sample_bilinear(&sample.image, h, w, x, y);
            let (reg, ves) = match nearest(x, y, h, w) {
                Some(j) => (sample.region[j], sample.vessel[j]),
                None => (0, 0),
            };
            out.region[i] = reg;
            out.vessel[i] = ves;
        }
    }
    match sample.fovea() {
        Some(f) => {
            let (x, y) = forward.apply(f.col as f64, f.row as f64);
            out.set_fovea_f64(x, y);
        }
        None => out.set_fovea(None),
    }
    Ok(out)
}

/// Resamples a sample to `oh x ow` with half-pixel alignment.
pub fn resize_sample(sample: &Sample, oh: usize, ow: usize) -> Result<Sample> {
    if oh == 0 || ow == 0 {
        return Err(Error::Shape("resize target must be non-empty".into()));
    }
    let (h, w) = (sample.height, sample.width);
    if (oh, ow) == (h, w) {
        return Ok(sample.clone());
    }
    let image = crate::tensor::ops::resize::bilinear_plane(&sample.image, h, w, oh, ow);
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let src = |r: usize, c: usize| -> usize {
        let y = (((r as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        let x = (((c as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
        y * w + x
    };
    let mut region = vec![0; oh * ow];
    let mut vessel = vec![0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let j = src(r, c);
            region[r * ow + c] = sample.region[j];
            vessel[r * ow + c] = sample.vessel[j];
        }
    }
    let mut out = Sample::new(oh, ow, image, region, vessel, None, (sample.pixel_scale_um.0 * sx, sample.pixel_scale_um.1 * sy))?;
    out.absent_label = sample.absent_label;
    out.split = sample.split;
    out.seed = sample.seed;
    if let Some(f) = sample.fovea() {
        out.set_fovea_f64((f.col as f64 + 0.5) / sx - 0.5, (f.row as f64 + 0.5) / sy - 0.5);
    }
    Ok(out)
}

/// Window `[top, top + oh) x [left, left + ow)` of a sample.
pub fn crop_sample(sample: &Sample, top: usize, left: usize, oh: usize, ow: usize) -> Result<Sample> {
    if top + oh > sample.height || left + ow > sample.width {
        return Err(Error::Shape(format!(
            "crop {oh}x{ow} at ({top}, {left}) exceeds {}x{}",
            sample.height, sample.width
        )));
    }
    let w = sample.width;
    let pick = |plane: &[u8]| -> Vec<u8> {
        (top..top + oh).flat_map(|r| plane[r * w + left..r * w + left + ow].iter().copied()).collect()
    };
    let image = (top..top + oh).flat_map(|r| sample.image[r * w + left..r * w + left + ow].iter().copied()).collect();
    let mut out = Sample::new(oh, ow, image, pick(&sample.region), pick(&sample.vessel), None, sample.pixel_scale_um)?;
    out.absent_label = sample.absent_label;
    out.split = sample.split;
    out.seed = sample.seed;
    if let Some(f) = sample.fovea() {
        out.set_fovea_f64(f.col as f64 - left as f64, f.row as f64 - top as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trips() {
        let h = Homography([[1.2, 0.1, 3.0], [-0.2, 0.9, 1.0], [0.001, 0.002, 1.0]]);
        let p = h.inverse().unwrap().then_after(&h);
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.0[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correspondences_are_reproduced() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 8.0), (0.0, 8.0)];
        let dst = [(1.0, -1.0), (11.5, 0.5), (9.0, 9.0), (-1.0, 7.0)];
        let h = Homography::from_correspondences(src, dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = h.apply(s.0, s.1);
            assert!((u - d.0).abs() < 1e-9 && (v - d.1).abs() < 1e-9);
        }
        let collinear = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert!(Homography::from_correspondences(collinear, dst).is_err());
    }
}
