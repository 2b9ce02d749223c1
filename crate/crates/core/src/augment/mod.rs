//! OCT-specific and standard training augmentations.
//!
//! Every op is a pure function of its inputs and the supplied RNG. The
//! `*_with` variants take explicit parameters and are what the randomised
//! ops delegate to.

pub mod warp;

pub use warp::{crop_sample, resize_sample, warp_sample, Homography};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Range of the speckle standard deviation (not variance).
    pub speckle_sigma_range: [f64; 2],
    /// Multiply by `eps` instead of `1 + eps`. Destroys the image; kept for completeness.
    pub speckle_literal: bool,
    pub shadow_count_range: [usize; 2],
    pub shadow_width_range: [usize; 2],
    pub shadow_offset_px: usize,
    pub shadow_gamma_range: [f64; 2],
    pub distortion_theta_range_deg: [f64; 2],
    /// `s_x / s_y` of the physical frame in which the distortion rotates.
    pub axis_scale_ratio: f64,
    pub p_speckle: f64,
    pub p_shadow: f64,
    pub p_flip: f64,
    pub perspective_scale: f64,
    pub p_perspective: f64,
    pub brightness_contrast_range: [f64; 2],
    pub p_photometric: f64,
    pub affine_scale_range: [f64; 2],
    pub affine_rot_range_deg: [f64; 2],
    pub affine_shear_range_deg: [f64; 2],
    pub p_geometric: f64,
    /// Probability that a fired geometric slot uses the standard affine.
    pub p_affine_vs_distortion: f64,
    /// When false, speckle, shadow and acquisition distortion never fire and
    /// the geometric slot always uses the standard affine.
    pub domain_specific: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            speckle_sigma_range: [0.2, 0.5],
            speckle_literal: false,
            shadow_count_range: [2, 10],
            shadow_width_range: [2, 10],
            shadow_offset_px: 30,
            shadow_gamma_range: [1.5, 3.0],
            distortion_theta_range_deg: [5.0, 45.0],
            axis_scale_ratio: 4.0,
            p_speckle: 1.0 / 3.0,
            p_shadow: 1.0 / 3.0,
            p_flip: 0.5,
            perspective_scale: 0.2,
            p_perspective: 0.25,
            brightness_contrast_range: [0.6, 1.4],
            p_photometric: 1.0 / 3.0,
            affine_scale_range: [0.9, 1.5],
            affine_rot_range_deg: [-25.0, 25.0],
            affine_shear_range_deg: [-15.0, 15.0],
            p_geometric: 1.0 / 3.0,
            p_affine_vs_distortion: 0.5,
            domain_specific: true,
        }
    }
}

impl AugmentConfig {
    /// Every gate closed.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_speckle: 0.0,
            p_shadow: 0.0,
            p_flip: 0.0,
            p_perspective: 0.0,
            p_photometric: 0.0,
            p_geometric: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_speckle", self.p_speckle),
            ("p_shadow", self.p_shadow),
            ("p_flip", self.p_flip),
            ("p_perspective", self.p_perspective),
            ("p_photometric", self.p_photometric),
            ("p_geometric", self.p_geometric),
            ("p_affine_vs_distortion", self.p_affine_vs_distortion),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("speckle_sigma_range", self.speckle_sigma_range),
            ("shadow_gamma_range", self.shadow_gamma_range),
            ("distortion_theta_range_deg", self.distortion_theta_range_deg),
            ("brightness_contrast_range", self.brightness_contrast_range),
            ("affine_scale_range", self.affine_scale_range),
            ("affine_rot_range_deg", self.affine_rot_range_deg),
            ("affine_shear_range_deg", self.affine_shear_range_deg),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is not an ordered range")));
            }
        }
        for (name, [lo, hi]) in [("shadow_count_range", self.shadow_count_range), ("shadow_width_range", self.shadow_width_range)] {
            if lo > hi || lo == 0 {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is not an ordered positive range")));
            }
        }
        if self.speckle_sigma_range[0] < 0.0 || self.affine_scale_range[0] <= 0.0 || self.axis_scale_ratio <= 0.0 {
            return Err(Error::Config("scales and standard deviations must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.perspective_scale) {
            return Err(Error::Config("perspective_scale must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

// ---------------------------------------------------------------- speckle

pub fn apply_speckle(image: &[f32], config: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    let sigma = uniform(rng, config.speckle_sigma_range);
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let eps: Vec<f64> = (0..image.len()).map(|_| noise.sample(rng)).collect();
    apply_speckle_with(image, &eps, config.speckle_literal)
}

/// `clip(I * (1 + eps))`, or `clip(I * eps)` in literal mode.
pub fn apply_speckle_with(image: &[f32], eps: &[f64], literal: bool) -> Vec<f32> {
    let offset = if literal { 0.0 } else { 1.0 };
    image.iter().zip(eps).map(|(&v, &e)| (v as f64 * (offset + e)).clamp(0.0, 1.0) as f32).collect()
}

// ---------------------------------------------------------------- shadow

/// One darkened band of A-scans.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadowBand {
    pub start_col: usize,
    pub width: usize,
    pub gamma: f64,
}

pub fn apply_vessel_shadow(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let n = rng.random_range(config.shadow_count_range[0]..=config.shadow_count_range[1]);
    let bands: Vec<ShadowBand> = (0..n)
        .map(|_| ShadowBand {
            start_col: rng.random_range(0..sample.width),
            width: rng.random_range(config.shadow_width_range[0]..=config.shadow_width_range[1]),
            gamma: uniform(rng, config.shadow_gamma_range),
        })
        .collect();
    apply_vessel_shadow_with(sample, &bands, config.shadow_offset_px)
}

/// Topmost region row in columns `[c0, c1)`.
fn top_region_row(sample: &Sample, c0: usize, c1: usize) -> Option<usize> {
    (0..sample.height).find(|&r| (c0..c1).any(|c| sample.region[r * sample.width + c] == 1))
}

/// Raises each band to its gamma from `offset_px` above the band's topmost
/// region row to the bottom. Bands without region pixels anchor to the
/// topmost region row of the whole image.
pub fn apply_vessel_shadow_with(sample: &Sample, bands: &[ShadowBand], offset_px: usize) -> Result<Sample> {
    let w = sample.width;
    let global_top =
        top_region_row(sample, 0, w).ok_or_else(|| Error::Invalid("vessel shadow needs a non-empty region mask".into()))?;
    let mut out = sample.clone();
    for band in bands {
        let c0 = band.start_col.min(w);
        let c1 = (band.start_col + band.width).min(w);
        let anchor = top_region_row(sample, c0, c1).unwrap_or(global_top);
        let first = anchor.saturating_sub(offset_px);
        for r in first..sample.height {
            for v in &mut out.image[r * w + c0..r * w + c1] {
                *v = (*v as f64).powf(band.gamma) as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- geometric

fn centre(sample: &Sample) -> (f64, f64) {
    ((sample.width as f64 - 1.0) / 2.0, (sample.height as f64 - 1.0) / 2.0)
}

/// `S^-1 R(theta) S` about the image centre, with `S = diag(ratio, 1)`.
pub fn distortion_matrix(theta_deg: f64, ratio: f64, cx: f64, cy: f64) -> Homography {
    let (s, c) = theta_deg.to_radians().sin_cos();
    let m = [[c, -s / ratio], [ratio * s, c]];
    Homography::about(m, cx, cy)
}

pub fn apply_acquisition_distortion(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let theta = uniform(rng, config.distortion_theta_range_deg);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    apply_acquisition_distortion_with(sample, sign * theta, config.axis_scale_ratio)
}

pub fn apply_acquisition_distortion_with(sample: &Sample, theta_deg: f64, ratio: f64) -> Result<Sample> {
    let (cx, cy) = centre(sample);
    warp_sample(sample, &distortion_matrix(theta_deg, ratio, cx, cy))
}

/// Rotation after horizontal shear after isotropic scaling, about the image centre.
pub fn affine_matrix(scale: f64, rot_deg: f64, shear_deg: f64, cx: f64, cy: f64) -> Homography {
    let (s, c) = rot_deg.to_radians().sin_cos();
    let k = shear_deg.to_radians().tan();
    // R * Sh * (scale I)
    let m = [[scale * c, scale * (c * k - s)], [scale * s, scale * (s * k + c)]];
    Homography::about(m, cx, cy)
}

pub fn apply_standard_affine(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let scale = uniform(rng, config.affine_scale_range);
    let rot = uniform(rng, config.affine_rot_range_deg);
    let shear = uniform(rng, config.affine_shear_range_deg);
    apply_standard_affine_with(sample, scale, rot, shear)
}

pub fn apply_standard_affine_with(sample: &Sample, scale: f64, rot_deg: f64, shear_deg: f64) -> Result<Sample> {
    let (cx, cy) = centre(sample);
    warp_sample(sample, &affine_matrix(scale, rot_deg, shear_deg, cx, cy))
}

/// Corner offsets `(dx, dy)` for top-left, top-right, bottom-right, bottom-left.
pub type CornerOffsets = [(f64, f64); 4];

fn corners(sample: &Sample) -> [(f64, f64); 4] {
    let (x1, y1) = (sample.width as f64 - 1.0, sample.height as f64 - 1.0);
    [(0.0, 0.0), (x1, 0.0), (x1, y1), (0.0, y1)]
}

fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let cross = |i: usize| {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0)
    };
    let signs: Vec<f64> = (0..4).map(cross).collect();
    signs.iter().all(|&s| s > 1e-9) || signs.iter().all(|&s| s < -1e-9)
}

pub fn perspective_matrix(sample: &Sample, offsets: &CornerOffsets) -> Result<Homography> {
    let src = corners(sample);
    let mut dst = src;
    for (d, o) in dst.iter_mut().zip(offsets) {
        d.0 += o.0;
        d.1 += o.1;
    }
    if !is_convex(&dst) {
        return Err(Error::Invalid("perspective corners are not a convex quadrilateral".into()));
    }
    Homography::from_correspondences(src, dst)
}

pub fn apply_perspective(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let (sx, sy) = (config.perspective_scale * sample.width as f64, config.perspective_scale * sample.height as f64);
    loop {
        let mut offsets = [(0.0, 0.0); 4];
        for o in &mut offsets {
            *o = (uniform(rng, [-sx, sx]), uniform(rng, [-sy, sy]));
        }
        match perspective_matrix(sample, &offsets) {
            Ok(h) => return warp_sample(sample, &h),
            Err(Error::Invalid(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

pub fn apply_perspective_with(sample: &Sample, offsets: &CornerOffsets) -> Result<Sample> {
    warp_sample(sample, &perspective_matrix(sample, offsets)?)
}

pub fn apply_flip(sample: &Sample) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for r in 0..h {
        out.image[r * w..(r + 1) * w].reverse();
        out.region[r * w..(r + 1) * w].reverse();
        out.vessel[r * w..(r + 1) * w].reverse();
    }
    out.set_fovea(sample.fovea().map(|f| crate::phantom::Fovea { col: w - 1 - f.col, row: f.row }));
    out
}

// ---------------------------------------------------------------- photometric

pub fn apply_photometric(image: &[f32], config: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    let b = uniform(rng, config.brightness_contrast_range);
    let c = uniform(rng, config.brightness_contrast_range);
    apply_photometric_with(image, b, c)
}

/// Brightness `clip(b I)` followed by contrast `clip((I - mean) c + mean)`.
pub fn apply_photometric_with(image: &[f32], brightness: f64, contrast: f64) -> Vec<f32> {
    let bright: Vec<f64> = image.iter().map(|&v| (v as f64 * brightness).clamp(0.0, 1.0)).collect();
    let mean = bright.iter().sum::<f64>() / bright.len().max(1) as f64;
    bright.iter().map(|&v| ((v - mean) * contrast + mean).clamp(0.0, 1.0) as f32).collect()
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricChoice {
    Affine,
    Distortion,
}

/// Which augmentations fire for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Gates {
    pub geometric: Option<GeometricChoice>,
    pub flip: bool,
    pub perspective: bool,
    pub photometric: bool,
    pub shadow: bool,
    pub speckle: bool,
}

/// Draws every gate independently, in a fixed order.
pub fn draw_gates(config: &AugmentConfig, rng: &mut impl Rng) -> Gates {
    let mut coin = |p: f64| rng.random::<f64>() < p;
    let flip = coin(config.p_flip);
    let perspective = coin(config.p_perspective);
    let photometric = coin(config.p_photometric);
    let geometric_fired = coin(config.p_geometric);
    let affine = coin(config.p_affine_vs_distortion);
    let speckle = coin(config.p_speckle);
    let shadow = coin(config.p_shadow);
    let domain = config.domain_specific;
    Gates {
        geometric: geometric_fired.then_some({
            if affine || !domain {
                GeometricChoice::Affine
            } else {
                GeometricChoice::Distortion
            }
        }),
        flip,
        perspective,
        photometric,
        shadow: shadow && domain,
        speckle: speckle && domain,
    }
}

/// Full pipeline: geometric, flip, perspective, photometric, shadow, speckle.
pub fn compose_pipeline(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    config.validate()?;
    let gates = draw_gates(config, rng);
    let mut s = match gates.geometric {
        Some(GeometricChoice::Affine) => apply_standard_affine(sample, config, rng)?,
        Some(GeometricChoice::Distortion) => apply_acquisition_distortion(sample, config, rng)?,
        None => sample.clone(),
    };
    if gates.flip {
        s = apply_flip(&s);
    }
    if gates.perspective {
        s = apply_perspective(&s, config, rng)?;
    }
    if gates.photometric {
        s.image = apply_photometric(&s.image, config, rng);
    }
    // A warp can push the whole choroid out of frame; there is nothing to anchor a shadow to then.
    if gates.shadow && s.region.contains(&1) {
        s = apply_vessel_shadow(&s, config, rng)?;
    }
    if gates.speckle {
        s.image = apply_speckle(&s.image, config, rng);
    }
    Ok(s)
}
