//! Synthetic OCT-like B-scans with analytic ground truth.
//!
//! A phantom is a stack of horizontal bands, top to bottom: vitreous, retina
//! (with a Gaussian dip in its inner surface marking the fovea), a thin
//! hyperreflective RPE line, the choroid (region mask) carrying dark elliptic
//! vessels (vessel mask), and the sclera.

mod io;

pub use io::{list_samples, load_dataset, read_sample, write_sample, SampleMeta};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the fovea label Gaussian, in pixels.
pub const FOVEA_SIGMA_PX: f64 = 30.0;

pub const VITREOUS: f32 = 0.05;
pub const RETINA: f32 = 0.65;
pub const RPE: f32 = 0.95;
pub const CHOROID: f32 = 0.45;
pub const VESSEL: f32 = 0.15;
pub const SCLERA: f32 = 0.30;

/// Pixel coordinate of the fovea.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fovea {
    pub col: usize,
    pub row: usize,
}

/// Label used for scans without a fovea.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentFoveaLabel {
    /// All-zero heatmap.
    #[default]
    Zero,
    /// Gaussian centred on pixel (0, 0).
    GaussianAtOrigin,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One B-scan with its labels. Planes are row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Intensities in [0, 1].
    pub image: Vec<f32>,
    /// Choroid region, values in {0, 1}.
    pub region: Vec<u8>,
    /// Choroid vessels, values in {0, 1}, contained in `region`.
    pub vessel: Vec<u8>,
    fovea: Option<Fovea>,
    heatmap: Vec<f32>,
    /// (horizontal, vertical) micrometres per pixel.
    pub pixel_scale_um: (f64, f64),
    pub absent_label: AbsentFoveaLabel,
    pub split: Split,
    pub seed: u64,
}

impl Sample {
    pub fn new(
        height: usize,
        width: usize,
        image: Vec<f32>,
        region: Vec<u8>,
        vessel: Vec<u8>,
        fovea: Option<Fovea>,
        pixel_scale_um: (f64, f64),
    ) -> Result<Self> {
        let n = height * width;
        if image.len() != n || region.len() != n || vessel.len() != n {
            return Err(Error::Shape(format!("sample planes must have {height}x{width} elements")));
        }
        let mut s = Sample {
            height,
            width,
            image,
            region,
            vessel,
            fovea: None,
            heatmap: Vec::new(),
            pixel_scale_um,
            absent_label: AbsentFoveaLabel::Zero,
            split: Split::Train,
            seed: 0,
        };
        s.set_fovea(fovea);
        Ok(s)
    }

    pub fn fovea(&self) -> Option<Fovea> {
        self.fovea
    }

    pub fn heatmap(&self) -> &[f32] {
        &self.heatmap
    }

    /// Moves the fovea and regenerates the heatmap. Coordinates outside the
    /// frame mark the fovea absent.
    pub fn set_fovea(&mut self, fovea: Option<Fovea>) {
        self.fovea = fovea.filter(|f| f.col < self.width && f.row < self.height);
        self.heatmap = fovea_heatmap_with(self.fovea, FOVEA_SIGMA_PX, self.height, self.width, self.absent_label);
    }

    /// Sets the fovea from continuous coordinates, rounding to the nearest pixel.
    pub fn set_fovea_f64(&mut self, col: f64, row: f64) {
        let (c, r) = (col.round(), row.round());
        let inside = c >= 0.0 && r >= 0.0 && c < self.width as f64 && r < self.height as f64;
        self.set_fovea(inside.then_some(Fovea { col: c as usize, row: r as usize }));
    }

    pub fn set_absent_label(&mut self, label: AbsentFoveaLabel) {
        self.absent_label = label;
        self.set_fovea(self.fovea);
    }

    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.image[row * self.width + col]
    }

    /// Checks the structural invariants: value ranges, binarity, vessel within region.
    pub fn validate(&self) -> Result<()> {
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values outside [0, 1]".into()));
        }
        if self.region.iter().chain(&self.vessel).any(|&v| v > 1) {
            return Err(Error::Invalid("masks must be binary".into()));
        }
        if self.vessel.iter().zip(&self.region).any(|(&v, &r)| v > r) {
            return Err(Error::Invalid("vessel mask extends outside the region mask".into()));
        }
        Ok(())
    }
}

/// Peak-normalised isotropic Gaussian centred on `fovea`; zeros when absent.
pub fn fovea_heatmap(fovea: Option<Fovea>, sigma_px: f64, height: usize, width: usize) -> Vec<f32> {
    fovea_heatmap_with(fovea, sigma_px, height, width, AbsentFoveaLabel::Zero)
}

pub fn fovea_heatmap_with(
    fovea: Option<Fovea>,
    sigma_px: f64,
    height: usize,
    width: usize,
    absent: AbsentFoveaLabel,
) -> Vec<f32> {
    let centre = match (fovea, absent) {
        (Some(f), _) => f,
        (None, AbsentFoveaLabel::Zero) => return vec![0.0; height * width],
        (None, AbsentFoveaLabel::GaussianAtOrigin) => Fovea { col: 0, row: 0 },
    };
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let gx: Vec<f64> = (0..width).map(|c| (-((c as f64 - centre.col as f64).powi(2)) * inv).exp()).collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let gy = (-((r as f64 - centre.row as f64).powi(2)) * inv).exp();
        out.extend(gx.iter().map(|&g| (g * gy) as f32));
    }
    out
}

/// Inclusive numeric range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy + std::fmt::Debug> Range<T> {
    pub const fn new(min: T, max: T) -> Self {
        Range { min, max }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!("{name}: empty range {:?}..={:?}", self.min, self.max)));
        }
        Ok(())
    }
}

impl Range<f64> {
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

impl Range<usize> {
    fn draw(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub pixel_scale_um: (f64, f64),
    /// Row of the choroid's upper boundary at the shallowest column.
    pub choroid_top: Range<f64>,
    /// Vertical extent of the choroid in pixels, per column.
    pub choroid_thickness: Range<usize>,
    /// Extra depth of the choroid top at the image edges (bowl curvature).
    pub curvature_px: Range<f64>,
    pub retina_thickness: Range<f64>,
    pub rpe_thickness_px: usize,
    pub vessel_count: Range<usize>,
    /// Horizontal semi-axis of vessel ellipses.
    pub vessel_radius: Range<f64>,
    /// Vertical / horizontal semi-axis ratio.
    pub vessel_aspect: Range<f64>,
    pub fovea_dip_depth: Range<f64>,
    pub fovea_dip_width: Range<f64>,
    /// Fovea column as a fraction of the width.
    pub fovea_col_fraction: Range<f64>,
    pub fovea_absent_prob: f64,
    pub absent_fovea_label: AbsentFoveaLabel,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 256,
            width: 256,
            pixel_scale_um: (10.0, 10.0),
            choroid_top: Range::new(105.0, 130.0),
            choroid_thickness: Range::new(40, 75),
            curvature_px: Range::new(0.0, 15.0),
            retina_thickness: Range::new(45.0, 65.0),
            rpe_thickness_px: 3,
            vessel_count: Range::new(6, 14),
            vessel_radius: Range::new(5.0, 12.0),
            vessel_aspect: Range::new(0.5, 0.9),
            fovea_dip_depth: Range::new(12.0, 25.0),
            fovea_dip_width: Range::new(12.0, 22.0),
            fovea_col_fraction: Range::new(0.35, 0.65),
            fovea_absent_prob: 0.0,
            absent_fovea_label: AbsentFoveaLabel::Zero,
            noise_amplitude: 0.05,
            seed: 0,
        }
    }
}

const MARGIN_PX: f64 = 4.0;

impl PhantomConfig {
    /// Rejects configurations whose bands cannot fit for every range extreme.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("phantom size must be positive".into()));
        }
        self.choroid_top.check("choroid_top")?;
        self.choroid_thickness.check("choroid_thickness")?;
        self.curvature_px.check("curvature_px")?;
        self.retina_thickness.check("retina_thickness")?;
        self.vessel_count.check("vessel_count")?;
        self.vessel_radius.check("vessel_radius")?;
        self.vessel_aspect.check("vessel_aspect")?;
        self.fovea_dip_depth.check("fovea_dip_depth")?;
        self.fovea_dip_width.check("fovea_dip_width")?;
        self.fovea_col_fraction.check("fovea_col_fraction")?;
        if self.choroid_thickness.min == 0 {
            return Err(Error::Config("choroid thickness must be at least one pixel".into()));
        }
        if !(0.0..=1.0).contains(&self.fovea_absent_prob)
            || self.fovea_col_fraction.min < 0.0
            || self.fovea_col_fraction.max > 1.0
        {
            return Err(Error::Config("probabilities and fractions must lie in [0, 1]".into()));
        }
        if self.vessel_radius.min <= 0.0 || self.vessel_aspect.min <= 0.0 || self.curvature_px.min < 0.0 {
            return Err(Error::Config("vessel geometry and curvature must be positive".into()));
        }
        let inner = self.choroid_top.min - self.rpe_thickness_px as f64 - self.retina_thickness.max;
        if inner < MARGIN_PX {
            return Err(Error::Config(format!(
                "retina does not fit above the choroid: inner surface reaches row {inner:.1}"
            )));
        }
        if self.fovea_dip_depth.max >= self.retina_thickness.min {
            return Err(Error::Config("fovea dip deeper than the thinnest retina".into()));
        }
        let bottom = self.choroid_top.max + self.curvature_px.max + self.choroid_thickness.max as f64;
        if bottom > self.height as f64 - MARGIN_PX {
            return Err(Error::Config(format!(
                "choroid reaches row {bottom:.1}, beyond the image height {}",
                self.height
            )));
        }
        if self.pixel_scale_um.0 <= 0.0 || self.pixel_scale_um.1 <= 0.0 {
            return Err(Error::Config("pixel scale must be positive".into()));
        }
        Ok(())
    }
}

/// Geometry drawn for one phantom, exposed for tests and analytic oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    /// First choroid row of each column.
    pub choroid_top: Vec<usize>,
    /// Choroid rows per column.
    pub choroid_thickness: Vec<usize>,
    /// First retina row of each column.
    pub inner_surface: Vec<usize>,
    /// (centre col, centre row, horizontal semi-axis, vertical semi-axis).
    pub vessels: Vec<(f64, f64, f64, f64)>,
    pub fovea: Option<Fovea>,
}

pub fn draw_geometry(config: &PhantomConfig, rng: &mut impl Rng) -> Result<PhantomGeometry> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let wf = w as f64;

    let top0 = config.choroid_top.draw(rng);
    let curvature = config.curvature_px.draw(rng);
    let t_a = config.choroid_thickness.draw(rng) as f64;
    let t_b = config.choroid_thickness.draw(rng) as f64;
    let (t_lo, t_hi) = (t_a.min(t_b), t_a.max(t_b));
    let t_period = rng.random_range(0.5..2.0) * wf;
    let t_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let retina = config.retina_thickness.draw(rng);

    let has_fovea = rng.random::<f64>() >= config.fovea_absent_prob;
    let fovea_col = (config.fovea_col_fraction.draw(rng) * (wf - 1.0)).round();
    let dip_depth = config.fovea_dip_depth.draw(rng);
    let dip_width = config.fovea_dip_width.draw(rng);

    let mut choroid_top = Vec::with_capacity(w);
    let mut choroid_thickness = Vec::with_capacity(w);
    let mut inner_surface = Vec::with_capacity(w);
    for c in 0..w {
        let u = (c as f64 - (wf - 1.0) / 2.0) / ((wf - 1.0) / 2.0).max(1.0);
        let top = (top0 + curvature * u * u).round();
        let wave = 0.5 + 0.5 * (std::f64::consts::TAU * c as f64 / t_period + t_phase).sin();
        let thick = (t_lo + (t_hi - t_lo) * wave).round() as usize;
        let thick = thick.clamp(config.choroid_thickness.min, config.choroid_thickness.max);
        let dip = if has_fovea {
            dip_depth * (-(c as f64 - fovea_col).powi(2) / (2.0 * dip_width * dip_width)).exp()
        } else {
            0.0
        };
        let inner = (top - config.rpe_thickness_px as f64 - retina + dip).round();
        choroid_top.push(top as usize);
        choroid_thickness.push(thick.min(h - top as usize));
        inner_surface.push(inner.max(0.0) as usize);
    }

    let fovea = has_fovea.then(|| {
        let col = fovea_col as usize;
        Fovea { col, row: inner_surface[col] }
    });

    let n_vessels = config.vessel_count.draw(rng);
    let mut vessels = Vec::with_capacity(n_vessels);
    for _ in 0..n_vessels {
        let cx = rng.random_range(0.0..wf);
        let col = (cx as usize).min(w - 1);
        let a = config.vessel_radius.draw(rng);
        let b = a * config.vessel_aspect.draw(rng);
        let top = choroid_top[col] as f64;
        let thick = choroid_thickness[col] as f64;
        // Centre within the band; large vessels may be clipped by its edges.
        let cy = top + rng.random_range(0.15..0.85) * thick;
        vessels.push((cx, cy, a, b));
    }
    Ok(PhantomGeometry { choroid_top, choroid_thickness, inner_surface, vessels, fovea })
}

/// Rasterises a geometry into a noise-free sample.
pub fn render(config: &PhantomConfig, geom: &PhantomGeometry) -> Result<Sample> {
    let (h, w) = (config.height, config.width);
    let mut image = vec![0.0f32; h * w];
    let mut region = vec![0u8; h * w];
    let mut vessel = vec![0u8; h * w];
    let rpe = config.rpe_thickness_px;
    for c in 0..w {
        let top = geom.choroid_top[c];
        let bottom = top + geom.choroid_thickness[c];
        let inner = geom.inner_surface[c];
        for r in 0..h {
            let v = if r < inner {
                VITREOUS
            } else if r + rpe < top {
                RETINA
            } else if r < top {
                RPE
            } else if r < bottom {
                region[r * w + c] = 1;
                CHOROID
            } else {
                SCLERA
            };
            image[r * w + c] = v;
        }
    }
    for &(cx, cy, a, b) in &geom.vessels {
        let r0 = (cy - b).floor().max(0.0) as usize;
        let r1 = ((cy + b).ceil() as usize).min(h - 1);
        let c0 = (cx - a).floor().max(0.0) as usize;
        let c1 = ((cx + a).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dx, dy) = ((c as f64 - cx) / a, (r as f64 - cy) / b);
                let idx = r * w + c;
                if dx * dx + dy * dy <= 1.0 && region[idx] == 1 {
                    vessel[idx] = 1;
                    image[idx] = VESSEL;
                }
            }
        }
    }
    let mut sample = Sample::new(h, w, image, region, vessel, None, config.pixel_scale_um)?;
    sample.absent_label = config.absent_fovea_label;
    sample.set_fovea(geom.fovea);
    Ok(sample)
}

/// Deterministic phantom for `(config, seed)`.
pub fn generate_phantom(config: &PhantomConfig, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = draw_geometry(config, &mut rng)?;
    let mut sample = render(config, &geom)?;
    if config.noise_amplitude > 0.0 {
        let noise = Normal::new(0.0, config.noise_amplitude).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut sample.image {
            *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    sample.seed = seed;
    Ok(sample)
}
