//! Segmentation and measurement metrics, dataset evaluation and throughput benchmarks.

mod bench;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::phantom::{Fovea, Sample};
use crate::tensor::ops::loss::sigmoid;
use crate::tensor::Tensor;
use crate::training::standardize;

pub use bench::{bench_throughput, BenchReport};

/// `2|A n B| / (|A| + |B|)`, 1.0 when both masks are empty.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("dice: {} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            return Err(Error::Invalid(format!("dice needs binary masks, found value {}", p.max(g))));
        }
        a += p as usize;
        b += g as usize;
        both += (p & g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// `sigmoid(logit) > threshold`, strictly.
pub fn binarize(logits: &[f32], threshold: f64) -> Vec<u8> {
    logits.iter().map(|&z| (sigmoid(z as f64) > threshold) as u8).collect()
}

/// Arg-max of a row-major map; ties go to the smallest row, then column.
/// An all-zero (or empty) map has no fovea.
pub fn fovea_locate(map: &[f64], width: usize) -> Option<Fovea> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in map.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    match best {
        Some((i, v)) if v > 0.0 && width > 0 => Some(Fovea { col: i % width, row: i / width }),
        _ => None,
    }
}

/// Fovea-centred measurement window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSpec {
    /// Total horizontal extent in micrometres.
    pub roi_width_um: f64,
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec { roi_width_um: 3000.0 }
    }
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.roi_width_um > 0.0 && self.roi_width_um.is_finite()) {
            return Err(Error::Config(format!("roi width {} um must be positive", self.roi_width_um)));
        }
        Ok(())
    }

    /// Inclusive column range within half the window of `col`, clipped to the image.
    pub fn columns(&self, col: usize, width: usize, um_per_px: f64) -> (usize, usize) {
        let half = self.roi_width_um / 2.0 / um_per_px;
        let lo = (col as f64 - half).ceil().max(0.0) as usize;
        let hi = ((col as f64 + half).floor() as usize).min(width.saturating_sub(1));
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub area_mm2: f64,
    pub thickness_um: f64,
    /// Absent when the window holds no region pixels.
    pub cvi: Option<f64>,
}

/// Area, mean thickness and vascular index inside the window around `fovea`.
///
/// Thickness averages the per-column region height over window columns
/// that contain region pixels.
pub fn region_metrics(
    region: &[u8],
    vessel: &[u8],
    height: usize,
    width: usize,
    fovea: Option<Fovea>,
    pixel_scale_um: (f64, f64),
    roi: &RoiSpec,
) -> Result<Option<Measurements>> {
    roi.validate()?;
    if region.len() != height * width || vessel.len() != region.len() {
        return Err(Error::Shape(format!("masks must have {height}x{width} elements")));
    }
    if region.iter().chain(vessel).any(|&v| v > 1) {
        return Err(Error::Invalid("region metrics need binary masks".into()));
    }
    let Some(f) = fovea else { return Ok(None) };
    let (ux, uy) = pixel_scale_um;
    let (lo, hi) = roi.columns(f.col, width, ux);
    let (mut region_px, mut vessel_px, mut columns) = (0usize, 0usize, 0usize);
    for c in lo..=hi {
        let mut col_px = 0;
        for r in 0..height {
            col_px += region[r * width + c] as usize;
            vessel_px += vessel[r * width + c] as usize;
        }
        region_px += col_px;
        columns += (col_px > 0) as usize;
    }
    Ok(Some(Measurements {
        area_mm2: region_px as f64 * ux * uy / 1e6,
        thickness_um: if columns > 0 { region_px as f64 * uy / columns as f64 } else { 0.0 },
        cvi: (region_px > 0).then(|| vessel_px as f64 / region_px as f64),
    }))
}

/// Pearson correlation; `None` for fewer than two pairs or a constant series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("pearson: {} vs {} values", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 2 {
        return Ok(None);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

pub fn mae(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Shape(format!("mae: {} vs {} values", xs.len(), ys.len())));
    }
    Ok(xs.iter().zip(ys).map(|(x, y)| (x - y).abs()).sum::<f64>() / xs.len() as f64)
}

/// Anything producing `[3, H, W]` logits (region, vessel, fovea) for a sample.
pub trait Segmenter: Sync {
    fn logits(&self, sample: &Sample) -> Result<Vec<f32>>;
}

impl Segmenter for Model<f32> {
    fn logits(&self, sample: &Sample) -> Result<Vec<f32>> {
        let x = Tensor::new(&[1, 1, sample.height, sample.width], standardize(&sample.image))?;
        let y = self.predict(&x)?;
        if y.shape()[1] != 3 {
            return Err(Error::Shape(format!("segmenter needs 3 output channels, model has {}", y.shape()[1])));
        }
        Ok(y.into_data())
    }
}

/// Emits saturated logits reproducing the ground truth.
pub struct OracleSegmenter;

const ORACLE_LOGIT: f32 = 20.0;

impl Segmenter for OracleSegmenter {
    fn logits(&self, s: &Sample) -> Result<Vec<f32>> {
        let mask = |m: &[u8]| m.iter().map(|&v| if v == 1 { ORACLE_LOGIT } else { -ORACLE_LOGIT }).collect::<Vec<_>>();
        let mut out = mask(&s.region);
        out.extend(mask(&s.vessel));
        out.extend(s.heatmap().iter().map(|&p| {
            let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
            (p / (1.0 - p)).ln() as f32
        }));
        Ok(out)
    }
}

/// Binary fovea label used for the fovea Dice.
pub fn fovea_mask(heatmap: &[f32]) -> Vec<u8> {
    heatmap.iter().map(|&p| (p > 0.5) as u8).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoveaAnchor {
    /// Ground-truth fovea column anchors both measurements.
    #[default]
    GroundTruth,
    /// Each measurement uses its own fovea.
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub roi: RoiSpec,
    pub anchor: FoveaAnchor,
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { roi: RoiSpec::default(), anchor: FoveaAnchor::GroundTruth, threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub dice_region: f64,
    pub dice_vessel: f64,
    pub dice_fovea: f64,
    pub fovea_pred: Option<[usize; 2]>,
    pub fovea_gt: Option<[usize; 2]>,
    /// Absolute (x, y) fovea error in pixels.
    pub fovea_error_px: Option<[f64; 2]>,
    pub pred: Option<Measurements>,
    pub gt: Option<Measurements>,
}

impl SampleReport {
    /// Euclidean fovea error.
    pub fn fovea_distance(&self) -> Option<f64> {
        self.fovea_error_px.map(|[x, y]| x.hypot(y))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Number of samples with both measurements present.
    pub n: usize,
    pub pearson: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    pub dice_region: f64,
    pub dice_vessel: f64,
    pub dice_fovea: f64,
    pub fovea_mae_x_px: Option<f64>,
    pub fovea_mae_y_px: Option<f64>,
    pub fovea_mean_distance_px: Option<f64>,
    pub area: Agreement,
    pub thickness: Agreement,
    pub cvi: Agreement,
    pub throughput_img_s: f64,
    pub model_size_bytes: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: Option<EvalOptions>,
    pub samples: Vec<SampleReport>,
    pub aggregate: Aggregate,
}

fn sample_report(seg: &dyn Segmenter, id: &str, s: &Sample, opts: &EvalOptions) -> Result<SampleReport> {
    let n = s.height * s.width;
    let logits = seg.logits(s)?;
    if logits.len() != 3 * n {
        return Err(Error::Shape(format!("{id}: segmenter returned {} values for 3x{}x{}", logits.len(), s.height, s.width)));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits for sample {id}")));
    }
    let region = binarize(&logits[..n], opts.threshold);
    let vessel = binarize(&logits[n..2 * n], opts.threshold);
    let fovea_bin = binarize(&logits[2 * n..], opts.threshold);
    let prob: Vec<f64> = logits[2 * n..].iter().map(|&z| sigmoid(z as f64)).collect();
    let fovea_pred = fovea_locate(&prob, s.width);
    let fovea_gt = s.fovea();
    let fovea_error_px = match (fovea_pred, fovea_gt) {
        (Some(p), Some(g)) => Some([p.col.abs_diff(g.col) as f64, p.row.abs_diff(g.row) as f64]),
        _ => None,
    };
    let pred_anchor = match opts.anchor {
        FoveaAnchor::GroundTruth => fovea_gt,
        FoveaAnchor::Predicted => fovea_pred,
    };
    let measure = |r: &[u8], v: &[u8], f| region_metrics(r, v, s.height, s.width, f, s.pixel_scale_um, &opts.roi);
    let xy = |f: Option<Fovea>| f.map(|f| [f.col, f.row]);
    Ok(SampleReport {
        id: id.to_string(),
        dice_region: dice(&region, &s.region)?,
        dice_vessel: dice(&vessel, &s.vessel)?,
        dice_fovea: dice(&fovea_bin, &fovea_mask(s.heatmap()))?,
        fovea_pred: xy(fovea_pred),
        fovea_gt: xy(fovea_gt),
        fovea_error_px,
        pred: if fovea_gt.is_some() { measure(&region, &vessel, pred_anchor)? } else { None },
        gt: measure(&s.region, &s.vessel, fovea_gt)?,
    })
}

fn agreement(samples: &[SampleReport], f: impl Fn(&Measurements) -> Option<f64>) -> Result<Agreement> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .filter_map(|s| Some((f(s.pred.as_ref()?)?, f(s.gt.as_ref()?)?)))
        .unzip();
    Ok(Agreement {
        n: xs.len(),
        pearson: pearson(&xs, &ys)?,
        mae: if xs.is_empty() { None } else { Some(mae(&xs, &ys)?) },
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(samples: &[SampleReport]) -> Result<Aggregate> {
    Ok(Aggregate {
        samples: samples.len(),
        dice_region: mean(samples.iter().map(|s| s.dice_region)).unwrap_or(0.0),
        dice_vessel: mean(samples.iter().map(|s| s.dice_vessel)).unwrap_or(0.0),
        dice_fovea: mean(samples.iter().map(|s| s.dice_fovea)).unwrap_or(0.0),
        fovea_mae_x_px: mean(samples.iter().filter_map(|s| Some(s.fovea_error_px?[0]))),
        fovea_mae_y_px: mean(samples.iter().filter_map(|s| Some(s.fovea_error_px?[1]))),
        fovea_mean_distance_px: mean(samples.iter().filter_map(SampleReport::fovea_distance)),
        area: agreement(samples, |m| Some(m.area_mm2))?,
        thickness: agreement(samples, |m| Some(m.thickness_um))?,
        cvi: agreement(samples, |m| m.cvi)?,
        throughput_img_s: 0.0,
        model_size_bytes: None,
    })
}

/// Evaluates every `(id, sample)` at its native resolution.
pub fn evaluate(seg: &dyn Segmenter, data: &[(String, Sample)], opts: &EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation dataset is empty".into()));
    }
    opts.roi.validate()?;
    let start = Instant::now();
    let samples = data
        .par_iter()
        .map(|(id, s)| sample_report(seg, id, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut aggregate = aggregate(&samples)?;
    aggregate.throughput_img_s = if elapsed > 0.0 { samples.len() as f64 / elapsed } else { 0.0 };
    Ok(EvalReport { options: Some(*opts), samples, aggregate })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "id,dice_region,dice_vessel,dice_fovea,fovea_err_x_px,fovea_err_y_px,\
area_pred_mm2,area_gt_mm2,thickness_pred_um,thickness_gt_um,cvi_pred,cvi_gt";

    /// One row per sample; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            let m = |src: Option<&Measurements>, f: fn(&Measurements) -> Option<f64>| opt(src.and_then(f));
            let fields = [
                s.id.clone(),
                s.dice_region.to_string(),
                s.dice_vessel.to_string(),
                s.dice_fovea.to_string(),
                opt(s.fovea_error_px.map(|e| e[0])),
                opt(s.fovea_error_px.map(|e| e[1])),
                m(s.pred.as_ref(), |m| Some(m.area_mm2)),
                m(s.gt.as_ref(), |m| Some(m.area_mm2)),
                m(s.pred.as_ref(), |m| Some(m.thickness_um)),
                m(s.gt.as_ref(), |m| Some(m.thickness_um)),
                m(s.pred.as_ref(), |m| m.cvi),
                m(s.gt.as_ref(), |m| m.cvi),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1e-300)
    }

    #[test]
    fn dice_cases() {
        let a = vec![1u8; 100];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let mut p = vec![0u8; 200];
        let mut g = vec![0u8; 200];
        p[..100].fill(1);
        g[100..].fill(1);
        assert_eq!(dice(&p, &g).unwrap(), 0.0);
        g.fill(0);
        g[50..150].fill(1);
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        assert_eq!(dice(&g, &p).unwrap(), 0.5);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(dice(&[2], &[1]).is_err());
        assert!(dice(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize(&[0.0, 1.0, -3.0], 0.5), vec![0, 1, 0]);
    }

    #[test]
    fn fovea_ties_prefer_top_left() {
        let w = 12;
        let mut map = vec![0.0; w * 10];
        map[5 * w + 9] = 1.0;
        map[5 * w + 5] = 1.0;
        assert_eq!(fovea_locate(&map, w), Some(Fovea { col: 5, row: 5 }));
        map[3 * w + 11] = 1.0;
        assert_eq!(fovea_locate(&map, w), Some(Fovea { col: 11, row: 3 }));
        assert_eq!(fovea_locate(&[0.0; 20], 4), None);
    }

    #[test]
    fn fovea_of_gaussian_is_its_centre() {
        let s = generate_phantom(&PhantomConfig::default(), 5).unwrap();
        let map: Vec<f64> = s.heatmap().iter().map(|&v| v as f64).collect();
        assert_eq!(fovea_locate(&map, s.width), s.fovea());
    }

    #[test]
    fn rectangle_and_half_vessels() {
        let (h, w) = (300, 400);
        let mut region = vec![0u8; h * w];
        let mut vessel = vec![0u8; h * w];
        for r in 50..150 {
            for c in 100..300 {
                region[r * w + c] = 1;
                vessel[r * w + c] = (c % 2) as u8;
            }
        }
        let m = region_metrics(&region, &vessel, h, w, Some(Fovea { col: 200, row: 0 }), (10.0, 10.0), &RoiSpec::default())
            .unwrap()
            .unwrap();
        assert!(close(m.area_mm2, 2.0));
        assert!(close(m.thickness_um, 1000.0));
        assert!(close(m.cvi.unwrap(), 0.5));
        let none = region_metrics(&region, &vessel, h, w, None, (10.0, 10.0), &RoiSpec::default()).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn horizontal_flip_leaves_measurements_unchanged() {
        let s = generate_phantom(&PhantomConfig::default(), 9).unwrap();
        let (h, w) = (s.height, s.width);
        let flip = |m: &[u8]| (0..h * w).map(|i| m[(i / w) * w + (w - 1 - i % w)]).collect::<Vec<_>>();
        let f = s.fovea().unwrap();
        let roi = RoiSpec { roi_width_um: 1000.0 };
        let a = region_metrics(&s.region, &s.vessel, h, w, Some(f), s.pixel_scale_um, &roi).unwrap();
        let flipped = Some(Fovea { col: w - 1 - f.col, row: f.row });
        let b = region_metrics(&flip(&s.region), &flip(&s.vessel), h, w, flipped, s.pixel_scale_um, &roi).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pearson_and_mae_cases() {
        let xs = [1.0, 2.0, 3.0];
        assert!(close(pearson(&xs, &xs.map(|x| 2.0 * x + 1.0)).unwrap().unwrap(), 1.0));
        assert!(close(pearson(&xs, &xs.map(|x| -x)).unwrap().unwrap(), -1.0));
        let ys = [1.0, 2.0, 4.0];
        // r = 3 / sqrt(2 * 14 / 3)
        assert!(close(pearson(&xs, &ys).unwrap().unwrap(), 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()));
        assert!((pearson(&xs, &ys).unwrap().unwrap() - 0.981981).abs() < 1e-6);
        assert!(close(mae(&xs, &ys).unwrap(), 1.0 / 3.0));
        assert_eq!(pearson(&[1.0], &[2.0]).unwrap(), None);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]).unwrap(), None);
    }

    #[test]
    fn oracle_scores_perfectly() {
        let cfg = PhantomConfig::default();
        let data: Vec<_> = (0..4).map(|i| (format!("s{i}"), generate_phantom(&cfg, i).unwrap())).collect();
        let report = evaluate(&OracleSegmenter, &data, &EvalOptions::default()).unwrap();
        assert_eq!(report.samples.len(), 4);
        let a = &report.aggregate;
        assert_eq!((a.dice_region, a.dice_vessel, a.dice_fovea), (1.0, 1.0, 1.0));
        assert_eq!(a.fovea_mean_distance_px, Some(0.0));
        for agr in [a.area, a.thickness, a.cvi] {
            assert_eq!(agr.n, 4);
            assert_eq!(agr.mae, Some(0.0));
            assert!(close(agr.pearson.unwrap(), 1.0));
        }
        assert_eq!(report.to_csv().lines().count(), 5);
        assert!(evaluate(&OracleSegmenter, &[], &EvalOptions::default()).is_err());
    }
}
