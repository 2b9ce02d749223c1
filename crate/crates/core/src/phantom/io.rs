//! On-disk sample layout: `<id>_image.png`, `<id>_region.png`,
//! `<id>_vessel.png` (8-bit grayscale) and `<id>_meta.json`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Fovea, Sample, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// `[col, row]` or null.
    pub fovea_xy: Option<[usize; 2]>,
    pub pixel_scale_um: [f64; 2],
    pub height: usize,
    pub width: usize,
    pub split: Split,
    pub seed: u64,
}

fn path_for(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}"))
}

pub(crate) fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Validation { path: path.to_path_buf(), reason: e.to_string() };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(pixels).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

pub(crate) fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let invalid = |reason: String| Error::Validation { path: path.to_path_buf(), reason };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| invalid(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| invalid("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| invalid(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(invalid(format!("expected 8-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

fn quantise(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_sample(sample: &Sample, dir: &Path, id: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (sample.width, sample.height);
    let image: Vec<u8> = sample.image.iter().map(|&v| quantise(v)).collect();
    let region: Vec<u8> = sample.region.iter().map(|&v| v * 255).collect();
    let vessel: Vec<u8> = sample.vessel.iter().map(|&v| v * 255).collect();
    write_gray_png(&path_for(dir, id, "image.png"), w, h, &image)?;
    write_gray_png(&path_for(dir, id, "region.png"), w, h, &region)?;
    write_gray_png(&path_for(dir, id, "vessel.png"), w, h, &vessel)?;
    let meta = SampleMeta {
        fovea_xy: sample.fovea().map(|f| [f.col, f.row]),
        pixel_scale_um: [sample.pixel_scale_um.0, sample.pixel_scale_um.1],
        height: h,
        width: w,
        split: sample.split,
        seed: sample.seed,
    };
    let meta_path = path_for(dir, id, "meta.json");
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
}

fn read_mask(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let (mw, mh, px) = read_gray_png(path)?;
    if (mw, mh) != (w, h) {
        return Err(Error::Validation {
            path: path.to_path_buf(),
            reason: format!("mask is {mw}x{mh}, metadata says {w}x{h}"),
        });
    }
    px.into_iter()
        .map(|v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::Validation {
                path: path.to_path_buf(),
                reason: format!("mask value {other} is not 0 or 255"),
            }),
        })
        .collect()
}

pub fn read_sample(dir: &Path, id: &str) -> Result<Sample> {
    let meta_path = path_for(dir, id, "meta.json");
    if !meta_path.exists() {
        return Err(Error::Missing(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Validation { path: meta_path.clone(), reason: e.to_string() })?;
    let (h, w) = (meta.height, meta.width);

    let image_path = path_for(dir, id, "image.png");
    let (iw, ih, px) = read_gray_png(&image_path)?;
    if (iw, ih) != (w, h) {
        return Err(Error::Validation { path: image_path, reason: format!("image is {iw}x{ih}, metadata says {w}x{h}") });
    }
    let image = px.into_iter().map(|v| v as f32 / 255.0).collect();
    let region = read_mask(&path_for(dir, id, "region.png"), h, w)?;
    let vessel = read_mask(&path_for(dir, id, "vessel.png"), h, w)?;
    if let Some([c, r]) = meta.fovea_xy {
        if c >= w || r >= h {
            return Err(Error::Validation { path: meta_path, reason: format!("fovea ({c}, {r}) outside {w}x{h}") });
        }
    }
    let fovea = meta.fovea_xy.map(|[col, row]| Fovea { col, row });
    let mut sample = Sample::new(h, w, image, region, vessel, fovea, (meta.pixel_scale_um[0], meta.pixel_scale_um[1]))?;
    sample.split = meta.split;
    sample.seed = meta.seed;
    sample.validate().map_err(|e| Error::Validation { path: dir.join(id), reason: e.to_string() })?;
    Ok(sample)
}

/// Sample ids in `dir`, sorted, discovered from `*_meta.json` files.
pub fn list_samples(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_meta.json")).map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Every sample in `dir` as `(id, sample)`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Sample)>> {
    list_samples(dir)?
        .into_iter()
        .map(|id| {
            let s = read_sample(dir, &id)?;
            Ok((id, s))
        })
        .collect()
}
