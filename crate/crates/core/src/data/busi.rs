//! Reading and writing the BUSI directory layout:
//!
//! ```text
//! root/
//!   benign/     X.png  X_mask.png  [X_mask_1.png …]
//!   malignant/  …
//!   normal/     …
//! ```
//!
//! Images become grayscale in `[0, 1]`, resized bilinearly; masks are unioned,
//! resized by nearest neighbour and re-binarized at 0.5.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma};

use super::{Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loaded samples plus any non-fatal problems found on the way.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// A decoded grayscale raster, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayPlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Largest accepted source image side.
const MAX_SIDE: u32 = 16_384;

/// Decodes an image file's bytes to grayscale `[0, 1]`.
pub fn decode_gray(bytes: &[u8]) -> std::result::Result<GrayPlane, String> {
    let reader =
        image::ImageReader::new(std::io::Cursor::new(bytes)).with_guessed_format().map_err(|e| e.to_string())?;
    let (w, h) = reader.into_dimensions().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(format!("unsupported image dimensions {w}x{h}"));
    }
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let gray = img.to_luma16();
    Ok(GrayPlane {
        width: gray.width() as usize,
        height: gray.height() as usize,
        data: gray.as_raw().iter().map(|&v| f64::from(v) / 65535.0).collect(),
    })
}

/// Decodes and resizes an image to `size × size` with bilinear filtering.
pub fn decode_image(bytes: &[u8], size: usize) -> std::result::Result<Vec<f64>, String> {
    let plane = decode_gray(bytes)?;
    Ok(resize_bilinear(&plane, size, size))
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64)
}

/// Half-pixel-centre bilinear resize with edge clamping. Same-size resizes are
/// exact copies.
pub fn resize_bilinear(src: &GrayPlane, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_w * out_h);
    let at = |x: usize, y: usize| src.data[y * src.width + x];
    for oy in 0..out_h {
        let sy = source_coord(oy, src.height, out_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let ty = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = source_coord(ox, src.width, out_w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src.width - 1);
            let tx = sx - x0 as f64;
            let top = at(x0, y0) + tx * (at(x1, y0) - at(x0, y0));
            let bottom = at(x0, y1) + tx * (at(x1, y1) - at(x0, y1));
            out.push(top + ty * (bottom - top));
        }
    }
    out
}

/// Nearest-neighbour resize.
pub fn resize_nearest(src: &GrayPlane, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let sy = ((oy * src.height) / out_h).min(src.height - 1);
        for ox in 0..out_w {
            let sx = ((ox * src.width) / out_w).min(src.width - 1);
            out.push(src.data[sy * src.width + sx]);
        }
    }
    out
}

fn binarize(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = if *x >= 0.5 { 1.0 } else { 0.0 });
}

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion { path: path.to_path_buf(), reason: reason.into() }
}

fn read_plane(path: &Path) -> Result<GrayPlane> {
    let bytes = std::fs::read(path).map_err(|e| ingest_err(path, e.to_string()))?;
    decode_gray(&bytes).map_err(|e| ingest_err(path, e))
}

/// Splits a file stem into `(image stem, true)` for mask files named
/// `X_mask` or `X_mask_<n>`, or `(stem, false)` otherwise.
fn classify_stem(stem: &str) -> (&str, bool) {
    if let Some(base) = stem.strip_suffix("_mask") {
        return (base, true);
    }
    if let Some(pos) = stem.rfind("_mask_") {
        let tail = &stem[pos + "_mask_".len()..];
        if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) {
            return (&stem[..pos], true);
        }
    }
    (stem, false)
}

#[derive(Default)]
struct Entry {
    image: Option<PathBuf>,
    masks: Vec<PathBuf>,
}

fn scan_class_dir(dir: &Path) -> Result<BTreeMap<String, Entry>> {
    let read = std::fs::read_dir(dir).map_err(|e| ingest_err(dir, format!("missing class directory: {e}")))?;
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for item in read {
        let path = item.map_err(|e| ingest_err(dir, e.to_string()))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let (base, is_mask) = classify_stem(stem);
        let entry = entries.entry(base.to_string()).or_default();
        if is_mask {
            entry.masks.push(path.clone());
        } else {
            entry.image = Some(path.clone());
        }
    }
    for e in entries.values_mut() {
        e.masks.sort();
    }
    Ok(entries)
}

/// Loads a BUSI-layout directory, resizing everything to `size × size`.
/// Samples come back sorted by id (`<class>/<stem>`).
pub fn load_busi_dir(root: &Path, size: usize) -> Result<LoadReport> {
    if size == 0 {
        return Err(Error::param("target image size must be positive"));
    }
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.name());
        for (stem, entry) in scan_class_dir(&dir)? {
            let Some(image_path) = entry.image else {
                warnings.push(format!("{}: mask files without an image for {stem}", dir.display()));
                continue;
            };
            let plane = read_plane(&image_path)?;
            let image = resize_bilinear(&plane, size, size);
            let mut union: Option<GrayPlane> = None;
            for mask_path in &entry.masks {
                let mut m = read_plane(mask_path)?;
                binarize(&mut m.data);
                match union.as_mut() {
                    None => union = Some(m),
                    Some(u) => {
                        if (u.width, u.height) != (m.width, m.height) {
                            return Err(ingest_err(mask_path, "mask size differs from sibling masks"));
                        }
                        u.data.iter_mut().zip(&m.data).for_each(|(a, b)| *a = a.max(*b));
                    }
                }
            }
            let mask = match union {
                Some(u) => {
                    let mut m = resize_nearest(&u, size, size);
                    binarize(&mut m);
                    m
                }
                None => {
                    if label != Label::Normal {
                        warnings.push(format!("{}: no mask file, using an empty mask", image_path.display()));
                    }
                    vec![0.0; size * size]
                }
            };
            let empty = mask.iter().all(|&v| v == 0.0);
            if label == Label::Normal && !empty {
                warnings.push(format!("{}: normal image with a non-empty mask", image_path.display()));
            }
            samples.push(Sample {
                id: format!("{}/{stem}", label.name()),
                image: Tensor::new(&[1, size, size], image)?,
                mask: Tensor::new(&[1, size, size], mask)?,
                label,
            });
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(LoadReport { samples, warnings })
}

fn to_gray8(values: &[f64], size: usize) -> GrayImage {
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let v = values[y as usize * size + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Encodes a `[0, 1]` plane as an 8-bit grayscale PNG.
pub fn encode_png(values: &[f64], size: usize) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_gray8(values, size)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Writes samples in BUSI layout: 8-bit grayscale `X.png` and `{0,255}`
/// `X_mask.png`, where `X` is the part of the id after the class prefix.
pub fn export_busi_dir(samples: &[Sample], root: &Path) -> Result<()> {
    for label in Label::ALL {
        let dir = root.join(label.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let stem = s.id.rsplit('/').next().unwrap_or(&s.id);
        let dir = root.join(s.label.name());
        let size = s.size();
        for (path, values) in
            [(dir.join(format!("{stem}.png")), s.image.data()), (dir.join(format!("{stem}_mask.png")), s.mask.data())]
        {
            let bytes = encode_png(values, size)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
