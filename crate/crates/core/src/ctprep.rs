//! CT slice preprocessing: isolate brain tissue by threshold segmentation and
//! connected-component screening, then standardize intensities.
//!
//! Pipeline per slice: bone (near-saturated) pixels are zeroed, tissue
//! components below a minimum area are dropped as speckle, and the largest
//! remaining tissue component (plus components lying inside its bounding box)
//! is kept. Standardization statistics are computed on the training fold
//! only, over tissue pixels, and applied as (p − mean) / std.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{DType, Tensor};

/// Grayscale image with intensities in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "image {width}×{height} does not match {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("pixel intensity outside [0, 1]".into()));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Load an 8-bit grayscale PNG, mapping 0..255 to [0, 1].
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(Error::Image)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        GrayImage::new(w, h, pixels)
    }

    /// Write as 8-bit grayscale PNG (values quantized by round(p·255)).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("sized buffer");
        buf.save(path).map_err(Error::Image)
    }
}

/// One bit per pixel, dimensions matching the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask { width, height, bits: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Inclusive bounding box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    /// Whether `other` lies entirely within this box.
    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// An 8-connected foreground region.
#[derive(Clone, Debug)]
pub struct Component {
    pub label: u32,
    pub pixel_count: usize,
    pub bbox: BBox,
    /// Flat row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
}

/// Preprocessing thresholds. Defaults assume brain-window 8-bit exports where
/// the skull is near-saturated.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PrepConfig {
    pub t_bone: f64,
    pub t_tissue_low: f64,
    pub min_area_fraction: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { t_bone: 0.95, t_tissue_low: 0.06, min_area_fraction: 0.005 }
    }
}

/// Split an image into bone (p ≥ t_bone) and tissue (t_tissue_low ≤ p < t_bone)
/// masks. The two masks are disjoint by construction.
pub fn threshold_segment(
    img: &GrayImage,
    t_bone: f64,
    t_tissue_low: f64,
) -> Result<(BinaryMask, BinaryMask)> {
    if !(0.0..=1.0).contains(&t_bone) || !(0.0..=1.0).contains(&t_tissue_low) || t_tissue_low >= t_bone
    {
        return Err(Error::Invalid(format!(
            "threshold ordering violated: need 0 ≤ t_tissue_low < t_bone ≤ 1, got {t_tissue_low} / {t_bone}"
        )));
    }
    let mut bone = BinaryMask::new(img.width, img.height);
    let mut tissue = BinaryMask::new(img.width, img.height);
    for (i, &p) in img.pixels.iter().enumerate() {
        if p >= t_bone {
            bone.bits[i] = true;
        } else if p >= t_tissue_low {
            tissue.bits[i] = true;
        }
    }
    Ok((bone, tissue))
}

/// Label 8-connected foreground components, largest first (ties broken by
/// first pixel index, so the order is deterministic).
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut visited = vec![false; mask.bits.len()];
    let mut comps: Vec<Component> = Vec::new();

    for seed in 0..mask.bits.len() {
        if !mask.bits[seed] || visited[seed] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut stack = vec![seed];
        visited[seed] = true;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = stack.pop() {
            pixels.push(idx);
            let (x, y) = (idx % mask.width, idx / mask.width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let nidx = ny as usize * mask.width + nx as usize;
                    if mask.bits[nidx] && !visited[nidx] {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        pixels.sort_unstable();
        comps.push(Component {
            label: 0,
            pixel_count: pixels.len(),
            bbox: BBox { x0, y0, x1, y1 },
            pixels,
        });
    }

    comps.sort_by(|a, b| {
        b.pixel_count
            .cmp(&a.pixel_count)
            .then_with(|| a.pixels[0].cmp(&b.pixels[0]))
    });
    for (i, c) in comps.iter_mut().enumerate() {
        c.label = i as u32 + 1;
    }
    comps
}

/// Zero bone and everything outside the retained brain-tissue region: the
/// largest above-minimum-area tissue component plus any components whose
/// bounding box lies inside its bounding box. Idempotent.
pub fn strip_nonbrain(img: &GrayImage, cfg: &PrepConfig) -> Result<GrayImage> {
    let (_bone, tissue) = threshold_segment(img, cfg.t_bone, cfg.t_tissue_low)?;
    let comps = connected_components(&tissue);
    let min_area = cfg.min_area_fraction * (img.width * img.height) as f64;
    let kept: Vec<&Component> = comps
        .iter()
        .filter(|c| c.pixel_count as f64 >= min_area)
        .collect();
    let Some(largest) = kept.first() else {
        return Err(Error::EmptyBrain);
    };

    let mut out = vec![0.0; img.pixels.len()];
    for c in &kept {
        if c.label == largest.label || largest.bbox.contains(&c.bbox) {
            for &idx in &c.pixels {
                out[idx] = img.pixels[idx];
            }
        }
    }
    GrayImage::new(img.width, img.height, out)
}

/// Mean / standard deviation pair used for standardization.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
}

/// Population statistics over tissue (nonzero) pixels of already-stripped
/// images. Background is excluded so the dominant zero region cannot skew
/// the result.
pub fn tissue_stats(images: &[GrayImage]) -> Result<PixelStats> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for img in images {
        for &p in &img.pixels {
            if p > 0.0 {
                n += 1;
                sum += p;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyBrain);
    }
    let mean = sum / n as f64;
    let mut var = 0.0;
    for img in images {
        for &p in &img.pixels {
            if p > 0.0 {
                var += (p - mean) * (p - mean);
            }
        }
    }
    let std = (var / n as f64).sqrt();
    if std < 1e-6 {
        return Err(Error::DegenerateStd(std));
    }
    Ok(PixelStats { mean, std })
}

/// Standardize every pixel as (p − mean) / std into a [1, H, W] tensor.
pub fn standardize(img: &GrayImage, mean: f64, std: f64, dtype: DType) -> Result<Tensor> {
    if std < 1e-6 {
        return Err(Error::DegenerateStd(std));
    }
    let data: Vec<f64> = img.pixels.iter().map(|p| (p - mean) / std).collect();
    Tensor::from_vec(data, &[1, img.height, img.width], dtype)
}

/// Sidecar format: `mean=<f64>` and `std=<f64>`, one per line.
pub fn write_stats_sidecar(path: &Path, stats: &PixelStats) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "mean={}", stats.mean).unwrap();
    writeln!(text, "std={}", stats.std).unwrap();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_stats_sidecar(path: &Path) -> Result<PixelStats> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mean = None;
    let mut std = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("mean=") {
            mean = v.trim().parse::<f64>().ok();
        } else if let Some(v) = line.strip_prefix("std=") {
            std = v.trim().parse::<f64>().ok();
        }
    }
    match (mean, std) {
        (Some(mean), Some(std)) => Ok(PixelStats { mean, std }),
        _ => Err(Error::Invalid(format!(
            "stats sidecar {} missing mean= or std= line",
            path.display()
        ))),
    }
}
