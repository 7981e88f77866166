//! Environment images: storage, file formats, synthesis, augmentation and
//! training batch assembly.

mod batch;
mod rgbe;
mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{direction_to_pixel, direction_to_pixel_coords, Direction, Rotation};

pub use batch::{sample_training_batch, sample_training_batch_with, TrainingBatch, LOG_FLOOR};
pub use rgbe::{decode_rgbe, encode_rgbe, load_hdr, read_hdr, save_hdr, write_hdr};
pub use synth::generate_synthetic_env;

/// Equirectangular HDR raster of linear RGB radiance with an optional
/// observation mask (`true` = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentImage {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
    mask: Option<Vec<bool>>,
}

impl EnvironmentImage {
    /// Wraps row-major `pixels`, rejecting negative or non-finite radiance.
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(i) = pixels
            .iter()
            .position(|p| p.iter().any(|c| !(c.is_finite() && *c >= 0.0)))
        {
            return Err(Error::InvalidArgument(format!(
                "pixel {} has invalid radiance {:?}",
                i, pixels[i]
            )));
        }
        Ok(EnvironmentImage {
            width,
            height,
            pixels,
            mask: None,
        })
    }

    pub fn constant(width: usize, height: usize, value: [f32; 3]) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Evaluates `f(direction)` at every pixel centre.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, &Direction) -> [f32; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let d = crate::geometry::pixel_to_direction(row, col, height, width);
                pixels.push(f(row, col, &d));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Attaches an observation mask of matching dimensions.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.pixels.len() {
            return Err(Error::Shape(format!(
                "mask of {} entries for {} pixels",
                mask.len(),
                self.pixels.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[row * self.width + col])
    }

    pub fn observed_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.pixels.len(), |m| m.iter().filter(|&&b| b).count())
    }

    /// Sum of all channels of all pixels.
    pub fn total_energy(&self) -> f64 {
        self.pixels
            .iter()
            .flat_map(|p| p.iter())
            .map(|&c| c as f64)
            .sum()
    }

    /// Multiplies every pixel by `s >= 0`.
    pub fn scaled(&self, s: f32) -> Result<Self> {
        let mut out = self.clone();
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidArgument(format!("scale {s}")));
        }
        out.pixels.iter_mut().flatten().for_each(|c| *c *= s);
        Ok(out)
    }

    /// Bilinear lookup at `d` with azimuthal wrap-around, blending only the
    /// observed neighbours. `None` when no neighbour is observed.
    pub fn sample_bilinear(&self, d: &Direction) -> Option<[f64; 3]> {
        self.bilinear(d, true)
    }

    fn bilinear(&self, d: &Direction, respect_mask: bool) -> Option<[f64; 3]> {
        let observed = |row: usize, col: usize| !respect_mask || self.is_observed(row, col);
        let (r, c) = direction_to_pixel_coords(d, self.height, self.width);
        let r0 = r.floor();
        let c0 = c.floor();
        let fr = r - r0;
        let fc = c - c0;
        let clamp_row = |x: f64| (x.max(0.0) as usize).min(self.height - 1);
        let wrap_col = |x: f64| (x as i64).rem_euclid(self.width as i64) as usize;
        let rows = [clamp_row(r0), clamp_row(r0 + 1.0)];
        let cols = [wrap_col(c0), wrap_col(c0 + 1.0)];
        let mut acc = [0.0f64; 3];
        let mut total = 0.0;
        for (i, &row) in rows.iter().enumerate() {
            let wr = if i == 0 { 1.0 - fr } else { fr };
            for (j, &col) in cols.iter().enumerate() {
                let w = wr * if j == 0 { 1.0 - fc } else { fc };
                if w == 0.0 || !observed(row, col) {
                    continue;
                }
                let p = self.pixel(row, col);
                for k in 0..3 {
                    acc[k] += w * p[k] as f64;
                }
                total += w;
            }
        }
        if total <= 0.0 {
            // Every non-zero weight landed on a hidden pixel.
            let (row, col) = direction_to_pixel(d, self.height, self.width);
            if !observed(row, col) {
                return None;
            }
            let p = self.pixel(row, col);
            return Some([p[0] as f64, p[1] as f64, p[2] as f64]);
        }
        Some(acc.map(|a| a / total))
    }

    /// Applies `transform` to this image and its mask.
    pub fn augment(&self, transform: Augmentation) -> EnvironmentImage {
        let (w, h) = (self.width, self.height);
        let src_col = |col: usize| match transform {
            Augmentation::HFlip => w - 1 - col,
            Augmentation::AzRotate(k) => (col + k) % w,
        };
        let mut pixels = Vec::with_capacity(self.pixels.len());
        let mut mask = self
            .mask
            .as_ref()
            .map(|_| Vec::with_capacity(self.pixels.len()));
        for row in 0..h {
            for col in 0..w {
                let s = row * w + src_col(col);
                pixels.push(self.pixels[s]);
                if let (Some(out), Some(m)) = (mask.as_mut(), self.mask.as_ref()) {
                    out.push(m[s]);
                }
            }
        }
        EnvironmentImage {
            width: w,
            height: h,
            pixels,
            mask,
        }
    }

    /// The environment seen after rotating the world by `rotation`:
    /// `out(d) = self(R^T d)`, resampled bilinearly. Masks are carried by
    /// nearest-neighbour lookup.
    pub fn rotated(&self, rotation: &Rotation) -> EnvironmentImage {
        let inv = rotation.transpose();
        let mut pixels = Vec::with_capacity(self.pixels.len());
        let mut mask = self
            .mask
            .as_ref()
            .map(|_| Vec::with_capacity(self.pixels.len()));
        for row in 0..self.height {
            for col in 0..self.width {
                let d = crate::geometry::pixel_to_direction(row, col, self.height, self.width);
                let src = d.rotated(&inv);
                let (sr, sc) = direction_to_pixel(&src, self.height, self.width);
                let observed = self.is_observed(sr, sc);
                let value = self.bilinear(&src, false).expect("unmasked lookup");
                pixels.push(value.map(|c| c as f32));
                if let Some(m) = mask.as_mut() {
                    m.push(observed);
                }
            }
        }
        EnvironmentImage {
            width: self.width,
            height: self.height,
            pixels,
            mask,
        }
    }

    /// Nearest-neighbour resize, used to bring masks and images to a common grid.
    pub fn resized(&self, width: usize, height: usize) -> Result<EnvironmentImage> {
        EnvironmentImage::from_fn(width, height, |_, _, d| {
            let (r, c) = direction_to_pixel(d, self.height, self.width);
            self.pixel(r, c)
        })
    }

    /// Writes an 8-bit PNG after scaling by `exposure` and tone mapping.
    pub fn save_png_tonemapped(&self, path: impl AsRef<Path>, exposure: f64) -> Result<()> {
        if !(exposure.is_finite() && exposure > 0.0) {
            return Err(Error::InvalidArgument(format!("exposure {exposure}")));
        }
        let ldr = crate::eval::tone_map(self, exposure.ln());
        save_ldr_png(&ldr, self.width, self.height, path)
    }
}

/// Column-space augmentations of an equirectangular raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    /// Column reversal (mirror image of the environment).
    HFlip,
    /// Circular shift by `k` columns: rotation of the environment by
    /// `R_y(2 pi k / W)`, i.e. `out[col] = in[(col + k) mod W]`.
    AzRotate(usize),
}

/// Writes row-major RGB values in `[0, 1]` as an 8-bit PNG.
pub fn save_ldr_png(
    rgb: &[[f64; 3]],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::RgbImage::new(width as u32, height as u32);
    for (i, p) in rgb.iter().enumerate() {
        let px = p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        buf.put_pixel((i % width) as u32, (i / width) as u32, image::Rgb(px));
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads a single-channel mask PNG (zero = hidden) and resamples it to
/// `height x width` by nearest neighbour.
pub fn load_mask_png(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Vec<bool>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (mw, mh) = (img.width() as usize, img.height() as usize);
    let mut mask = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let sr = (row * mh) / height;
            let sc = (col * mw) / width;
            mask.push(img.get_pixel(sc as u32, sr as u32)[0] != 0);
        }
    }
    Ok(mask)
}

/// Writes a mask as a single-channel PNG (255 = observed).
pub fn save_mask_png(
    mask: &[bool],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if mask.len() != width * height {
        return Err(Error::Shape(format!(
            "mask of {} for {height}x{width}",
            mask.len()
        )));
    }
    let buf = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask[y as usize * width + x as usize] {
            255
        } else {
            0
        }])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Mask observing only directions with `y < 0` (the lower hemisphere).
pub fn lower_hemisphere_mask(width: usize, height: usize) -> Vec<bool> {
    (0..height)
        .flat_map(|row| std::iter::repeat_n(row >= height / 2, width))
        .collect()
}
