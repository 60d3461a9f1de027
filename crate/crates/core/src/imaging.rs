//! Image canonicalization and augmentation.
//!
//! Every image entering the model is brought to a fixed `side × side` frame
//! by scaling it so that its width equals `side` (bilinear resampling), then
//! zero-padding or center-cropping rows until the height matches. The aspect
//! ratio of the content is preserved up to the rounding of the scaled height.

use std::path::Path;

use image::GrayImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SIDE: usize = 256;
pub const DEFAULT_CHANNELS: usize = 3;

/// A grayscale image of arbitrary size with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("degenerate size {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(RawImage { width, height, pixels })
    }

    /// Maps 8-bit intensities onto `[0, 1]`.
    pub fn from_luma8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        RawImage::new(width, height, pixels)
    }

    /// Reads a PNG or JPEG file; color images are converted to luma.
    pub fn load(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::Decode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let gray = decoded.to_luma8();
        let (w, h) = gray.dimensions();
        RawImage::from_luma8(w as usize, h as usize, gray.as_raw())
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
}

/// How a raw image was mapped into the canonical frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub original_width: usize,
    pub original_height: usize,
    pub side: usize,
    /// `side / original_width`.
    pub scale: f64,
    /// Height after scaling, before padding or cropping.
    pub scaled_height: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub crop_top: usize,
    pub crop_bottom: usize,
}

/// Computes the canonical geometry using integer arithmetic only.
///
/// The scaled height is `round(height * side / width)` with halves rounded
/// up; an odd padding or cropping remainder goes to the bottom.
pub fn plan_geometry(width: usize, height: usize, side: usize) -> Result<Geometry> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidImage(format!("degenerate size {width}x{height}")));
    }
    if side < 2 {
        return Err(Error::InvalidImage(format!(
            "canonical side must be at least 2, got {side}"
        )));
    }
    let scaled_height = ((2 * height * side + width) / (2 * width)).max(1);
    let (mut pad_top, mut pad_bottom, mut crop_top, mut crop_bottom) = (0, 0, 0, 0);
    if scaled_height < side {
        let pad = side - scaled_height;
        pad_top = pad / 2;
        pad_bottom = pad - pad_top;
    } else {
        let crop = scaled_height - side;
        crop_top = crop / 2;
        crop_bottom = crop - crop_top;
    }
    Ok(Geometry {
        original_width: width,
        original_height: height,
        side,
        scale: side as f64 / width as f64,
        scaled_height,
        pad_top,
        pad_bottom,
        crop_top,
        crop_bottom,
    })
}

/// A `side × side` image stored as `channels` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalImage {
    side: usize,
    channels: usize,
    data: Vec<f64>,
}

impl CanonicalImage {
    /// Replicates a single `side × side` plane into `channels` planes.
    pub fn from_gray(side: usize, channels: usize, gray: Vec<f64>) -> Result<Self> {
        if side == 0 || channels == 0 {
            return Err(Error::InvalidImage(format!(
                "canonical image needs side and channels >= 1, got {side} and {channels}"
            )));
        }
        if gray.len() != side * side {
            return Err(Error::InvalidImage(format!(
                "plane of {} values does not fit {side}x{side}",
                gray.len()
            )));
        }
        let mut data = Vec::with_capacity(gray.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&gray);
        }
        Ok(CanonicalImage { side, channels, data })
    }

    /// Loads a square image written by [`CanonicalImage::save_png`].
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let raw = RawImage::load(path)?;
        if raw.width != raw.height {
            return Err(Error::InvalidImage(format!(
                "{}: expected a square canonical image, found {}x{}",
                path.display(),
                raw.width,
                raw.height
            )));
        }
        CanonicalImage::from_gray(raw.width, channels, raw.pixels)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.side * self.side;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Writes the first plane as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .plane(0)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let side = self.side as u32;
        let img =
            GrayImage::from_raw(side, side, bytes).ok_or_else(|| Error::InvalidImage("plane size mismatch".into()))?;
        img.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn map_planes(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> CanonicalImage {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            data.extend(f(self.plane(c)));
        }
        CanonicalImage {
            side: self.side,
            channels: self.channels,
            data,
        }
    }
}

/// Bilinear sample with half-pixel centers, clamped at the borders.
fn bilinear(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = plane[y0 * width + x0] * (1.0 - fx) + plane[y0 * width + x1] * fx;
    let bottom = plane[y1 * width + x0] * (1.0 - fx) + plane[y1 * width + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Brings `img` into the canonical `side × side` frame.
pub fn canonicalize(img: &RawImage, side: usize, channels: usize) -> Result<(CanonicalImage, Geometry)> {
    let geometry = plan_geometry(img.width, img.height, side)?;
    let x_ratio = img.width as f64 / side as f64;
    let y_ratio = img.height as f64 / geometry.scaled_height as f64;

    let mut gray = vec![0.0; side * side];
    // Scaled rows `first..first + rows` land at output rows starting at `dest`.
    let (first, dest, rows) = if geometry.scaled_height <= side {
        (0, geometry.pad_top, geometry.scaled_height)
    } else {
        (geometry.crop_top, 0, side)
    };
    for r in 0..rows {
        let sy = (first + r) as f64 * y_ratio + 0.5 * y_ratio - 0.5;
        let out = &mut gray[(dest + r) * side..(dest + r + 1) * side];
        for (c, px) in out.iter_mut().enumerate() {
            let sx = (c as f64 + 0.5) * x_ratio - 0.5;
            *px = bilinear(&img.pixels, img.width, img.height, sx, sy);
        }
    }
    Ok((CanonicalImage::from_gray(side, channels, gray)?, geometry))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub scale_low: f64,
    pub scale_high: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            scale_low: 0.8,
            scale_high: 1.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < low <= high",
                self.scale_low, self.scale_high
            )));
        }
        Ok(())
    }
}

pub fn flip_horizontal(img: &CanonicalImage) -> CanonicalImage {
    let side = img.side;
    img.map_planes(|plane| {
        let mut out = Vec::with_capacity(plane.len());
        for row in plane.chunks(side) {
            out.extend(row.iter().rev());
        }
        out
    })
}

/// Zooms by `factor` about the image center. Factors below one leave a zero
/// border; factors above one drop the outer margin.
pub fn scale_about_center(img: &CanonicalImage, factor: f64) -> CanonicalImage {
    if factor == 1.0 {
        return img.clone();
    }
    let side = img.side;
    let half = side as f64 / 2.0;
    let hi = side as f64 - 0.5;
    let coords: Vec<f64> = (0..side)
        .map(|i| (i as f64 + 0.5 - half) / factor + half - 0.5)
        .collect();
    img.map_planes(|plane| {
        let mut out = vec![0.0; side * side];
        for (r, &sy) in coords.iter().enumerate() {
            if !(-0.5..=hi).contains(&sy) {
                continue;
            }
            for (c, &sx) in coords.iter().enumerate() {
                if (-0.5..=hi).contains(&sx) {
                    out[r * side + c] = bilinear(plane, side, side, sx, sy);
                }
            }
        }
        out
    })
}

/// Random horizontal flip followed by a random zoom about the center.
///
/// Exactly two values are drawn from `rng` per call whatever the outcome, so
/// downstream draws do not depend on the augmentation result.
pub fn augment<R: Rng + ?Sized>(img: &CanonicalImage, cfg: &AugmentConfig, rng: &mut R) -> CanonicalImage {
    let flip = rng.gen::<f64>() < cfg.flip_probability;
    let factor = cfg.scale_low + (cfg.scale_high - cfg.scale_low) * rng.gen::<f64>();
    let flipped = if flip { flip_horizontal(img) } else { img.clone() };
    scale_about_center(&flipped, factor)
}

/// Lays the image out as a `channels × side × side` tensor.
pub fn to_tensor(img: &CanonicalImage) -> Tensor {
    Tensor::new(vec![img.channels, img.side, img.side], img.data.clone())
        .expect("canonical image data always matches its shape")
}
