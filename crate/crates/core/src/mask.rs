//! Binary object masks and their lossless single-channel image encoding
//! (255 = object, 0 = background).

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ObjectTag, ValidationError};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask pixel ({x}, {y}) has value {value}; expected 0 or 255")]
    NonBinary { x: u32, y: u32, value: u8 },
    #[error("mask is {got_w}x{got_h}, image is {want_w}x{want_h}")]
    Dimensions {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("mask codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major H x W grid of booleans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn empty(width: u32, height: u32) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y as usize) * (self.width as usize) + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[(y as usize) * w + x as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// 100 * set / (H * W); zero for a zero-area grid.
    pub fn coverage_pct(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        100.0 * self.count_set() as f64 / self.bits.len() as f64
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Result<Self, MaskError> {
        let mut bits = Vec::with_capacity((img.width() as usize) * (img.height() as usize));
        for (x, y, p) in img.enumerate_pixels() {
            match p.0[0] {
                0 => bits.push(false),
                255 => bits.push(true),
                value => return Err(MaskError::NonBinary { x, y, value }),
            }
        }
        Ok(Self {
            width: img.width(),
            height: img.height(),
            bits,
        })
    }
}

/// A tag's binary mask over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub image_id: String,
    pub tag: ObjectTag,
    pub bitmap: Bitmap,
    pub coverage_pct: f64,
}

impl SegmentMask {
    pub fn new(image_id: impl Into<String>, tag: ObjectTag, bitmap: Bitmap) -> Self {
        let coverage_pct = bitmap.coverage_pct();
        Self {
            image_id: image_id.into(),
            tag,
            bitmap,
            coverage_pct,
        }
    }

    pub fn check_dimensions(&self, width: u32, height: u32) -> Result<(), MaskError> {
        let (got_w, got_h) = self.bitmap.dimensions();
        if (got_w, got_h) != (width, height) {
            return Err(MaskError::Dimensions {
                got_w,
                got_h,
                want_w: width,
                want_h: height,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(0.0..=100.0).contains(&self.coverage_pct) {
            return Err(ValidationError::new(
                "coverage_pct",
                format!("{} outside [0, 100]", self.coverage_pct),
            ));
        }
        let recomputed = self.bitmap.coverage_pct();
        if (recomputed - self.coverage_pct).abs() > 1e-6 {
            return Err(ValidationError::new(
                "coverage_pct",
                format!("stored {} but bitmap gives {recomputed}", self.coverage_pct),
            ));
        }
        Ok(())
    }
}

/// Serialized shape of a mask when it travels inside JSON (e.g. HTTP adapters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodedMask {
    pub png_base64: String,
}

pub fn encode_png(bitmap: &Bitmap) -> Result<Vec<u8>, MaskError> {
    let mut buf = Cursor::new(Vec::new());
    bitmap.to_gray().write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Bitmap, MaskError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Bitmap::from_gray(&img.to_luma8())
}

pub fn save_mask(path: &Path, bitmap: &Bitmap) -> Result<(), MaskError> {
    let bytes = encode_png(bitmap)?;
    std::fs::write(path, bytes).map_err(|source| MaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mask(path: &Path) -> Result<Bitmap, MaskError> {
    let bytes = std::fs::read(path).map_err(|source| MaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_png(&bytes)
}
