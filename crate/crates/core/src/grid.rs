//! Dense 2-D grid containers and the order statistics shared by the loss and
//! evaluation code: class-index label maps, per-pixel probability maps, depth
//! maps with validity, and RGB images, plus their on-disk forms (8-bit PNG for
//! labels/images, the FDPT binary format for depth).
//!
//! Summations are left-to-right in row-major order throughout so results are
//! bit-identical across runs.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

/// Ignore value for label maps, matching the 255 sentinel of the PNG form.
pub const IGNORE: u8 = 255;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("empty sample")]
    EmptySample,
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: u8 },
    #[error("data length {len} does not match {height}x{width} grid")]
    BadLength {
        len: usize,
        height: usize,
        width: usize,
    },
    #[error("no valid depth")]
    NoValidDepth,
    #[error("bad magic in depth file")]
    BadMagic,
    #[error("unsupported depth file version {0}")]
    BadVersion(u16),
    #[error("truncated depth file")]
    Truncated,
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

/// H x W grid of class indices in [0, C) plus the IGNORE sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: u8, data: Vec<u8>) -> Result<Self, GridError> {
        if data.len() != height * width {
            return Err(GridError::BadLength {
                len: data.len(),
                height,
                width,
            });
        }
        for &v in &data {
            if v != IGNORE && v >= num_classes {
                return Err(GridError::LabelOutOfRange {
                    label: v,
                    num_classes,
                });
            }
        }
        Ok(LabelMap {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: u8, value: u8) -> Self {
        LabelMap {
            height,
            width,
            num_classes,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// 8-bit single-channel PNG, pixel value = class index, 255 = IGNORE.
    pub fn save_png(&self, path: &Path) -> Result<(), GridError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length already validated");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path, num_classes: u8) -> Result<Self, GridError> {
        let img = image::open(path)?.into_luma8();
        LabelMap::new(
            img.height() as usize,
            img.width() as usize,
            num_classes,
            img.into_raw(),
        )
    }
}

/// H x W x C per-pixel class probabilities, row-major with the class axis
/// innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != height * width * num_classes {
            return Err(GridError::BadLength {
                len: data.len(),
                height,
                width,
            });
        }
        Ok(ProbMap {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.num_classes..(idx + 1) * self.num_classes]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// H x W metric depth with per-pixel validity. Invalid pixels are never read
/// by any loss or metric; on disk they are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

const FDPT_MAGIC: &[u8; 4] = b"FDPT";
const FDPT_VERSION: u16 = 1;

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self, GridError> {
        if data.len() != height * width || valid.len() != height * width {
            return Err(GridError::BadLength {
                len: data.len(),
                height,
                width,
            });
        }
        for (d, &v) in data.iter().zip(&valid) {
            if v && !d.is_finite() {
                return Err(GridError::NonFinite);
            }
        }
        Ok(DepthMap {
            height,
            width,
            data,
            valid,
        })
    }

    pub fn all_valid(height: usize, width: usize, data: Vec<f64>) -> Result<Self, GridError> {
        let valid = vec![true; data.len()];
        DepthMap::new(height, width, data, valid)
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.data
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .collect()
    }

    /// FDPT binary form: magic "FDPT", version u16 LE (=1), height u32 LE,
    /// width u32 LE, then H*W float32 LE row-major with NaN for invalid.
    pub fn to_fdpt(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 4 * self.data.len());
        out.extend_from_slice(FDPT_MAGIC);
        out.extend_from_slice(&FDPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (d, &v) in self.data.iter().zip(&self.valid) {
            let f = if v { *d as f32 } else { f32::NAN };
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_fdpt(bytes: &[u8]) -> Result<Self, GridError> {
        if bytes.len() < 14 {
            return Err(GridError::Truncated);
        }
        if &bytes[0..4] != FDPT_MAGIC {
            return Err(GridError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FDPT_VERSION {
            return Err(GridError::BadVersion(version));
        }
        let height = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let n = height * width;
        if bytes.len() < 14 + 4 * n {
            return Err(GridError::Truncated);
        }
        let mut data = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for i in 0..n {
            let off = 14 + 4 * i;
            let f = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if f.is_nan() {
                data.push(f64::NAN);
                valid.push(false);
            } else {
                data.push(f as f64);
                valid.push(true);
            }
        }
        DepthMap::new(height, width, data, valid)
    }

    pub fn save_fdpt(&self, path: &Path) -> Result<(), GridError> {
        std::fs::write(path, self.to_fdpt())?;
        Ok(())
    }

    pub fn load_fdpt(path: &Path) -> Result<Self, GridError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        DepthMap::from_fdpt(&buf)
    }
}

/// H x W x 3 RGB image with values in [0, 1], row-major with channels
/// innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != height * width * 3 {
            return Err(GridError::BadLength {
                len: data.len(),
                height,
                width,
            });
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// 8-bit RGB PNG; values are divided by 255 on load.
    pub fn save_png(&self, path: &Path) -> Result<(), GridError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length already validated");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, GridError> {
        let img = image::open(path)?.into_rgb8();
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(img.height() as usize, img.width() as usize, data)
    }
}

/// Median with even-length samples averaged between the two middle order
/// statistics. Input order is irrelevant.
pub fn median(values: &[f64]) -> Result<f64, GridError> {
    if values.is_empty() {
        return Err(GridError::EmptySample);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GridError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Mean absolute deviation from the median, accumulated left to right.
pub fn mean_abs_dev_from_median(values: &[f64]) -> Result<f64, GridError> {
    let med = median(values)?;
    let mut sum = 0.0;
    for v in values {
        sum += (v - med).abs();
    }
    Ok(sum / values.len() as f64)
}

/// Per-pixel argmax over classes; ties break toward the smaller class index.
pub fn argmax_labels(probs: &ProbMap) -> LabelMap {
    let mut data = Vec::with_capacity(probs.num_pixels());
    for px in 0..probs.num_pixels() {
        let p = probs.pixel(px);
        let mut best = 0usize;
        for (c, &v) in p.iter().enumerate().skip(1) {
            if v > p[best] {
                best = c;
            }
        }
        data.push(best as u8);
    }
    LabelMap {
        height: probs.height,
        width: probs.width,
        num_classes: probs.num_classes as u8,
        data,
    }
}
