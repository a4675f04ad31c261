//! Per-image instance mask sets and their on-disk FMSK form, emulating the
//! offline foundation-model mask cache: masks are generated once per target
//! image and reloaded on every training step.
//!
//! FMSK layout, all integers little-endian: magic "FMSK"; version u16 (=1);
//! height u32; width u32; mask count u32; metadata length u32 followed by
//! that many UTF-8 bytes of newline-separated key=value pairs; then per mask
//! an area u32, a run count u32, and (start u32, length u32) pairs over the
//! row-major flattened mask, sorted ascending by start. Masks may overlap
//! each other; runs within one mask may not.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("empty mask")]
    EmptyMask,
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("unsupported version {0} at byte 4")]
    BadVersion(u16),
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("run at byte {offset} exceeds {height}x{width} grid")]
    RunOutOfBounds {
        offset: usize,
        height: usize,
        width: usize,
    },
    #[error("overlapping or unsorted run at byte {0}")]
    OverlappingRun(usize),
    #[error("declared area {declared} does not match run total {actual} at byte {offset}")]
    AreaMismatch {
        declared: u32,
        actual: u32,
        offset: usize,
    },
    #[error("metadata is not valid UTF-8 at byte {0}")]
    BadMetadata(usize),
    #[error("mask shape {0}x{1} does not match set {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One binary instance mask over a row-major H x W grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub bits: Vec<bool>,
    pub area: u32,
}

impl Mask {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, MaskError> {
        let area = bits.iter().filter(|&&b| b).count() as u32;
        if area == 0 {
            return Err(MaskError::EmptyMask);
        }
        Ok(Mask { bits, area })
    }

    /// Maximal runs of set pixels as (start, length) pairs, ascending.
    pub fn runs(&self) -> Vec<(u32, u32)> {
        let mut runs = Vec::new();
        let mut i = 0usize;
        while i < self.bits.len() {
            if self.bits[i] {
                let start = i;
                while i < self.bits.len() && self.bits[i] {
                    i += 1;
                }
                runs.push((start as u32, (i - start) as u32));
            } else {
                i += 1;
            }
        }
        runs
    }
}

/// Ordered collection of instance masks for one image, with free-form
/// provenance metadata the rest of the kit never interprets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Mask>,
    pub metadata: Vec<(String, String)>,
}

const FMSK_MAGIC: &[u8; 4] = b"FMSK";
const FMSK_VERSION: u16 = 1;

impl MaskSet {
    pub fn new(height: usize, width: usize, masks: Vec<Mask>) -> Result<Self, MaskError> {
        for m in &masks {
            if m.bits.len() != height * width {
                return Err(MaskError::ShapeMismatch(m.bits.len() / width.max(1), width, height, width));
            }
        }
        Ok(MaskSet {
            height,
            width,
            masks,
            metadata: Vec::new(),
        })
    }

    pub fn with_metadata(mut self, metadata: Vec<(String, String)>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn cache_path(dir: &Path, stem: &str) -> std::path::PathBuf {
        dir.join(format!("{stem}.fmsk"))
    }

    pub fn save(&self, path: &Path) -> Result<(), MaskError> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        MaskSet::decode(&buf)
    }

    pub fn encode(&self) -> Result<Vec<u8>, MaskError> {
        let mut out = Vec::new();
        out.extend_from_slice(FMSK_MAGIC);
        out.extend_from_slice(&FMSK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.masks.len() as u32).to_le_bytes());
        let meta: String = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\n");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for m in &self.masks {
            if m.area == 0 {
                return Err(MaskError::EmptyMask);
            }
            let runs = m.runs();
            out.extend_from_slice(&m.area.to_le_bytes());
            out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
            for (start, len) in runs {
                out.extend_from_slice(&start.to_le_bytes());
                out.extend_from_slice(&len.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MaskError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], MaskError> {
            if *pos + n > bytes.len() {
                return Err(MaskError::Truncated(*pos));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32, MaskError> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != FMSK_MAGIC {
            return Err(MaskError::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != FMSK_VERSION {
            return Err(MaskError::BadVersion(version));
        }
        let height = read_u32(&mut pos)? as usize;
        let width = read_u32(&mut pos)? as usize;
        let mask_count = read_u32(&mut pos)? as usize;
        let meta_len = read_u32(&mut pos)? as usize;
        let meta_off = pos;
        let meta_bytes = take(&mut pos, meta_len)?;
        let meta_str =
            std::str::from_utf8(meta_bytes).map_err(|_| MaskError::BadMetadata(meta_off))?;
        let metadata: Vec<(String, String)> = meta_str
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| match l.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => (l.to_string(), String::new()),
            })
            .collect();

        let npix = height * width;
        let mut masks = Vec::with_capacity(mask_count);
        for _ in 0..mask_count {
            let mask_off = pos;
            let area = read_u32(&mut pos)?;
            let run_count = read_u32(&mut pos)? as usize;
            let mut bits = vec![false; npix];
            let mut total = 0u32;
            let mut prev_end = 0usize;
            let mut first = true;
            for _ in 0..run_count {
                let run_off = pos;
                let start = read_u32(&mut pos)? as usize;
                let len = read_u32(&mut pos)? as usize;
                if len == 0 || start + len > npix {
                    return Err(MaskError::RunOutOfBounds {
                        offset: run_off,
                        height,
                        width,
                    });
                }
                if !first && start < prev_end {
                    return Err(MaskError::OverlappingRun(run_off));
                }
                first = false;
                prev_end = start + len;
                for b in &mut bits[start..start + len] {
                    *b = true;
                }
                total += len as u32;
            }
            if total != area {
                return Err(MaskError::AreaMismatch {
                    declared: area,
                    actual: total,
                    offset: mask_off,
                });
            }
            if area == 0 {
                return Err(MaskError::EmptyMask);
            }
            masks.push(Mask { bits, area });
        }
        Ok(MaskSet {
            height,
            width,
            masks,
            metadata,
        })
    }
}
