//! Seeded augmentations. Class-mix pastes half of the source classes onto a
//! target image for the segmentation stream; the depth stream only ever sees
//! photometric jitter plus crop/flip, since cross-domain mixing breaks depth
//! geometry.

use thiserror::Error;

use crate::grid::{DepthMap, Image, LabelMap, IGNORE};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("shape mismatch")]
    ShapeMismatch,
    #[error("crop {crop} exceeds image {height}x{width}")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
}

/// Paste ceil(|S|/2) source classes (chosen uniformly without replacement
/// from the set S of non-IGNORE classes present in `src_labels`) onto the
/// target pair. Returns the mixed image, mixed labels, and the paste mask.
/// With no source classes the target pair is returned unchanged with an
/// empty mask.
pub fn class_mix(
    src_img: &Image,
    src_labels: &LabelMap,
    tgt_img: &Image,
    tgt_pseudo: &LabelMap,
    rng: &mut Rng,
) -> Result<(Image, LabelMap, Vec<bool>), AugmentError> {
    let (h, w) = (src_img.height, src_img.width);
    if src_labels.height != h
        || src_labels.width != w
        || tgt_img.height != h
        || tgt_img.width != w
        || tgt_pseudo.height != h
        || tgt_pseudo.width != w
    {
        return Err(AugmentError::ShapeMismatch);
    }

    let mut present = [false; 256];
    for &l in &src_labels.data {
        if l != IGNORE {
            present[l as usize] = true;
        }
    }
    let classes: Vec<u8> = (0..=254u8).filter(|&c| present[c as usize]).collect();
    if classes.is_empty() {
        return Ok((tgt_img.clone(), tgt_pseudo.clone(), vec![false; h * w]));
    }
    let k = classes.len().div_ceil(2);
    let picked = rng.choose_indices(classes.len(), k);
    let mut chosen = [false; 256];
    for i in picked {
        chosen[classes[i] as usize] = true;
    }

    let mut mask = vec![false; h * w];
    let mut img = tgt_img.clone();
    let mut labels = tgt_pseudo.clone();
    for px in 0..h * w {
        let l = src_labels.data[px];
        if l != IGNORE && chosen[l as usize] {
            mask[px] = true;
            labels.data[px] = l;
            for c in 0..3 {
                img.data[px * 3 + c] = src_img.data[px * 3 + c];
            }
        }
    }
    Ok((img, labels, mask))
}

/// Per-channel gain in [1-0.4s, 1+0.4s] and offset in [-0.2s, 0.2s], result
/// clamped to [0, 1]. Draw order is gain then offset per channel, R, G, B.
pub fn photometric_jitter(img: &Image, rng: &mut Rng, strength: f64) -> Image {
    let mut gains = [0.0; 3];
    let mut offsets = [0.0; 3];
    for c in 0..3 {
        gains[c] = rng.uniform(1.0 - 0.4 * strength, 1.0 + 0.4 * strength);
        offsets[c] = rng.uniform(-0.2 * strength, 0.2 * strength);
    }
    let mut out = img.clone();
    for px in 0..img.height * img.width {
        for c in 0..3 {
            let v = img.data[px * 3 + c] * gains[c] + offsets[c];
            out.data[px * 3 + c] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// One crop window and one flip decision applied identically to all three
/// grids. Depth values are unchanged by cropping; flip probability is 0.5.
/// Draw order: row offset, column offset, flip.
pub fn random_crop_flip(
    img: &Image,
    labels: &LabelMap,
    depth: &DepthMap,
    rng: &mut Rng,
    crop: usize,
) -> Result<(Image, LabelMap, DepthMap), AugmentError> {
    let (h, w) = (img.height, img.width);
    if labels.height != h || labels.width != w || depth.height != h || depth.width != w {
        return Err(AugmentError::ShapeMismatch);
    }
    if crop > h || crop > w {
        return Err(AugmentError::CropTooLarge {
            crop,
            height: h,
            width: w,
        });
    }
    let row0 = rng.index(h - crop + 1);
    let col0 = rng.index(w - crop + 1);
    let flip = rng.bool(0.5);

    let mut img_out = Image::filled(crop, crop, 0.0);
    let mut lbl_out = LabelMap::filled(crop, crop, labels.num_classes, 0);
    let mut dep_out = DepthMap {
        height: crop,
        width: crop,
        data: vec![0.0; crop * crop],
        valid: vec![false; crop * crop],
    };
    for r in 0..crop {
        for c in 0..crop {
            let src_c = if flip { crop - 1 - c } else { c };
            let src = (row0 + r) * w + (col0 + src_c);
            let dst = r * crop + c;
            for ch in 0..3 {
                img_out.data[dst * 3 + ch] = img.data[src * 3 + ch];
            }
            lbl_out.data[dst] = labels.data[src];
            dep_out.data[dst] = depth.data[src];
            dep_out.valid[dst] = depth.valid[src];
        }
    }
    Ok((img_out, lbl_out, dep_out))
}
