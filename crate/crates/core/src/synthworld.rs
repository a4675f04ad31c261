//! Procedural source/target scene generator with ground truth, plus the
//! deterministic oracles standing in for the segmentation and depth
//! foundation models: perturbed instance masks and affine-corrupted
//! pseudo-depth. Ground-truth depth and labels are written for evaluation
//! only; the training loop never reads them for the target domain.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DepthMap, GridError, Image, LabelMap};
use crate::maskcache::{Mask, MaskError, MaskSet};
use crate::rng::Rng;

pub const NUM_CLASSES: u8 = 5;
pub const CLASS_SKY: u8 = 0;
pub const CLASS_GROUND: u8 = 1;
pub const CLASS_BUILDING: u8 = 2;
pub const CLASS_OBSTACLE: u8 = 3;
pub const CLASS_POLE: u8 = 4;

pub const CLASS_NAMES: [&str; 5] = ["sky", "ground", "building", "obstacle", "pole"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("object behind camera (distance {0})")]
    ObjectBehindCamera(f64),
    #[error("object distance {0} exceeds 120 m")]
    ObjectTooFar(f64),
    #[error("depth oracle scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("output directory {0} is not empty (use force to overwrite)")]
    OutputNotEmpty(String),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("mask: {0}")]
    Mask(#[from] MaskError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// One ground-standing object in a scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u8,
    /// Ground distance from the camera, meters.
    pub distance: f64,
    /// Lateral offset from the optical axis, meters.
    pub lateral: f64,
    /// Physical height, meters.
    pub size: f64,
}

/// Scene geometry: a flat ground plane under a sky, with boxes and poles
/// resting on the ground.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub horizon_row: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Camera height above the ground plane, meters.
    pub cam_height: f64,
    pub objects: Vec<SceneObject>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            horizon_row: 24,
            focal: 64.0,
            cam_height: 1.5,
            objects: Vec::new(),
        }
    }
}

/// Photometric domain shift; strength 0 is the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub strength: f64,
    pub gains: [f64; 3],
    pub offsets: [f64; 3],
    pub noise_sigma: f64,
    /// Blend factor toward an RGB->GBR channel rotation, scaled by strength.
    pub palette_rotation: f64,
    /// Per-image multiplier range on the affine/rotation amplitudes; a wide
    /// range makes some target images mildly shifted and others severely,
    /// which is what lets self-training bootstrap from easy images to hard
    /// ones. Noise is not scaled by it.
    pub intensity_range: (f64, f64),
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            strength: 0.0,
            ..ShiftSpec::with_strength(0.0)
        }
    }

    pub fn with_strength(strength: f64) -> Self {
        ShiftSpec {
            strength,
            gains: [1.25, 0.85, 0.75],
            offsets: [0.06, -0.04, 0.10],
            noise_sigma: 0.10,
            palette_rotation: 0.55,
            intensity_range: (0.7, 1.0),
        }
    }
}

/// Noise parameters of the foundation-model stand-ins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Mask boundary dilation/erosion radius, pixels.
    pub perturb_radius: usize,
    pub drop_prob: f64,
    pub overseg_prob: f64,
    /// Pseudo-depth affine scale, must be positive.
    pub depth_a: f64,
    pub depth_b: f64,
    pub depth_sigma: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            // high-quality masks: boundary-exact, occasionally dropped or
            // oversegmented; nonzero radii bleed object masks into their
            // surroundings and majority voting then spreads the damage
            perturb_radius: 0,
            drop_prob: 0.05,
            overseg_prob: 0.2,
            depth_a: 2.0,
            depth_b: 0.5,
            depth_sigma: 0.05,
        }
    }
}

/// Visible pixel set of one instance (sky, ground, or an object).
#[derive(Debug, Clone)]
pub struct InstanceRegion {
    pub class: u8,
    pub bits: Vec<bool>,
}

/// Base class colors, also used for rendering predictions.
pub const PALETTE: [[f64; 3]; 5] = [
    [0.55, 0.72, 0.95], // sky
    [0.36, 0.30, 0.24], // ground
    [0.62, 0.58, 0.52], // building
    [0.82, 0.30, 0.24], // obstacle
    [0.88, 0.80, 0.28], // pole
];

/// Render a scene: ground-plane depth d = focal * cam_height / (row -
/// horizon_row) below the horizon, objects back-to-front with constant
/// per-object depth, sky with invalid depth.
pub fn generate_scene(
    rng: &mut Rng,
    spec: &SceneSpec,
) -> Result<(Image, LabelMap, DepthMap, Vec<InstanceRegion>), SynthError> {
    let (h, w) = (spec.height, spec.width);
    for obj in &spec.objects {
        if obj.distance <= 0.0 {
            return Err(SynthError::ObjectBehindCamera(obj.distance));
        }
        if obj.distance > 120.0 {
            return Err(SynthError::ObjectTooFar(obj.distance));
        }
    }

    // instance ids: 0 sky, 1 ground, 2+k object k
    let mut ids = vec![0u32; h * w];
    let mut depth = vec![f64::NAN; h * w];
    let mut valid = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if r > spec.horizon_row {
                ids[r * w + c] = 1;
                depth[r * w + c] = spec.focal * spec.cam_height / (r - spec.horizon_row) as f64;
                valid[r * w + c] = true;
            }
        }
    }

    // per-instance brightness, drawn in object order
    let brightness: Vec<f64> = spec.objects.iter().map(|_| rng.uniform(0.85, 1.15)).collect();

    // painter's order: far to near
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| {
        spec.objects[b]
            .distance
            .partial_cmp(&spec.objects[a].distance)
            .unwrap()
            .then(a.cmp(&b))
    });
    for k in order {
        let obj = &spec.objects[k];
        let scale = spec.focal / obj.distance;
        let base_row = spec.horizon_row as f64 + scale * spec.cam_height;
        let height_px = scale * obj.size;
        let width_px = match obj.class {
            CLASS_BUILDING => height_px * 1.6,
            CLASS_POLE => (height_px * 0.25).max(2.0),
            _ => height_px,
        };
        let col_center = w as f64 / 2.0 + scale * obj.lateral;
        let row_top = (base_row - height_px).floor().max(0.0) as usize;
        let row_bot = (base_row.ceil() as usize).min(h);
        let col_left = ((col_center - width_px / 2.0).floor().max(0.0)) as usize;
        let col_right = ((col_center + width_px / 2.0).ceil() as usize).min(w);
        for r in row_top..row_bot {
            for c in col_left..col_right {
                ids[r * w + c] = 2 + k as u32;
                depth[r * w + c] = obj.distance;
                valid[r * w + c] = true;
            }
        }
    }

    // labels and base colors from instance ids
    let mut labels = vec![0u8; h * w];
    let mut img = vec![0.0f64; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let px = r * w + c;
            let (class, bright) = match ids[px] {
                0 => (CLASS_SKY, 1.0),
                1 => (CLASS_GROUND, 1.0),
                k => {
                    let k = (k - 2) as usize;
                    (spec.objects[k].class, brightness[k])
                }
            };
            labels[px] = class;
            let shade = 1.0 - 0.25 * (r as f64 / h.max(1) as f64);
            for ch in 0..3 {
                img[px * 3 + ch] = (PALETTE[class as usize][ch] * bright * shade).clamp(0.0, 1.0);
            }
        }
    }
    // per-pixel texture noise, row-major, three draws per pixel
    for v in img.iter_mut() {
        *v = (*v + 0.02 * rng.normal()).clamp(0.0, 1.0);
    }

    let mut regions: Vec<InstanceRegion> = Vec::new();
    let mut push_region = |class: u8, id: u32| {
        let bits: Vec<bool> = ids.iter().map(|&i| i == id).collect();
        if bits.iter().any(|&b| b) {
            regions.push(InstanceRegion { class, bits });
        }
    };
    push_region(CLASS_SKY, 0);
    push_region(CLASS_GROUND, 1);
    for (k, obj) in spec.objects.iter().enumerate() {
        push_region(obj.class, 2 + k as u32);
    }

    Ok((
        Image::new(h, w, img)?,
        LabelMap::new(h, w, NUM_CLASSES, labels)?,
        DepthMap::new(h, w, depth, valid)?,
        regions,
    ))
}

/// Photometric-only shift: palette rotation toward RGB->GBR, per-channel
/// affine, additive Gaussian noise, clamp. Labels and depth are untouched.
pub fn apply_domain_shift(img: &Image, shift: &ShiftSpec, rng: &mut Rng) -> Image {
    let (lo, hi) = shift.intensity_range;
    let s = shift.strength * if hi > lo { rng.uniform(lo, hi) } else { lo };
    let t = (s * shift.palette_rotation).clamp(0.0, 1.0);
    let gains: Vec<f64> = shift.gains.iter().map(|g| 1.0 + s * (g - 1.0)).collect();
    let offsets: Vec<f64> = shift.offsets.iter().map(|o| s * o).collect();
    let sigma = shift.strength * shift.noise_sigma;
    let mut out = img.clone();
    for px in 0..img.height * img.width {
        let r = img.data[px * 3];
        let g = img.data[px * 3 + 1];
        let b = img.data[px * 3 + 2];
        let rotated = [
            (1.0 - t) * r + t * g,
            (1.0 - t) * g + t * b,
            (1.0 - t) * b + t * r,
        ];
        for ch in 0..3 {
            let noise = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
            out.data[px * 3 + ch] = (rotated[ch] * gains[ch] + offsets[ch] + noise).clamp(0.0, 1.0);
        }
    }
    out
}

fn dilate(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = bits.to_vec();
    for r in 0..h {
        for c in 0..w {
            if bits[r * w + c] {
                if r > 0 {
                    out[(r - 1) * w + c] = true;
                }
                if r + 1 < h {
                    out[(r + 1) * w + c] = true;
                }
                if c > 0 {
                    out[r * w + c - 1] = true;
                }
                if c + 1 < w {
                    out[r * w + c + 1] = true;
                }
            }
        }
    }
    out
}

fn erode(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = bits.to_vec();
    for r in 0..h {
        for c in 0..w {
            let on = |rr: isize, cc: isize| -> bool {
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    false
                } else {
                    bits[rr as usize * w + cc as usize]
                }
            };
            if bits[r * w + c]
                && !(on(r as isize - 1, c as isize)
                    && on(r as isize + 1, c as isize)
                    && on(r as isize, c as isize - 1)
                    && on(r as isize, c as isize + 1))
            {
                out[r * w + c] = false;
            }
        }
    }
    out
}

/// Stand-in for offline foundation-model mask generation: each region is
/// independently dilated or eroded, dropped, or split in two; empty results
/// are discarded. Draw order per region: drop, dilate-vs-erode, oversegment,
/// then the cut (orientation, position) when oversegmenting.
pub fn oracle_masks(
    regions: &[InstanceRegion],
    height: usize,
    width: usize,
    oracle: &OracleSpec,
    rng: &mut Rng,
) -> Result<MaskSet, SynthError> {
    let mut masks = Vec::new();
    for region in regions {
        if rng.bool(oracle.drop_prob) {
            continue;
        }
        let grow = rng.bool(0.5);
        let mut bits = region.bits.clone();
        for _ in 0..oracle.perturb_radius {
            bits = if grow {
                dilate(&bits, height, width)
            } else {
                erode(&bits, height, width)
            };
        }
        let split = rng.bool(oracle.overseg_prob);
        if split {
            let vertical_cut = rng.bool(0.5);
            let rows: Vec<usize> = bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| if vertical_cut { i % width } else { i / width })
                .collect();
            if let (Some(&lo), Some(&hi)) = (rows.iter().min(), rows.iter().max()) {
                let cut = if hi > lo { lo + 1 + rng.index(hi - lo) } else { lo };
                let mut first = vec![false; bits.len()];
                let mut second = vec![false; bits.len()];
                for (i, &b) in bits.iter().enumerate() {
                    if !b {
                        continue;
                    }
                    let coord = if vertical_cut { i % width } else { i / width };
                    if coord < cut {
                        first[i] = true;
                    } else {
                        second[i] = true;
                    }
                }
                for part in [first, second] {
                    if let Ok(m) = Mask::from_bits(part) {
                        masks.push(m);
                    }
                }
                continue;
            }
        }
        if let Ok(m) = Mask::from_bits(bits) {
            masks.push(m);
        }
    }
    let meta = vec![
        ("generator".to_string(), "oracle".to_string()),
        ("perturb-radius".to_string(), oracle.perturb_radius.to_string()),
        ("drop-prob".to_string(), oracle.drop_prob.to_string()),
        ("overseg-prob".to_string(), oracle.overseg_prob.to_string()),
        ("pred-iou-thresh".to_string(), "0.86".to_string()),
    ];
    Ok(MaskSet::new(height, width, masks)?.with_metadata(meta))
}

/// Affine-corrupted pseudo-depth: a*gt + b + Gaussian(0, sigma) on valid
/// pixels (one draw per valid pixel in row-major order), validity preserved.
pub fn oracle_depth(gt: &DepthMap, oracle: &OracleSpec, rng: &mut Rng) -> Result<DepthMap, SynthError> {
    if oracle.depth_a <= 0.0 {
        return Err(SynthError::NonPositiveScale(oracle.depth_a));
    }
    let mut out = gt.clone();
    for (i, &v) in gt.valid.iter().enumerate() {
        if v {
            let noise = if oracle.depth_sigma > 0.0 {
                oracle.depth_sigma * rng.normal()
            } else {
                0.0
            };
            out.data[i] = oracle.depth_a * gt.data[i] + oracle.depth_b + noise;
        }
    }
    Ok(out)
}

/// Random-scene parameters for dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub cam_height: f64,
    pub horizon_rows: (usize, usize),
    pub object_count: (usize, usize),
}

impl Default for SceneDistribution {
    fn default() -> Self {
        SceneDistribution {
            height: 64,
            width: 64,
            focal: 64.0,
            cam_height: 1.5,
            horizon_rows: (20, 28),
            object_count: (6, 12),
        }
    }
}

impl SceneDistribution {
    pub fn sample(&self, rng: &mut Rng) -> SceneSpec {
        let horizon_row =
            self.horizon_rows.0 + rng.index(self.horizon_rows.1 - self.horizon_rows.0 + 1);
        let n_objects =
            self.object_count.0 + rng.index(self.object_count.1 - self.object_count.0 + 1);
        let objects = (0..n_objects)
            .map(|_| {
                let class = [CLASS_BUILDING, CLASS_OBSTACLE, CLASS_POLE][rng.index(3)];
                let distance = rng.uniform(4.0, 40.0);
                let max_lateral = distance * (self.width as f64 / 2.0) / self.focal;
                let lateral = rng.uniform(-max_lateral, max_lateral);
                let size = match class {
                    CLASS_BUILDING => rng.uniform(3.0, 8.0),
                    CLASS_POLE => rng.uniform(2.5, 4.5),
                    _ => rng.uniform(1.2, 2.8),
                };
                SceneObject {
                    class,
                    distance,
                    lateral,
                    size,
                }
            })
            .collect();
        SceneSpec {
            height: self.height,
            width: self.width,
            horizon_row,
            focal: self.focal,
            cam_height: self.cam_height,
            objects,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_images: usize,
    pub names: Vec<String>,
    pub scene_distribution: SceneDistribution,
    pub shift: ShiftSpec,
    pub oracle: OracleSpec,
}

/// Write a full dataset tree: `images/`, `labels/` and `depth/` (ground
/// truth, evaluation only), `masks/` (FMSK), `pseudo_depth/` (FDPT), and a
/// JSON manifest. Per-image randomness comes from substreams of `seed`, so
/// identical arguments produce byte-identical trees.
pub fn generate_dataset(
    out_dir: &Path,
    n_images: usize,
    dist: &SceneDistribution,
    shift: &ShiftSpec,
    oracle: &OracleSpec,
    seed: u64,
    force: bool,
) -> Result<DatasetManifest, SynthError> {
    if out_dir.exists() && out_dir.read_dir()?.next().is_some() && !force {
        return Err(SynthError::OutputNotEmpty(out_dir.display().to_string()));
    }
    for sub in ["images", "labels", "depth", "masks", "pseudo_depth"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let names: Vec<String> = (0..n_images).map(|i| format!("img_{i:04}")).collect();
    names
        .par_iter()
        .enumerate()
        .try_for_each(|(i, name)| -> Result<(), SynthError> {
            let base = (i as u64) * 4;
            let mut scene_rng = Rng::substream(seed, base);
            let spec = dist.sample(&mut scene_rng);
            let (img, labels, depth, regions) = generate_scene(&mut scene_rng, &spec)?;
            let shifted = apply_domain_shift(&img, shift, &mut Rng::substream(seed, base + 1));
            let masks = oracle_masks(
                &regions,
                spec.height,
                spec.width,
                oracle,
                &mut Rng::substream(seed, base + 2),
            )?;
            let pseudo = oracle_depth(&depth, oracle, &mut Rng::substream(seed, base + 3))?;
            shifted.save_png(&out_dir.join("images").join(format!("{name}.png")))?;
            labels.save_png(&out_dir.join("labels").join(format!("{name}.png")))?;
            depth.save_fdpt(&out_dir.join("depth").join(format!("{name}.fdpt")))?;
            masks.save(&MaskSet::cache_path(&out_dir.join("masks"), name))?;
            pseudo.save_fdpt(&out_dir.join("pseudo_depth").join(format!("{name}.fdpt")))?;
            Ok(())
        })?;
    let manifest = DatasetManifest {
        seed,
        n_images,
        names,
        scene_distribution: dist.clone(),
        shift: shift.clone(),
        oracle: oracle.clone(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
