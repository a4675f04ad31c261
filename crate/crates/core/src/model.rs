//! Tiny per-pixel multi-task model: 11 handcrafted features, one shared tanh
//! mixing layer, a linear softmax segmentation head, and a linear depth head.
//! Small enough for analytic gradients, structured enough that "shared
//! backbone + task heads" and the EMA scope are meaningful.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DepthMap, Image, LabelMap, ProbMap, IGNORE};
use crate::rng::Rng;

/// Feature dimension: RGB, 3x3 channel means, 3x3 channel stds, normalized
/// row and column.
pub const FEATURE_DIM: usize = 11;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch")]
    ShapeMismatch,
    #[error("bad magic in checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-pixel feature vectors, deterministic given the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Per pixel: 3 RGB values, 3 local 3x3 channel means, 3 local 3x3 channel
/// population standard deviations (edge pixels use the clipped window), and
/// normalized row/column indices in [0, 1].
pub fn extract_features(img: &Image) -> FeatureGrid {
    let (h, w) = (img.height, img.width);
    let mut data = Vec::with_capacity(h * w * FEATURE_DIM);
    for r in 0..h {
        for c in 0..w {
            let px = img.pixel(r, c);
            let r0 = r.saturating_sub(1);
            let r1 = (r + 1).min(h - 1);
            let c0 = c.saturating_sub(1);
            let c1 = (c + 1).min(w - 1);
            let n = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            let mut mean = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let p = img.pixel(rr, cc);
                    for ch in 0..3 {
                        mean[ch] += p[ch];
                        sq[ch] += p[ch] * p[ch];
                    }
                }
            }
            for ch in 0..3 {
                mean[ch] /= n;
                sq[ch] = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0).sqrt();
            }
            let nr = if h > 1 { r as f64 / (h - 1) as f64 } else { 0.0 };
            let nc = if w > 1 { c as f64 / (w - 1) as f64 } else { 0.0 };
            data.extend_from_slice(&[
                px[0], px[1], px[2], mean[0], mean[1], mean[2], sq[0], sq[1], sq[2], nr, nc,
            ]);
        }
    }
    FeatureGrid {
        height: h,
        width: w,
        dim: FEATURE_DIM,
        data,
    }
}

/// Shared tanh layer plus segmentation and depth heads over a flat parameter
/// vector. Layout: shared weights (F x F row-major), shared bias (F), seg
/// head (C x F row-major), seg bias (C), depth head (F), depth bias (1).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    pub num_classes: usize,
    pub params: Vec<f64>,
}

const FMDL_MAGIC: &[u8; 4] = b"FMDL";
const FMDL_VERSION: u16 = 1;

impl MultiTaskModel {
    pub fn param_len(num_classes: usize) -> usize {
        let f = FEATURE_DIM;
        f * f + f + num_classes * f + num_classes + f + 1
    }

    /// Length of the EMA-tracked prefix: shared layer plus segmentation head.
    pub fn tracked_len(num_classes: usize) -> usize {
        let f = FEATURE_DIM;
        f * f + f + num_classes * f + num_classes
    }

    /// Uniform init in [-0.1, 0.1] from the seeded generator.
    pub fn init(num_classes: usize, rng: &mut Rng) -> Self {
        let params = (0..Self::param_len(num_classes))
            .map(|_| rng.uniform(-0.1, 0.1))
            .collect();
        MultiTaskModel {
            num_classes,
            params,
        }
    }

    pub fn zeros(num_classes: usize) -> Self {
        MultiTaskModel {
            num_classes,
            params: vec![0.0; Self::param_len(num_classes)],
        }
    }

    fn offsets(&self) -> (usize, usize, usize, usize, usize) {
        let f = FEATURE_DIM;
        let c = self.num_classes;
        let shared_b = f * f;
        let seg_w = shared_b + f;
        let seg_b = seg_w + c * f;
        let depth_w = seg_b + c;
        let depth_b = depth_w + f;
        (shared_b, seg_w, seg_b, depth_w, depth_b)
    }

    fn hidden(&self, phi: &[f64], out: &mut [f64]) {
        let f = FEATURE_DIM;
        let (shared_b, ..) = self.offsets();
        for j in 0..f {
            let mut z = self.params[shared_b + j];
            let row = &self.params[j * f..(j + 1) * f];
            for k in 0..f {
                z += row[k] * phi[k];
            }
            out[j] = z.tanh();
        }
    }

    /// Per-pixel softmax probabilities and depth from one feature grid.
    /// Depth is unconstrained (the SSI loss is affine-invariant) and every
    /// depth pixel is marked valid.
    pub fn forward(&self, features: &FeatureGrid) -> (ProbMap, DepthMap) {
        let probs = self.forward_seg(features);
        let depth = self.forward_depth(features);
        (probs, depth)
    }

    pub fn forward_seg(&self, features: &FeatureGrid) -> ProbMap {
        let f = FEATURE_DIM;
        let c = self.num_classes;
        let (_, seg_w, seg_b, ..) = self.offsets();
        let npix = features.height * features.width;
        let mut data = Vec::with_capacity(npix * c);
        let mut h = vec![0.0; f];
        for px in 0..npix {
            self.hidden(features.pixel(px), &mut h);
            let mut logits = vec![0.0; c];
            for cls in 0..c {
                let mut z = self.params[seg_b + cls];
                let row = &self.params[seg_w + cls * f..seg_w + (cls + 1) * f];
                for j in 0..f {
                    z += row[j] * h[j];
                }
                logits[cls] = z;
            }
            softmax_in_place(&mut logits);
            data.extend_from_slice(&logits);
        }
        ProbMap {
            height: features.height,
            width: features.width,
            num_classes: c,
            data,
        }
    }

    pub fn forward_depth(&self, features: &FeatureGrid) -> DepthMap {
        let f = FEATURE_DIM;
        let (_, _, _, depth_w, depth_b) = self.offsets();
        let npix = features.height * features.width;
        let mut data = Vec::with_capacity(npix);
        let mut h = vec![0.0; f];
        for px in 0..npix {
            self.hidden(features.pixel(px), &mut h);
            let mut z = self.params[depth_b];
            for j in 0..f {
                z += self.params[depth_w + j] * h[j];
            }
            data.push(z);
        }
        DepthMap {
            height: features.height,
            width: features.width,
            data,
            valid: vec![true; npix],
        }
    }

    /// Full analytic gradient through both heads and the shared tanh layer,
    /// additive over pixels. `grad_seg_logits` is H*W*C (may be empty when
    /// only depth contributes), `grad_depth` is H*W (may be empty likewise).
    pub fn backward(
        &self,
        features: &FeatureGrid,
        grad_seg_logits: &[f64],
        grad_depth: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let f = FEATURE_DIM;
        let c = self.num_classes;
        let npix = features.height * features.width;
        if !grad_seg_logits.is_empty() && grad_seg_logits.len() != npix * c {
            return Err(ModelError::LengthMismatch(grad_seg_logits.len(), npix * c));
        }
        if !grad_depth.is_empty() && grad_depth.len() != npix {
            return Err(ModelError::LengthMismatch(grad_depth.len(), npix));
        }
        let (shared_b, seg_w, seg_b, depth_w, depth_b) = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let mut h = vec![0.0; f];
        let mut delta = vec![0.0; f];
        for px in 0..npix {
            let phi = features.pixel(px);
            self.hidden(phi, &mut h);

            delta.iter_mut().for_each(|d| *d = 0.0);
            if !grad_seg_logits.is_empty() {
                let g = &grad_seg_logits[px * c..(px + 1) * c];
                for cls in 0..c {
                    let gc = g[cls];
                    if gc == 0.0 {
                        continue;
                    }
                    grad[seg_b + cls] += gc;
                    let row = seg_w + cls * f;
                    for j in 0..f {
                        grad[row + j] += gc * h[j];
                        delta[j] += gc * self.params[row + j];
                    }
                }
            }
            if !grad_depth.is_empty() {
                let gd = grad_depth[px];
                if gd != 0.0 {
                    grad[depth_b] += gd;
                    for j in 0..f {
                        grad[depth_w + j] += gd * h[j];
                        delta[j] += gd * self.params[depth_w + j];
                    }
                }
            }
            for j in 0..f {
                let dz = delta[j] * (1.0 - h[j] * h[j]);
                if dz == 0.0 {
                    continue;
                }
                grad[shared_b + j] += dz;
                let row = j * f;
                for k in 0..f {
                    grad[row + k] += dz * phi[k];
                }
            }
        }
        Ok(grad)
    }

    /// Checkpoint form: magic "FMDL", version u16 LE (=1), class count u32
    /// LE, feature dim u32 LE, then all parameters as float32 LE in layout
    /// order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 4 * self.params.len());
        out.extend_from_slice(FMDL_MAGIC);
        out.extend_from_slice(&FMDL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 14 {
            return Err(ModelError::Truncated);
        }
        if &bytes[0..4] != FMDL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FMDL_VERSION {
            return Err(ModelError::BadVersion(version));
        }
        let c = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if f != FEATURE_DIM {
            return Err(ModelError::ShapeMismatch);
        }
        let n = Self::param_len(c);
        if bytes.len() < 14 + 4 * n {
            return Err(ModelError::Truncated);
        }
        let params = (0..n)
            .map(|i| {
                let off = 14 + 4 * i;
                f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
            })
            .collect();
        Ok(MultiTaskModel {
            num_classes: c,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

/// Weighted mean of -log p(label) over the weighted pixels, plus the gradient
/// w.r.t. the pre-softmax logits. IGNORE pixels contribute nothing regardless
/// of their weight; with total weight 0 the loss and gradient are zero.
pub fn ce_loss(
    probs: &ProbMap,
    labels: &LabelMap,
    pixel_weights: &[f64],
) -> Result<(f64, Vec<f64>), ModelError> {
    let npix = probs.num_pixels();
    if labels.height != probs.height
        || labels.width != probs.width
        || pixel_weights.len() != npix
    {
        return Err(ModelError::ShapeMismatch);
    }
    let c = probs.num_classes;
    let mut total_w = 0.0;
    for (px, &w) in pixel_weights.iter().enumerate() {
        if labels.data[px] != IGNORE {
            total_w += w;
        }
    }
    let mut grad = vec![0.0; npix * c];
    if total_w == 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for px in 0..npix {
        let y = labels.data[px];
        if y == IGNORE {
            continue;
        }
        let w = pixel_weights[px];
        if w == 0.0 {
            continue;
        }
        let p = probs.pixel(px);
        loss += -w * p[y as usize].max(1e-300).ln();
        let scale = w / total_w;
        for cls in 0..c {
            let indicator = if cls == y as usize { 1.0 } else { 0.0 };
            grad[px * c + cls] = scale * (p[cls] - indicator);
        }
    }
    Ok((loss / total_w, grad))
}

/// Plain gradient step: params - lr * grad, in place.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<(), ModelError> {
    if params.len() != grad.len() {
        return Err(ModelError::LengthMismatch(params.len(), grad.len()));
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// Which loss supervises the depth head; the plain variant exists only as an
/// ablation showing why scale/shift invariance matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthLossKind {
    Ssi,
    Plain,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// EMA smoothing factor in (0, 1].
    pub alpha: f64,
    /// Depth loss weight.
    pub beta: f64,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    /// Confidence threshold for the pseudo-label quality weight.
    pub quality_tau: f64,
    /// Class-mix augmentation for the segmentation stream.
    pub mix: bool,
    /// Majority-vote refinement of teacher pseudo-labels.
    pub refine: bool,
    /// Source-only warmup steps before the teacher is initialized (capped at
    /// `iters`; warmup steps count against the iteration budget).
    pub warmup: usize,
    /// Crop size for the depth-stream crop/flip augmentation.
    pub crop: usize,
    /// Photometric jitter strength for target-stream augmentation.
    pub jitter: f64,
    /// Photometric jitter strength applied to source images.
    pub src_jitter: f64,
    pub depth_loss: DepthLossKind,
    /// Disable every target-domain loss (the source-only baseline).
    pub source_only: bool,
    /// Steps between trace records.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.999,
            // the RMSE gradient does not vanish as the depth loss converges,
            // so a large weight keeps perturbing the shared layer long after
            // the depth head has fit; 0.01 trains depth fully without
            // degrading segmentation at this model size
            beta: 0.01,
            // high enough that the 200-step warmup already fits the rare
            // classes; a teacher that is weak on a class when self-training
            // starts tends to erode that class instead of improving it
            lr: 1.0,
            iters: 2000,
            batch: 4,
            seed: 0,
            quality_tau: 0.968,
            mix: true,
            refine: true,
            warmup: 200,
            crop: 56,
            jitter: 0.5,
            src_jitter: 0.2,
            depth_loss: DepthLossKind::Ssi,
            source_only: false,
            log_every: 100,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let data = (0..h * w * 3).map(|_| rng.next_f64()).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn features_constant_image() {
        let img = Image::filled(4, 4, 0.5);
        let feats = extract_features(&img);
        for px in 0..16 {
            let f = feats.pixel(px);
            assert_eq!(&f[0..3], &[0.5, 0.5, 0.5]);
            for ch in 0..3 {
                assert!((f[3 + ch] - 0.5).abs() < 1e-12); // window means
                assert!(f[6 + ch].abs() < 1e-7); // window stds
            }
        }
        assert_eq!(&feats.pixel(0)[9..11], &[0.0, 0.0]); // top-left coords
        assert_eq!(&feats.pixel(15)[9..11], &[1.0, 1.0]);
    }

    #[test]
    fn forward_zero_params_uniform_probs_zero_depth() {
        let img = fixture_image(3, 3, 1);
        let feats = extract_features(&img);
        let model = MultiTaskModel::zeros(4);
        let (probs, depth) = model.forward(&feats);
        for px in 0..9 {
            for &p in probs.pixel(px) {
                assert!((p - 0.25).abs() < 1e-12);
            }
            assert_eq!(depth.data[px], 0.0);
            assert!(depth.valid[px]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let img = fixture_image(5, 4, 2);
        let feats = extract_features(&img);
        let model = MultiTaskModel::init(5, &mut Rng::new(3));
        let (probs, _) = model.forward(&feats);
        for px in 0..20 {
            let s: f64 = probs.pixel(px).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_uniform_is_ln_c() {
        let c = 4;
        let probs = ProbMap::new(2, 2, c, vec![0.25; 16]).unwrap();
        let labels = LabelMap::new(2, 2, c as u8, vec![0, 1, 2, 3]).unwrap();
        let (loss, _) = ce_loss(&probs, &labels, &[1.0; 4]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_one_hot_correct_is_zero() {
        let probs = ProbMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
        let (loss, grad) = ce_loss(&probs, &labels, &[1.0; 2]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn ce_zero_weight_is_zero() {
        let probs = ProbMap::new(1, 2, 2, vec![0.5; 4]).unwrap();
        let labels = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
        let (loss, grad) = ce_loss(&probs, &labels, &[0.0; 2]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let img = fixture_image(3, 3, 4);
        let feats = extract_features(&img);
        let model = MultiTaskModel::init(3, &mut Rng::new(5));
        let grad = model
            .backward(&feats, &vec![0.0; 27], &vec![0.0; 9])
            .unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn head_separation() {
        let img = fixture_image(3, 3, 6);
        let feats = extract_features(&img);
        let model = MultiTaskModel::init(3, &mut Rng::new(7));
        let mut rng = Rng::new(8);
        let gd: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let grad = model.backward(&feats, &[], &gd).unwrap();
        let (_, seg_w, _, depth_w, _) = model.offsets();
        // seg head block untouched by a depth-only upstream gradient
        assert!(grad[seg_w..depth_w].iter().all(|&g| g == 0.0));
        assert!(grad[depth_w..].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, 2.0];
        sgd_step(&mut p, &[1.0, -1.0], 0.5).unwrap();
        assert_eq!(p, vec![0.5, 2.5]);
        let mut q = vec![1.0, 2.0];
        sgd_step(&mut q, &[1.0, -1.0], 0.0).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
        assert!(sgd_step(&mut q, &[1.0], 0.1).is_err());
    }

    #[test]
    fn sgd_two_half_steps_equal_one() {
        let g = vec![0.3, -0.7, 1.1];
        let mut a = vec![1.0, 2.0, 3.0];
        let mut b = a.clone();
        sgd_step(&mut a, &g, 0.2).unwrap();
        sgd_step(&mut b, &g, 0.1).unwrap();
        sgd_step(&mut b, &g, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = MultiTaskModel::init(5, &mut Rng::new(9));
        let bytes = model.to_bytes();
        let back = MultiTaskModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.num_classes, 5);
        for (a, b) in model.params.iter().zip(&back.params) {
            assert!((a - b).abs() < 1e-6); // f32 quantization
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_bad_magic() {
        let mut bytes = MultiTaskModel::zeros(3).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            MultiTaskModel::from_bytes(&bytes),
            Err(ModelError::BadMagic)
        ));
    }

    // Central finite differences of the CE loss w.r.t. logits, via a softmax
    // re-evaluation; independent of the analytic path.
    #[test]
    fn ce_grad_matches_finite_differences() {
        let c = 4;
        let npix = 6;
        let mut rng = Rng::new(10);
        let logits: Vec<f64> = (0..npix * c).map(|_| rng.normal()).collect();
        let labels = LabelMap::new(1, npix, c as u8, vec![0, 1, 2, 3, 1, IGNORE]).unwrap();
        let weights: Vec<f64> = (0..npix).map(|_| rng.next_f64()).collect();

        let eval = |logits: &[f64]| -> f64 {
            let mut data = Vec::with_capacity(npix * c);
            for px in 0..npix {
                let mut row = logits[px * c..(px + 1) * c].to_vec();
                softmax_in_place(&mut row);
                data.extend_from_slice(&row);
            }
            let probs = ProbMap::new(1, npix, c, data).unwrap();
            ce_loss(&probs, &labels, &weights).unwrap().0
        };

        let mut data = Vec::with_capacity(npix * c);
        for px in 0..npix {
            let mut row = logits[px * c..(px + 1) * c].to_vec();
            softmax_in_place(&mut row);
            data.extend_from_slice(&row);
        }
        let probs = ProbMap::new(1, npix, c, data).unwrap();
        let (_, grad) = ce_loss(&probs, &labels, &weights).unwrap();

        let step = 1e-4;
        for i in 0..npix * c {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus[i] += step;
            minus[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "logit {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }
}
