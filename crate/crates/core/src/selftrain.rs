//! EMA self-training loop: a student learns from source labels, refined
//! teacher pseudo-labels on the target (class-mixed for the segmentation
//! stream), and oracle pseudo-depth through the SSI loss. The teacher tracks
//! the student's shared layer and segmentation head by exponential moving
//! average and is never touched by gradient descent; it carries no depth
//! head because depth supervision comes from the oracle.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{class_mix, photometric_jitter, random_crop_flip, AugmentError};
use crate::depthloss::{ssi_rmse_grad, ssi_rmse_loss, DepthLossError};
use crate::eval::{evaluate_depth, ConfusionMatrix, DepthEvalConfig, EvalError};
use crate::grid::{argmax_labels, DepthMap, GridError, Image, LabelMap, ProbMap, IGNORE};
use crate::maskcache::{MaskError, MaskSet};
use crate::model::{
    ce_loss, extract_features, sgd_step, DepthLossKind, ModelError, MultiTaskModel, TrainConfig,
};
use crate::refine::{majority_vote_refine, RefineError};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("alpha {0} outside (0, 1]")]
    BadAlpha(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset under {0}")]
    EmptyDataset(String),
    #[error("missing {kind} for image {name}")]
    MissingInput { kind: &'static str, name: String },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("mask: {0}")]
    Mask(#[from] MaskError),
    #[error("refine: {0}")]
    Refine(#[from] RefineError),
    #[error("augment: {0}")]
    Augment(#[from] AugmentError),
    #[error("depth loss: {0}")]
    DepthLoss(#[from] DepthLossError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Elementwise alpha * teacher + (1 - alpha) * student.
pub fn ema_update(teacher: &mut [f64], student: &[f64], alpha: f64) -> Result<(), TrainError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(TrainError::BadAlpha(alpha));
    }
    if teacher.len() != student.len() {
        return Err(TrainError::LengthMismatch(teacher.len(), student.len()));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + (1.0 - alpha) * *s;
    }
    Ok(())
}

/// Split a student parameter vector into the EMA-tracked partition (shared
/// layer + segmentation head) and the frozen remainder (depth head).
pub fn ema_scope(params: &[f64], num_classes: usize) -> (&[f64], &[f64]) {
    params.split_at(MultiTaskModel::tracked_len(num_classes))
}

/// EMA teacher: shared layer + segmentation head only.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub num_classes: usize,
    pub params: Vec<f64>,
}

impl Teacher {
    pub fn from_student(student: &MultiTaskModel) -> Self {
        let (tracked, _) = ema_scope(&student.params, student.num_classes);
        Teacher {
            num_classes: student.num_classes,
            params: tracked.to_vec(),
        }
    }

    pub fn update(&mut self, student: &MultiTaskModel, alpha: f64) -> Result<(), TrainError> {
        let (tracked, _) = ema_scope(&student.params, student.num_classes);
        ema_update(&mut self.params, tracked, alpha)
    }

    /// View the teacher as a model whose depth head is zero (never used).
    pub fn seg_model(&self) -> MultiTaskModel {
        let mut model = MultiTaskModel::zeros(self.num_classes);
        model.params[..self.params.len()].copy_from_slice(&self.params);
        model
    }
}

/// Teacher pseudo-labels on the clean target image: argmax over the teacher's
/// probabilities, optionally refined by mask majority voting. The quality
/// weight q is the fraction of pixels whose pre-refinement max probability
/// reaches `quality_tau`.
pub fn make_pseudo_label(
    teacher: &Teacher,
    tgt_img: &Image,
    mask_set: &MaskSet,
    quality_tau: f64,
    refine: bool,
) -> Result<(LabelMap, f64, ProbMap), TrainError> {
    let feats = extract_features(tgt_img);
    let probs = teacher.seg_model().forward_seg(&feats);
    let labels = argmax_labels(&probs);
    let npix = probs.num_pixels();
    let mut confident = 0usize;
    for px in 0..npix {
        let max = probs.pixel(px).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max >= quality_tau {
            confident += 1;
        }
    }
    let q = confident as f64 / npix as f64;
    let labels = if refine {
        majority_vote_refine(&labels, &probs, mask_set)?
    } else {
        labels
    };
    Ok((labels, q, probs))
}

/// Labeled source domain. Depth is deliberately absent: no source depth
/// supervision exists anywhere in the pipeline.
#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub names: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

/// Unlabeled target domain plus its oracle caches; ground truth is loaded
/// only when requested and only feeds evaluation.
#[derive(Debug, Clone)]
pub struct TargetDataset {
    pub names: Vec<String>,
    pub images: Vec<Image>,
    pub masks: Vec<MaskSet>,
    pub pseudo_depth: Vec<DepthMap>,
    pub eval_labels: Option<Vec<LabelMap>>,
    pub eval_depth: Option<Vec<DepthMap>>,
}

fn list_stems(dir: &Path, ext: &str) -> Result<Vec<String>, TrainError> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|_| TrainError::EmptyDataset(dir.display().to_string()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().is_some_and(|x| x == ext) {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(TrainError::EmptyDataset(dir.display().to_string()));
    }
    Ok(stems)
}

impl SourceDataset {
    pub fn load(dir: &Path, num_classes: u8) -> Result<Self, TrainError> {
        let names = list_stems(&dir.join("images"), "png")?;
        let mut images = Vec::with_capacity(names.len());
        let mut labels = Vec::with_capacity(names.len());
        for name in &names {
            images.push(Image::load_png(&dir.join("images").join(format!("{name}.png")))?);
            let lbl_path = dir.join("labels").join(format!("{name}.png"));
            if !lbl_path.exists() {
                return Err(TrainError::MissingInput {
                    kind: "source label",
                    name: name.clone(),
                });
            }
            labels.push(LabelMap::load_png(&lbl_path, num_classes)?);
        }
        Ok(SourceDataset {
            names,
            images,
            labels,
        })
    }
}

impl TargetDataset {
    pub fn load(dir: &Path, num_classes: u8, with_eval: bool) -> Result<Self, TrainError> {
        let names = list_stems(&dir.join("images"), "png")?;
        let mut images = Vec::with_capacity(names.len());
        let mut masks = Vec::with_capacity(names.len());
        let mut pseudo_depth = Vec::with_capacity(names.len());
        for name in &names {
            images.push(Image::load_png(&dir.join("images").join(format!("{name}.png")))?);
            let mask_path = MaskSet::cache_path(&dir.join("masks"), name);
            if !mask_path.exists() {
                return Err(TrainError::MissingInput {
                    kind: "mask cache",
                    name: name.clone(),
                });
            }
            masks.push(MaskSet::load(&mask_path)?);
            let pd_path = dir.join("pseudo_depth").join(format!("{name}.fdpt"));
            if !pd_path.exists() {
                return Err(TrainError::MissingInput {
                    kind: "pseudo-depth",
                    name: name.clone(),
                });
            }
            pseudo_depth.push(DepthMap::load_fdpt(&pd_path)?);
        }
        let (eval_labels, eval_depth) = if with_eval {
            let mut ls = Vec::with_capacity(names.len());
            let mut ds = Vec::with_capacity(names.len());
            for name in &names {
                ls.push(LabelMap::load_png(
                    &dir.join("labels").join(format!("{name}.png")),
                    num_classes,
                )?);
                ds.push(DepthMap::load_fdpt(
                    &dir.join("depth").join(format!("{name}.fdpt")),
                )?);
            }
            (Some(ls), Some(ds))
        } else {
            (None, None)
        };
        Ok(TargetDataset {
            names,
            images,
            masks,
            pseudo_depth,
            eval_labels,
            eval_depth,
        })
    }
}

/// Loss breakdown of one step.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StepStats {
    pub l_ce_s: f64,
    pub l_ce_t: f64,
    pub l_rmse_t: f64,
    pub q_mean: f64,
}

/// One training step: source CE, class-mixed target CE against refined
/// pseudo-labels, and the depth loss on a crop/flip/jitter-augmented target
/// (never class-mixed), followed by one SGD step and one EMA update of the
/// teacher when present.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    student: &mut MultiTaskModel,
    teacher: Option<&mut Teacher>,
    source: &SourceDataset,
    src_idx: &[usize],
    target: &TargetDataset,
    tgt_idx: &[usize],
    cfg: &TrainConfig,
    step_rng: &mut Rng,
) -> Result<StepStats, TrainError> {
    if src_idx.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let target_enabled = teacher.is_some() && !cfg.source_only;
    if target_enabled && tgt_idx.is_empty() {
        return Err(TrainError::EmptyBatch);
    }

    // independent randomness per stream so toggling one augmentation cannot
    // perturb another
    let step_key = step_rng.next_u64();

    let mut grad = vec![0.0; student.params.len()];
    let mut stats = StepStats::default();

    let n_src = src_idx.len() as f64;
    for (slot, &i) in src_idx.iter().enumerate() {
        let mut rng = Rng::substream(step_key, 1000 + slot as u64);
        let img = photometric_jitter(&source.images[i], &mut rng, cfg.src_jitter);
        let feats = extract_features(&img);
        let probs = student.forward_seg(&feats);
        let weights = vec![1.0; probs.num_pixels()];
        let (loss, mut glogits) = ce_loss(&probs, &source.labels[i], &weights)?;
        stats.l_ce_s += loss / n_src;
        for g in glogits.iter_mut() {
            *g /= n_src;
        }
        accumulate(&mut grad, &student.backward(&feats, &glogits, &[])?);
    }

    if target_enabled {
        let teacher_ref: &Teacher = teacher.as_deref().expect("target_enabled");
        let n_tgt = tgt_idx.len() as f64;
        for (slot, &i) in tgt_idx.iter().enumerate() {
            let mut seg_rng = Rng::substream(step_key, 2 * slot as u64);
            let mut depth_rng = Rng::substream(step_key, 2 * slot as u64 + 1);

            let (pseudo, q, _) = make_pseudo_label(
                teacher_ref,
                &target.images[i],
                &target.masks[i],
                cfg.quality_tau,
                cfg.refine,
            )?;
            stats.q_mean += q / n_tgt;

            // segmentation stream
            let (seg_img, seg_labels, weights) = if cfg.mix {
                let src_partner = src_idx[slot % src_idx.len()];
                let (mixed_img, mixed_labels, paste) = class_mix(
                    &source.images[src_partner],
                    &source.labels[src_partner],
                    &target.images[i],
                    &pseudo,
                    &mut seg_rng,
                )?;
                let weights: Vec<f64> =
                    paste.iter().map(|&p| if p { 1.0 } else { q }).collect();
                (
                    photometric_jitter(&mixed_img, &mut seg_rng, cfg.jitter),
                    mixed_labels,
                    weights,
                )
            } else {
                let img = photometric_jitter(&target.images[i], &mut seg_rng, cfg.jitter);
                let npix = img.height * img.width;
                (img, pseudo, vec![q; npix])
            };
            let feats = extract_features(&seg_img);
            let probs = student.forward_seg(&feats);
            let (loss, mut glogits) = ce_loss(&probs, &seg_labels, &weights)?;
            stats.l_ce_t += loss / n_tgt;
            for g in glogits.iter_mut() {
                *g /= n_tgt;
            }
            accumulate(&mut grad, &student.backward(&feats, &glogits, &[])?);

            // depth stream: jitter + shared crop/flip, never class-mixed
            if cfg.beta > 0.0 {
                let jittered = photometric_jitter(&target.images[i], &mut depth_rng, cfg.jitter);
                let dummy = LabelMap::filled(jittered.height, jittered.width, 1, 0);
                let (crop_img, _, crop_pd) = random_crop_flip(
                    &jittered,
                    &dummy,
                    &target.pseudo_depth[i],
                    &mut depth_rng,
                    cfg.crop.min(jittered.height).min(jittered.width),
                )?;
                let feats = extract_features(&crop_img);
                let pred = student.forward_depth(&feats);
                let (loss, mut gdepth) = match cfg.depth_loss {
                    DepthLossKind::Ssi => (
                        ssi_rmse_loss(&pred, &crop_pd)?,
                        ssi_rmse_grad(&pred, &crop_pd)?,
                    ),
                    DepthLossKind::Plain => plain_rmse(&pred, &crop_pd)?,
                };
                stats.l_rmse_t += loss / n_tgt;
                let scale = cfg.beta / n_tgt;
                for g in gdepth.iter_mut() {
                    *g *= scale;
                }
                accumulate(&mut grad, &student.backward(&feats, &[], &gdepth)?);
            }
        }
    }

    sgd_step(&mut student.params, &grad, cfg.lr)?;
    if let Some(teacher) = teacher {
        if !cfg.source_only {
            teacher.update(student, cfg.alpha)?;
        }
    }
    Ok(stats)
}

fn accumulate(acc: &mut [f64], grad: &[f64]) {
    for (a, g) in acc.iter_mut().zip(grad) {
        *a += g;
    }
}

/// Un-normalized regression against the raw pseudo-depth, for the depth-loss
/// ablation: the standard squared-error gradient (p−q)/n at metric scale,
/// with the RMSE value reported in the trace. Without SSI normalization the
/// gradient magnitude follows the oracle's arbitrary affine scale instead of
/// being dimensionless.
fn plain_rmse(pred: &DepthMap, pseudo: &DepthMap) -> Result<(f64, Vec<f64>), TrainError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.data.len() {
        if pred.valid[i] && pseudo.valid[i] {
            let d = pred.data[i] - pseudo.data[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::DepthLoss(DepthLossError::NoValidDepth));
    }
    let loss = (sum / n as f64).sqrt();
    let mut grad = vec![0.0; pred.data.len()];
    for i in 0..pred.data.len() {
        if pred.valid[i] && pseudo.valid[i] {
            grad[i] = (pred.data[i] - pseudo.data[i]) / n as f64;
        }
    }
    Ok((loss, grad))
}

/// One record per logging interval: interval-mean losses plus periodic
/// target metrics when ground truth is available.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l_ce_s: f64,
    pub l_ce_t: f64,
    pub l_rmse_t: f64,
    pub q_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pl_acc_raw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pl_acc_refined: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MultiTaskModel,
    pub teacher: Option<Teacher>,
    pub trace: Vec<TraceRecord>,
}

/// Number of target images used for periodic metrics.
const EVAL_SUBSET: usize = 32;

/// Run the full loop: seeded init, a source-only warmup (capped at the
/// iteration budget), teacher initialization as a copy of the warmed-up
/// student, then adaptation steps. Deterministic given `cfg.seed`.
pub fn train_loop(
    source: &SourceDataset,
    target: &TargetDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let num_classes = crate::synthworld::NUM_CLASSES as usize;
    let mut init_rng = Rng::substream(cfg.seed, u64::MAX);
    let mut student = MultiTaskModel::init(num_classes, &mut init_rng);
    let mut teacher: Option<Teacher> = None;
    let warmup = if cfg.source_only {
        cfg.iters
    } else {
        cfg.warmup.min(cfg.iters)
    };

    let mut trace = Vec::new();
    let mut interval = StepStats::default();
    let mut interval_steps = 0usize;
    for step in 0..cfg.iters {
        if step == warmup && !cfg.source_only {
            teacher = Some(Teacher::from_student(&student));
        }
        let mut step_rng = Rng::substream(cfg.seed, step as u64);
        let src_idx: Vec<usize> = (0..cfg.batch)
            .map(|_| step_rng.index(source.images.len()))
            .collect();
        let tgt_idx: Vec<usize> = (0..cfg.batch)
            .map(|_| step_rng.index(target.images.len()))
            .collect();
        let stats = train_step(
            &mut student,
            teacher.as_mut(),
            source,
            &src_idx,
            target,
            &tgt_idx,
            cfg,
            &mut step_rng,
        )?;
        interval.l_ce_s += stats.l_ce_s;
        interval.l_ce_t += stats.l_ce_t;
        interval.l_rmse_t += stats.l_rmse_t;
        interval.q_mean += stats.q_mean;
        interval_steps += 1;

        let last = step + 1 == cfg.iters;
        if (step + 1) % cfg.log_every == 0 || last {
            let n = interval_steps as f64;
            let mut record = TraceRecord {
                step: step + 1,
                l_ce_s: interval.l_ce_s / n,
                l_ce_t: interval.l_ce_t / n,
                l_rmse_t: interval.l_rmse_t / n,
                q_mean: interval.q_mean / n,
                miou: None,
                rmse_m: None,
                pl_acc_raw: None,
                pl_acc_refined: None,
            };
            fill_metrics(&mut record, &student, teacher.as_ref(), target, cfg)?;
            trace.push(record);
            interval = StepStats::default();
            interval_steps = 0;
        }
    }

    Ok(TrainOutcome {
        model: student,
        teacher,
        trace,
    })
}

/// The same loop with every target-domain loss disabled.
pub fn source_only_baseline(
    source: &SourceDataset,
    target: &TargetDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut cfg = cfg.clone();
    cfg.source_only = true;
    train_loop(source, &target.clone(), &cfg)
}

fn fill_metrics(
    record: &mut TraceRecord,
    student: &MultiTaskModel,
    teacher: Option<&Teacher>,
    target: &TargetDataset,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let (Some(eval_labels), Some(eval_depth)) = (&target.eval_labels, &target.eval_depth) else {
        return Ok(());
    };
    let n = target.images.len().min(EVAL_SUBSET);
    let mut cm = ConfusionMatrix::new(student.num_classes);
    let mut rmse_sum = 0.0;
    let mut rmse_n = 0usize;
    let mut raw_correct = 0usize;
    let mut refined_correct = 0usize;
    let mut scored = 0usize;
    let depth_cfg = DepthEvalConfig::default();
    for i in 0..n {
        let feats = extract_features(&target.images[i]);
        let (probs, depth) = student.forward(&feats);
        cm.accumulate(&argmax_labels(&probs), &eval_labels[i])?;
        if let Ok(r) = evaluate_depth(&depth, &eval_depth[i], &depth_cfg) {
            rmse_sum += r;
            rmse_n += 1;
        }
        if let Some(teacher) = teacher {
            let (refined, _, tprobs) = make_pseudo_label(
                teacher,
                &target.images[i],
                &target.masks[i],
                cfg.quality_tau,
                true,
            )?;
            let raw = argmax_labels(&tprobs);
            for px in 0..raw.data.len() {
                let gt = eval_labels[i].data[px];
                if gt == IGNORE {
                    continue;
                }
                scored += 1;
                if raw.data[px] == gt {
                    raw_correct += 1;
                }
                if refined.data[px] == gt {
                    refined_correct += 1;
                }
            }
        }
    }
    if let Ok((_, miou)) = cm.iou() {
        record.miou = Some(miou);
    }
    if rmse_n > 0 {
        record.rmse_m = Some(rmse_sum / rmse_n as f64);
    }
    if scored > 0 {
        record.pl_acc_raw = Some(raw_correct as f64 / scored as f64);
        record.pl_acc_refined = Some(refined_correct as f64 / scored as f64);
    }
    Ok(())
}

/// Write a trace as JSON lines, one record per logging interval.
pub fn write_trace(trace: &[TraceRecord], path: &PathBuf) -> Result<(), TrainError> {
    let mut out = String::new();
    for record in trace {
        out.push_str(&serde_json::to_string(record).expect("trace serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
