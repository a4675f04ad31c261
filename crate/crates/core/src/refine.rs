//! Majority-vote refinement of teacher pseudo-labels with cached instance
//! masks: each mask is overwritten with the class the teacher predicts most
//! often inside it. Masks are processed in decreasing-area order so small
//! masks refine last and can overwrite the interiors of large regions.

use std::path::Path;

use thiserror::Error;

use crate::grid::{GridError, LabelMap, ProbMap, IGNORE};
use crate::maskcache::{MaskError, MaskSet};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("shape mismatch: labels {0}x{1}, probs {2}x{3}, masks {4}x{5}")]
    ShapeMismatch(usize, usize, usize, usize, usize, usize),
    #[error("missing directory {0}")]
    MissingDir(String),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("mask cache: {0}")]
    Mask(#[from] MaskError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Overwrite every non-IGNORE pixel of each mask with the strict plurality of
/// the teacher's labels inside it. Ties break toward the class with the
/// larger summed teacher probability within the mask, then toward the smaller
/// class index. A mask containing only IGNORE pixels leaves the map
/// unchanged; uncovered pixels keep their teacher label.
pub fn majority_vote_refine(
    teacher_labels: &LabelMap,
    teacher_probs: &ProbMap,
    masks: &MaskSet,
) -> Result<LabelMap, RefineError> {
    if teacher_labels.height != teacher_probs.height
        || teacher_labels.width != teacher_probs.width
        || teacher_labels.height != masks.height
        || teacher_labels.width != masks.width
    {
        return Err(RefineError::ShapeMismatch(
            teacher_labels.height,
            teacher_labels.width,
            teacher_probs.height,
            teacher_probs.width,
            masks.height,
            masks.width,
        ));
    }

    let num_classes = teacher_labels.num_classes as usize;
    let mut refined = teacher_labels.clone();

    // decreasing area, original order on equal areas
    let mut order: Vec<usize> = (0..masks.masks.len()).collect();
    order.sort_by(|&a, &b| {
        masks.masks[b]
            .area
            .cmp(&masks.masks[a].area)
            .then(a.cmp(&b))
    });

    let mut counts = vec![0u32; num_classes];
    let mut prob_sums = vec![0.0f64; num_classes];
    for mi in order {
        let mask = &masks.masks[mi];
        counts.iter_mut().for_each(|c| *c = 0);
        prob_sums.iter_mut().for_each(|p| *p = 0.0);
        for (px, &on) in mask.bits.iter().enumerate() {
            if !on {
                continue;
            }
            let lbl = refined.data[px];
            if lbl == IGNORE {
                continue;
            }
            counts[lbl as usize] += 1;
            let p = teacher_probs.pixel(px);
            for c in 0..num_classes {
                prob_sums[c] += p[c];
            }
        }
        let max_count = match counts.iter().max() {
            Some(&m) if m > 0 => m,
            _ => continue, // only IGNORE pixels inside
        };
        let mut winner: Option<usize> = None;
        for c in 0..num_classes {
            if counts[c] != max_count {
                continue;
            }
            winner = Some(match winner {
                None => c,
                Some(w) if prob_sums[c] > prob_sums[w] => c,
                Some(w) => w,
            });
        }
        let winner = winner.expect("max_count > 0 implies a winner") as u8;
        for (px, &on) in mask.bits.iter().enumerate() {
            if on && refined.data[px] != IGNORE {
                refined.data[px] = winner;
            }
        }
    }
    Ok(refined)
}

/// Per-image outcome of a dataset refinement pass.
#[derive(Debug, Clone)]
pub struct RefineSummary {
    pub stem: String,
    pub changed_pixels: Option<usize>,
    pub error: Option<String>,
}

/// Refine every teacher label PNG under `dataset_dir/teacher_labels/` using
/// the FMSK caches in `cache_dir`, writing refined PNGs to `output_dir`.
/// Missing caches are recorded per image and processing continues. Votes use
/// the hard teacher labels; ties fall to the smaller class index (no
/// probability maps exist on disk).
pub fn refine_dataset(
    dataset_dir: &Path,
    cache_dir: &Path,
    output_dir: &Path,
    num_classes: u8,
) -> Result<Vec<RefineSummary>, RefineError> {
    let teacher_dir = dataset_dir.join("teacher_labels");
    if !teacher_dir.is_dir() {
        return Err(RefineError::MissingDir(teacher_dir.display().to_string()));
    }
    std::fs::create_dir_all(output_dir)?;

    let mut stems: Vec<String> = std::fs::read_dir(&teacher_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "png") {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    stems.sort();

    let mut summaries = Vec::with_capacity(stems.len());
    for stem in stems {
        let result = refine_one(&teacher_dir, cache_dir, output_dir, &stem, num_classes);
        summaries.push(match result {
            Ok(changed) => RefineSummary {
                stem,
                changed_pixels: Some(changed),
                error: None,
            },
            Err(e) => RefineSummary {
                stem,
                changed_pixels: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(summaries)
}

fn refine_one(
    teacher_dir: &Path,
    cache_dir: &Path,
    output_dir: &Path,
    stem: &str,
    num_classes: u8,
) -> Result<usize, RefineError> {
    let labels = LabelMap::load_png(&teacher_dir.join(format!("{stem}.png")), num_classes)?;
    let masks = MaskSet::load(&MaskSet::cache_path(cache_dir, stem))?;
    // ties fall back to the smaller class index under uniform probabilities
    let uniform = ProbMap::new(
        labels.height,
        labels.width,
        num_classes as usize,
        vec![1.0 / num_classes as f64; labels.height * labels.width * num_classes as usize],
    )?;
    let refined = majority_vote_refine(&labels, &uniform, &masks)?;
    let changed = refined
        .data
        .iter()
        .zip(&labels.data)
        .filter(|(a, b)| a != b)
        .count();
    refined.save_png(&output_dir.join(format!("{stem}.png")))?;
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskcache::Mask;

    fn uniform_probs(h: usize, w: usize, c: usize) -> ProbMap {
        ProbMap::new(h, w, c, vec![1.0 / c as f64; h * w * c]).unwrap()
    }

    #[test]
    fn plurality_overwrites_mask() {
        let labels = LabelMap::new(2, 2, 3, vec![0, 0, 1, 2]).unwrap();
        let mask = Mask::from_bits(vec![true; 4]).unwrap();
        let masks = MaskSet::new(2, 2, vec![mask]).unwrap();
        let refined =
            majority_vote_refine(&labels, &uniform_probs(2, 2, 3), &masks).unwrap();
        assert_eq!(refined.data, vec![0; 4]);
    }

    #[test]
    fn tie_breaks_by_probability_mass() {
        let labels = LabelMap::new(1, 4, 2, vec![0, 0, 1, 1]).unwrap();
        // summed probs inside the mask: class0 = 1.8, class1 = 1.9 -> class 1
        let probs = ProbMap::new(
            1,
            4,
            2,
            vec![0.6, 0.4, 0.6, 0.4, 0.3, 0.7, 0.3, 0.7],
        )
        .unwrap();
        let mask = Mask::from_bits(vec![true; 4]).unwrap();
        let masks = MaskSet::new(1, 4, vec![mask]).unwrap();
        let refined = majority_vote_refine(&labels, &probs, &masks).unwrap();
        assert_eq!(refined.data, vec![1; 4]);
    }

    #[test]
    fn tie_breaks_to_smaller_index_on_equal_mass() {
        let labels = LabelMap::new(1, 2, 2, vec![1, 0]).unwrap();
        let mask = Mask::from_bits(vec![true, true]).unwrap();
        let masks = MaskSet::new(1, 2, vec![mask]).unwrap();
        let refined =
            majority_vote_refine(&labels, &uniform_probs(1, 2, 2), &masks).unwrap();
        assert_eq!(refined.data, vec![0, 0]);
    }

    #[test]
    fn ignore_pixels_untouched_and_not_voting() {
        let labels = LabelMap::new(1, 3, 2, vec![IGNORE, 1, 1]).unwrap();
        let mask = Mask::from_bits(vec![true, true, true]).unwrap();
        let masks = MaskSet::new(1, 3, vec![mask]).unwrap();
        let refined =
            majority_vote_refine(&labels, &uniform_probs(1, 3, 2), &masks).unwrap();
        assert_eq!(refined.data, vec![IGNORE, 1, 1]);
    }

    #[test]
    fn all_ignore_mask_is_noop() {
        let labels = LabelMap::new(1, 3, 2, vec![IGNORE, IGNORE, 1]).unwrap();
        let mask = Mask::from_bits(vec![true, true, false]).unwrap();
        let masks = MaskSet::new(1, 3, vec![mask]).unwrap();
        let refined =
            majority_vote_refine(&labels, &uniform_probs(1, 3, 2), &masks).unwrap();
        assert_eq!(refined.data, labels.data);
    }

    #[test]
    fn uncovered_pixels_keep_teacher_label() {
        let labels = LabelMap::new(1, 4, 3, vec![2, 0, 0, 1]).unwrap();
        let mask = Mask::from_bits(vec![false, true, true, false]).unwrap();
        let masks = MaskSet::new(1, 4, vec![mask]).unwrap();
        let refined =
            majority_vote_refine(&labels, &uniform_probs(1, 4, 3), &masks).unwrap();
        assert_eq!(refined.data, vec![2, 0, 0, 1]);
    }

    #[test]
    fn decreasing_area_order_lets_small_masks_win() {
        // large mask covers all four pixels, small mask the last one
        let labels = LabelMap::new(1, 4, 3, vec![0, 0, 0, 1]).unwrap();
        let big = Mask::from_bits(vec![true; 4]).unwrap();
        let small = Mask::from_bits(vec![false, false, false, true]).unwrap();
        let masks = MaskSet::new(1, 4, vec![small.clone(), big.clone()]).unwrap();
        let refined =
            majority_vote_refine(&labels, &uniform_probs(1, 4, 3), &masks).unwrap();
        // big first -> all 0; then small re-votes over {0} -> stays 0
        assert_eq!(refined.data, vec![0, 0, 0, 0]);

        // with the small mask over a pixel the big vote did not flip
        let labels2 = LabelMap::new(1, 4, 3, vec![1, 1, 0, 0]).unwrap();
        let small2 = Mask::from_bits(vec![false, false, true, true]).unwrap();
        let masks2 = MaskSet::new(1, 4, vec![big, small2]).unwrap();
        let refined2 =
            majority_vote_refine(&labels2, &uniform_probs(1, 4, 3), &masks2).unwrap();
        // big: tie 1 vs 0 -> class 0 everywhere; small re-votes {0,0} -> 0
        assert_eq!(refined2.data, vec![0, 0, 0, 0]);
    }

    #[test]
    fn non_overlapping_masks_idempotent() {
        let labels = LabelMap::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let a = Mask::from_bits(vec![true, true, false, false]).unwrap();
        let b = Mask::from_bits(vec![false, false, true, true]).unwrap();
        let masks = MaskSet::new(2, 2, vec![a, b]).unwrap();
        let probs = uniform_probs(2, 2, 3);
        let once = majority_vote_refine(&labels, &probs, &masks).unwrap();
        let twice = majority_vote_refine(&once, &probs, &masks).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let labels = LabelMap::new(2, 2, 2, vec![0; 4]).unwrap();
        let probs = uniform_probs(2, 3, 2);
        let mask = Mask::from_bits(vec![true; 4]).unwrap();
        let masks = MaskSet::new(2, 2, vec![mask]).unwrap();
        assert!(majority_vote_refine(&labels, &probs, &masks).is_err());
    }

    #[test]
    fn refine_dataset_missing_cache_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let teacher = dir.path().join("teacher_labels");
        let cache = dir.path().join("masks");
        let out = dir.path().join("refined_labels");
        std::fs::create_dir_all(&teacher).unwrap();
        std::fs::create_dir_all(&cache).unwrap();

        let labels = LabelMap::new(2, 2, 3, vec![0, 0, 1, 0]).unwrap();
        labels.save_png(&teacher.join("a.png")).unwrap();
        labels.save_png(&teacher.join("b.png")).unwrap();
        let mask = Mask::from_bits(vec![true; 4]).unwrap();
        MaskSet::new(2, 2, vec![mask])
            .unwrap()
            .save(&MaskSet::cache_path(&cache, "a"))
            .unwrap();

        let summaries = refine_dataset(dir.path(), &cache, &out, 3).unwrap();
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].changed_pixels, Some(1));
        assert!(summaries[1].error.is_some());
        let refined = LabelMap::load_png(&out.join("a.png"), 3).unwrap();
        assert_eq!(refined.data, vec![0; 4]);
    }

    #[test]
    fn empty_maskset_passthrough() {
        let labels = LabelMap::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let masks = MaskSet::new(2, 2, vec![]).unwrap();
        let refined =
            majority_vote_refine(&labels, &uniform_probs(2, 2, 3), &masks).unwrap();
        assert_eq!(refined, labels);
    }
}
