//! Brute-force reference implementations checked against the library on
//! randomized instances: mask majority voting and IoU from confusion counts.

use famda_core::eval::miou;
use famda_core::grid::{LabelMap, ProbMap, IGNORE};
use famda_core::maskcache::{Mask, MaskSet};
use famda_core::refine::majority_vote_refine;
use famda_core::Rng;

/// Straight-line restatement of the refinement rule: masks in decreasing
/// area (stable on ties), plurality over current non-IGNORE labels, ties by
/// summed probability then smaller class index, sequential overwrite.
fn refine_reference(labels: &LabelMap, probs: &ProbMap, masks: &MaskSet) -> Vec<u8> {
    let c = labels.num_classes as usize;
    let mut current = labels.data.clone();
    let mut order: Vec<usize> = (0..masks.masks.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(masks.masks[i].area), i));
    for mi in order {
        let bits = &masks.masks[mi].bits;
        let mut counts = vec![0u32; c];
        let mut psums = vec![0.0f64; c];
        for px in 0..bits.len() {
            if bits[px] && current[px] != IGNORE {
                counts[current[px] as usize] += 1;
                for k in 0..c {
                    psums[k] += probs.pixel(px)[k];
                }
            }
        }
        let best = (0..c)
            .filter(|&k| counts[k] > 0)
            .max_by(|&a, &b| {
                counts[a]
                    .cmp(&counts[b])
                    .then(psums[a].partial_cmp(&psums[b]).unwrap())
                    .then(b.cmp(&a))
            });
        if let Some(winner) = best {
            for px in 0..bits.len() {
                if bits[px] && current[px] != IGNORE {
                    current[px] = winner as u8;
                }
            }
        }
    }
    current
}

#[test]
fn refine_matches_brute_force_on_random_instances() {
    let (h, w, c) = (12usize, 12usize, 4usize);
    for seed in 0..200u64 {
        let mut rng = Rng::new(seed);
        let data: Vec<u8> = (0..h * w)
            .map(|_| {
                if rng.bool(0.08) {
                    IGNORE
                } else {
                    rng.index(c) as u8
                }
            })
            .collect();
        let labels = LabelMap::new(h, w, c as u8, data).unwrap();
        let probs = ProbMap::new(
            h,
            w,
            c,
            (0..h * w * c).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        let n_masks = 1 + rng.index(5);
        let mut masks = Vec::new();
        for _ in 0..n_masks {
            // random rectangles so overlaps are common
            let r0 = rng.index(h);
            let r1 = r0 + rng.index(h - r0) + 1;
            let c0 = rng.index(w);
            let c1 = c0 + rng.index(w - c0) + 1;
            let mut bits = vec![false; h * w];
            for r in r0..r1 {
                for cc in c0..c1 {
                    bits[r * w + cc] = true;
                }
            }
            masks.push(Mask::from_bits(bits).unwrap());
        }
        let set = MaskSet::new(h, w, masks).unwrap();
        let refined = majority_vote_refine(&labels, &probs, &set).unwrap();
        let reference = refine_reference(&labels, &probs, &set);
        assert_eq!(refined.data, reference, "instance seed {seed}");
    }
}

/// IoU per class from direct pixel counting, skipping ground-truth IGNORE.
fn miou_reference(pred: &[u8], gt: &[u8], c: usize) -> (Vec<Option<f64>>, f64) {
    let mut per = Vec::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..c {
        let k = k as u8;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            let in_p = p == k;
            let in_g = g == k;
            if in_p && in_g {
                inter += 1;
            }
            if in_p || in_g {
                union += 1;
            }
        }
        if union == 0 {
            per.push(None);
        } else {
            let iou = inter as f64 / union as f64;
            per.push(Some(iou));
            sum += iou;
            n += 1;
        }
    }
    (per, sum / n as f64)
}

#[test]
fn miou_matches_set_counting_on_random_pairs() {
    let (h, w, c) = (10usize, 10usize, 5usize);
    for seed in 0..100u64 {
        let mut rng = Rng::new(10_000 + seed);
        let draw = |rng: &mut Rng| -> Vec<u8> {
            (0..h * w)
                .map(|_| {
                    if rng.bool(0.05) {
                        IGNORE
                    } else {
                        rng.index(c) as u8
                    }
                })
                .collect()
        };
        let gt_data = draw(&mut rng);
        let pred_data = draw(&mut rng);
        if gt_data.iter().all(|&g| g == IGNORE) {
            continue;
        }
        let gt = LabelMap::new(h, w, c as u8, gt_data.clone()).unwrap();
        let pred = LabelMap::new(h, w, c as u8, pred_data.clone()).unwrap();
        let (per, mean) = miou(&pred, &gt).unwrap();
        let (rper, rmean) = miou_reference(&pred_data, &gt_data, c);
        assert_eq!(per.len(), rper.len());
        for (a, b) in per.iter().zip(&rper) {
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                _ => panic!("presence mismatch, seed {seed}"),
            }
        }
        assert!((mean - rmean).abs() < 1e-12, "seed {seed}");
    }
}
