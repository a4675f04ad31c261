//! Finite-difference checks of the analytic gradients: the full multi-task
//! backward pass and the frozen-statistics SSI gradient.

use famda_core::depthloss::{ssi_normalize, ssi_rmse_grad, ssi_rmse_loss};
use famda_core::grid::{DepthMap, Image, LabelMap};
use famda_core::model::{ce_loss, extract_features, MultiTaskModel};
use famda_core::Rng;

fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
}

/// Total loss CE + beta * SSI as a pure function of the parameter vector.
/// The SSI statistics are frozen at the base point (`frozen`), matching the
/// loss whose gradient the backward pass computes.
fn total_loss(
    params: &[f64],
    num_classes: usize,
    img: &Image,
    labels: &LabelMap,
    frozen: &FrozenSsi,
    beta: f64,
) -> f64 {
    let mut model = MultiTaskModel::zeros(num_classes);
    model.params.copy_from_slice(params);
    let feats = extract_features(img);
    let (probs, depth) = model.forward(&feats);
    let weights = vec![1.0; probs.num_pixels()];
    let (ce, _) = ce_loss(&probs, labels, &weights).unwrap();
    let mut sum = 0.0;
    for (i, &d) in depth.data.iter().enumerate() {
        let pn = (d - frozen.med) / frozen.scale;
        let r = pn - frozen.qn[i];
        sum += r * r;
    }
    ce + beta * (sum / depth.data.len() as f64).sqrt()
}

struct FrozenSsi {
    med: f64,
    scale: f64,
    qn: Vec<f64>,
}

#[test]
fn multitask_backward_matches_finite_differences() {
    let (h, w, c) = (8usize, 8usize, 5usize);
    let beta = 0.1;
    let mut rng = Rng::new(7);
    let img = random_image(h, w, &mut rng);
    let labels = LabelMap::new(
        h,
        w,
        c as u8,
        (0..h * w).map(|_| rng.index(c) as u8).collect(),
    )
    .unwrap();
    let pseudo =
        DepthMap::all_valid(h, w, (0..h * w).map(|_| rng.uniform(1.0, 10.0)).collect()).unwrap();
    let model = MultiTaskModel::init(c, &mut rng);

    let feats = extract_features(&img);
    let (probs, depth) = model.forward(&feats);
    let weights = vec![1.0; probs.num_pixels()];
    let (_, glogits) = ce_loss(&probs, &labels, &weights).unwrap();
    let mut gdepth = ssi_rmse_grad(&depth, &pseudo).unwrap();
    for g in gdepth.iter_mut() {
        *g *= beta;
    }
    let analytic = model.backward(&feats, &glogits, &gdepth).unwrap();

    let (_, stats) = ssi_normalize(&depth).unwrap();
    let (qn, _) = ssi_normalize(&pseudo).unwrap();
    let frozen = FrozenSsi {
        med: stats.med,
        scale: stats.scale,
        qn,
    };

    let step = 1e-6;
    let mut max_rel = 0.0f64;
    for i in 0..model.params.len() {
        let mut plus = model.params.clone();
        plus[i] += step;
        let mut minus = model.params.clone();
        minus[i] -= step;
        let numeric = (total_loss(&plus, c, &img, &labels, &frozen, beta)
            - total_loss(&minus, c, &img, &labels, &frozen, beta))
            / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
}

#[test]
fn ssi_grad_matches_frozen_stat_surrogate() {
    // the documented gradient freezes the normalization statistics; compare
    // against central differences of that exact surrogate
    let mut rng = Rng::new(11);
    let pred =
        DepthMap::all_valid(4, 5, (0..20).map(|_| rng.uniform(0.5, 12.0)).collect()).unwrap();
    let pseudo =
        DepthMap::all_valid(4, 5, (0..20).map(|_| rng.uniform(0.5, 12.0)).collect()).unwrap();
    let analytic = ssi_rmse_grad(&pred, &pseudo).unwrap();

    let (_, stats) = ssi_normalize(&pred).unwrap();
    let (qn, _) = ssi_normalize(&pseudo).unwrap();
    let surrogate = |data: &[f64]| -> f64 {
        let mut sum = 0.0;
        for i in 0..data.len() {
            let pn = (data[i] - stats.med) / stats.scale;
            let d = pn - qn[i];
            sum += d * d;
        }
        (sum / data.len() as f64).sqrt()
    };

    let step = 1e-4;
    for i in 0..pred.data.len() {
        let mut plus = pred.data.clone();
        plus[i] += step;
        let mut minus = pred.data.clone();
        minus[i] -= step;
        let numeric = (surrogate(&plus) - surrogate(&minus)) / (2.0 * step);
        assert!(
            (analytic[i] - numeric).abs() < 1e-5,
            "pixel {i}: {} vs {}",
            analytic[i],
            numeric
        );
    }
}

#[test]
fn ssi_grad_descends_the_true_loss() {
    // a small step along the negative gradient must not increase the loss
    let mut rng = Rng::new(13);
    let pred =
        DepthMap::all_valid(4, 5, (0..20).map(|_| rng.uniform(0.5, 12.0)).collect()).unwrap();
    let pseudo =
        DepthMap::all_valid(4, 5, (0..20).map(|_| rng.uniform(0.5, 12.0)).collect()).unwrap();
    let l0 = ssi_rmse_loss(&pred, &pseudo).unwrap();
    let grad = ssi_rmse_grad(&pred, &pseudo).unwrap();
    let mut stepped = pred.clone();
    for (d, g) in stepped.data.iter_mut().zip(&grad) {
        *d -= 1e-3 * g;
    }
    let l1 = ssi_rmse_loss(&stepped, &pseudo).unwrap();
    assert!(l1 <= l0 + 1e-12, "{l1} > {l0}");
}
