//! Frozen-output tests. Run once with FAMDA_BLESS=1 to (re)write the files
//! under tests/golden/, then without it to hold every future build to the
//! same bytes. Float grids are hashed after quantization (u8 for images,
//! f32 for depth) so the digests only move on real behavior changes.

use std::path::PathBuf;

use famda_core::augment::photometric_jitter;
use famda_core::grid::DepthMap;
use famda_core::maskcache::{Mask, MaskSet};
use famda_core::model::TrainConfig;
use famda_core::selftrain::{train_loop, SourceDataset, TargetDataset};
use famda_core::synthworld::{
    generate_scene, oracle_depth, oracle_masks, OracleSpec, SceneDistribution, ShiftSpec,
    apply_domain_shift,
};
use famda_core::Rng;
use sha2::{Digest, Sha256};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn bless() -> bool {
    std::env::var("FAMDA_BLESS").is_ok_and(|v| v == "1")
}

fn check_bytes(name: &str, actual: &[u8]) {
    let path = golden_dir().join(name);
    if bless() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path)
        .unwrap_or_else(|_| panic!("missing golden {name}; bless with FAMDA_BLESS=1"));
    assert_eq!(actual, &expected[..], "golden {name} drifted");
}

fn sample_mask_set() -> MaskSet {
    let (h, w) = (6usize, 8usize);
    let mut rng = Rng::new(42);
    let mut masks = Vec::new();
    for _ in 0..3 {
        let bits: Vec<bool> = (0..h * w).map(|_| rng.bool(0.4)).collect();
        if bits.iter().any(|&b| b) {
            masks.push(Mask::from_bits(bits).unwrap());
        }
    }
    MaskSet::new(h, w, masks)
        .unwrap()
        .with_metadata(vec![
            ("points-per-side".into(), "32".into()),
            ("pred-iou-thresh".into(), "0.86".into()),
        ])
}

#[test]
fn golden_fmsk_bytes() {
    let set = sample_mask_set();
    let bytes = set.encode().unwrap();
    check_bytes("sample.fmsk", &bytes);
    let back = MaskSet::decode(&bytes).unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
}

#[test]
fn golden_fdpt_bytes() {
    let mut rng = Rng::new(7);
    let data: Vec<f64> = (0..30)
        .map(|i| if i % 7 == 3 { f64::NAN } else { rng.uniform(0.5, 60.0) })
        .collect();
    let valid: Vec<bool> = data.iter().map(|d| !d.is_nan()).collect();
    let map = DepthMap::new(5, 6, data, valid).unwrap();
    check_bytes("sample.fdpt", &map.to_fdpt());
}

fn quantize_u8(data: &[f64]) -> Vec<u8> {
    data.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[test]
fn golden_scene_digest() {
    let dist = SceneDistribution::default();
    let mut rng = Rng::new(3);
    let spec = dist.sample(&mut rng);
    let (img, labels, depth, regions) = generate_scene(&mut rng, &spec).unwrap();
    let shifted = apply_domain_shift(&img, &ShiftSpec::with_strength(0.6), &mut rng);
    let oracle = OracleSpec::default();
    let masks = oracle_masks(&regions, spec.height, spec.width, &oracle, &mut rng).unwrap();
    let pseudo = oracle_depth(&depth, &oracle, &mut rng).unwrap();

    let mut hasher = Sha256::new();
    hasher.update(quantize_u8(&img.data));
    hasher.update(quantize_u8(&shifted.data));
    hasher.update(&labels.data);
    hasher.update(depth.to_fdpt());
    hasher.update(masks.encode().unwrap());
    hasher.update(pseudo.to_fdpt());
    let digest = format!("{:x}", hasher.finalize());
    check_bytes("scene.sha256", digest.as_bytes());
}

#[test]
fn golden_jitter_digest() {
    let dist = SceneDistribution::default();
    let mut rng = Rng::new(5);
    let spec = dist.sample(&mut rng);
    let (img, ..) = generate_scene(&mut rng, &spec).unwrap();
    let jittered = photometric_jitter(&img, &mut Rng::substream(5, 1), 0.5);
    let mut hasher = Sha256::new();
    hasher.update(quantize_u8(&jittered.data));
    let digest = format!("{:x}", hasher.finalize());
    check_bytes("jitter.sha256", digest.as_bytes());
}

#[test]
fn golden_short_run_trace() {
    // a 10-step training trace frozen to 1e-9; catches silent changes to
    // batching, augmentation order, or the loss bookkeeping
    let dist = SceneDistribution {
        height: 24,
        width: 24,
        focal: 24.0,
        horizon_rows: (8, 10),
        ..SceneDistribution::default()
    };
    let oracle = OracleSpec::default();
    let shift = ShiftSpec::with_strength(0.6);
    let mut source = SourceDataset {
        names: vec![],
        images: vec![],
        labels: vec![],
    };
    let mut target = TargetDataset {
        names: vec![],
        images: vec![],
        masks: vec![],
        pseudo_depth: vec![],
        eval_labels: None,
        eval_depth: None,
    };
    for i in 0..4 {
        let mut rng = Rng::substream(77, i);
        let spec = dist.sample(&mut rng);
        let (img, labels, _, _) = generate_scene(&mut rng, &spec).unwrap();
        source.names.push(format!("s{i}"));
        source.images.push(img);
        source.labels.push(labels);

        let mut rng = Rng::substream(78, i);
        let spec = dist.sample(&mut rng);
        let (img, _, depth, regions) = generate_scene(&mut rng, &spec).unwrap();
        let img = apply_domain_shift(&img, &shift, &mut rng);
        target.names.push(format!("t{i}"));
        target
            .masks
            .push(oracle_masks(&regions, spec.height, spec.width, &oracle, &mut rng).unwrap());
        target
            .pseudo_depth
            .push(oracle_depth(&depth, &oracle, &mut rng).unwrap());
        target.images.push(img);
    }
    let cfg = TrainConfig {
        iters: 10,
        warmup: 4,
        batch: 2,
        log_every: 2,
        ..TrainConfig::default()
    };
    let out = train_loop(&source, &target, &cfg).unwrap();
    let flat: Vec<f64> = out
        .trace
        .iter()
        .flat_map(|r| [r.l_ce_s, r.l_ce_t, r.l_rmse_t, r.q_mean])
        .collect();
    let rendered: String = flat
        .iter()
        .map(|v| format!("{v:.9}\n"))
        .collect();
    check_bytes("trace.txt", rendered.as_bytes());
}
