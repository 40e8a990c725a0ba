mod common;

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcaptcha_core::grid::full_slice_grids;
use vcaptcha_core::synthgen::{simulate_tags, synth_case, SynthConfig};
use vcaptcha_core::volume::normalize_dataset;
use vcaptcha_core::{Mask3D, NormStats};
use vcaptcha_nn::optim::SgdConfig;
use vcaptcha_nn::{Arch, PnetClConfig};
use vcaptcha_pipeline::dataset::{classifier_samples, segmenter_samples, ClsSample, SegSample};
use vcaptcha_pipeline::train::*;
use vcaptcha_pipeline::PipelineError;

fn small_pnet() -> Arch {
    Arch::PnetCl(PnetClConfig {
        filters: 8,
        mid_channels: 8,
        hidden: 32,
        ..Default::default()
    })
}

/// Bright square somewhere in the patch vs flat noise.
fn toy_patches(n: usize, seed: u64) -> Vec<ClsSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let mut img = Array2::from_shape_simple_fn((32, 32), || rng.random_range(-0.3f32..0.3));
            if label {
                let (r, c) = (rng.random_range(2..22), rng.random_range(2..22));
                for y in r..r + 8 {
                    for x in c..c + 8 {
                        img[(y, x)] += 2.0;
                    }
                }
            }
            ClsSample { image: img, label }
        })
        .collect()
}

#[test]
fn separable_toy_patches_reach_high_f1() {
    let train = toy_patches(256, 1);
    let val = toy_patches(64, 2);
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 5,
        seed: 3,
        ..Default::default()
    };
    let mut log = Vec::new();
    let out = train_classifier(small_pnet(), &train, &val, NormStats::identity(), &cfg, Some(&mut log)).unwrap();
    let best = out.checkpoint.training.as_ref().unwrap();
    assert!(best.value >= 0.99, "val F1 {}", best.value);
    assert_eq!(best.metric, "f1");

    // the JSON-lines log has one record per epoch and reports the input balance
    let lines: Vec<EpochRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), out.log.len());
    for (a, b) in lines.iter().zip(&out.log) {
        assert_eq!(a.epoch, b.epoch);
        assert!((a.val_metric - b.val_metric).abs() < 1e-12);
    }
    assert!(lines.iter().all(|r| r.positives == 128 && r.negatives == 128));
    assert_eq!(
        Some(out.best_epoch - 1),
        select_best(&lines.iter().map(|r| r.val_metric).collect::<Vec<_>>())
    );
}

#[test]
fn single_class_set_is_rejected() {
    let train: Vec<ClsSample> = toy_patches(20, 4).into_iter().filter(|s| s.label).collect();
    let val = toy_patches(10, 5);
    let err = train_classifier(small_pnet(), &train, &val, NormStats::identity(), &TrainConfig::default(), None).unwrap_err();
    assert!(matches!(err, PipelineError::InvalidInput(_)));
}

#[test]
fn classifier_loss_falls_on_synthetic_patches() {
    let cfg = SynthConfig::default();
    let grids = full_slice_grids((64, 64, 48), 32).unwrap();
    let mut train = Vec::new();
    let mut cases = Vec::new();
    for seed in 0..3 {
        let c = synth_case(format!("v{seed}"), seed, (64, 64, 48), &cfg).unwrap();
        cases.push(c);
    }
    let norm = normalize_dataset(&cases.iter().map(|c| (&c.image, None)).collect::<Vec<_>>()).unwrap();
    for c in &cases[..2] {
        let tags = simulate_tags(c.image.id(), &c.labels, &grids, 0.0, 0).unwrap();
        train.extend(classifier_samples(&c.image, &tags, &norm).unwrap());
    }
    let tags = simulate_tags(cases[2].image.id(), &cases[2].labels, &grids, 0.0, 0).unwrap();
    let val = classifier_samples(&cases[2].image, &tags, &norm).unwrap();
    let tc = TrainConfig {
        batch_size: 32,
        max_epochs: 3,
        sgd: SgdConfig { lr: 0.005, momentum: 0.9 },
        seed: 0,
        ..Default::default()
    };
    let out = train_classifier(small_pnet(), &train, &val, norm, &tc, None).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
    assert!(losses[2] < losses[0], "{losses:?}");
}

fn tube_samples(n: usize, seed: u64) -> Vec<SegSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut mask = Array2::<u8>::zeros((16, 16));
            let r = rng.random_range(2..14);
            for c in 0..16 {
                mask[(r, c)] = 1;
            }
            let image = mask.mapv(|v| f32::from(v) * 2.0 - 0.5 + rng.random_range(-0.2f32..0.2));
            SegSample { image, mask }
        })
        .collect()
}

#[test]
fn segmenter_learns_bright_lines() {
    let arch = Arch::UnetSeg(vcaptcha_nn::SegNetConfig {
        input_size: 16,
        levels: 2,
        base_channels: 8,
        dropout: 0.0,
    });
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 8,
        adam: vcaptcha_nn::optim::AdamConfig { lr: 3e-3, ..Default::default() },
        augment: false,
        seed: 1,
        ..Default::default()
    };
    let out = train_segmenter(arch, &tube_samples(128, 1), &tube_samples(32, 2), NormStats::identity(), &cfg, None).unwrap();
    let info = out.checkpoint.training.unwrap();
    assert_eq!(info.metric, "dsc");
    assert!(info.value > 0.9, "val DSC {}", info.value);
}

#[test]
fn segmenter_rejects_empty_vessel_class() {
    let empty: Vec<SegSample> = tube_samples(4, 3)
        .into_iter()
        .map(|s| SegSample {
            mask: Array2::zeros((16, 16)),
            ..s
        })
        .collect();
    let arch = common::small_seg_arch(16);
    let err = train_segmenter(arch, &empty, &tube_samples(2, 4), NormStats::identity(), &TrainConfig::default(), None).unwrap_err();
    assert!(matches!(err, PipelineError::InvalidInput(_)));
}

#[test]
fn crop_size_must_match_network() {
    let v = common::noise_volume("v", (64, 64, 2), 0);
    let mut m = Mask3D::zeros((64, 64, 2));
    m.set((3, 3, 0), true);
    let crops = segmenter_samples(&v, &m, &NormStats::identity(), 32).unwrap();
    let err = train_segmenter(common::small_seg_arch(16), &crops, &crops, NormStats::identity(), &TrainConfig::default(), None);
    assert!(err.is_err());
}
