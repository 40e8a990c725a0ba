#![allow(dead_code)]

use ndarray::Array3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcaptcha_core::{NormStats, Volume};
use vcaptcha_nn::{Arch, Checkpoint, Model, PnetClConfig, SegNetConfig, Tensor, TrainingInfo};

fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

fn trained(mut c: Checkpoint) -> Checkpoint {
    c.training = Some(TrainingInfo {
        epoch: 1,
        metric: "stub".into(),
        value: 0.0,
        seed: 0,
    });
    c
}

/// Classifier whose output is `p` for every patch.
pub fn constant_classifier(p: f32) -> Checkpoint {
    let arch = Arch::PnetCl(PnetClConfig {
        filters: 2,
        mid_channels: 2,
        hidden: 4,
        ..Default::default()
    });
    let mut m = Model::build(arch, 0).unwrap();
    m.store.zero_all();
    let id = m.store.find("fc2.bias").unwrap();
    m.store.get_mut(id).value = Tensor::full(&[1], logit(p));
    trained(Checkpoint::new(m, NormStats::identity()))
}

/// Randomly initialized small classifier, marked trained.
pub fn random_classifier(seed: u64) -> Checkpoint {
    let arch = Arch::PnetCl(PnetClConfig {
        filters: 4,
        mid_channels: 4,
        hidden: 8,
        ..Default::default()
    });
    trained(Checkpoint::new(Model::build(arch, seed).unwrap(), NormStats::identity()))
}

pub fn small_seg_arch(input: usize) -> Arch {
    Arch::UnetSeg(SegNetConfig {
        input_size: input,
        levels: 2,
        base_channels: 2,
        dropout: 0.0,
    })
}

/// Segmenter whose output probability is `p` everywhere.
pub fn constant_segmenter(input: usize, p: f32) -> Checkpoint {
    let mut m = Model::build(small_seg_arch(input), 0).unwrap();
    m.store.zero_all();
    let id = m.store.find("unet1.head.bias").unwrap();
    m.store.get_mut(id).value = Tensor::full(&[1], logit(p));
    trained(Checkpoint::new(m, NormStats::identity()))
}

pub fn random_segmenter(input: usize, seed: u64) -> Checkpoint {
    trained(Checkpoint::new(
        Model::build(small_seg_arch(input), seed).unwrap(),
        NormStats::identity(),
    ))
}

/// Positive random intensities, so the brain mask covers everything.
pub fn noise_volume(id: &str, shape: (usize, usize, usize), seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_simple_fn(shape, || rng.random_range(10.0f32..20.0));
    Volume::new(id, data, [1.0; 3]).unwrap()
}
