//! Patch and crop sets fed to the training loops.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use vcaptcha_core::annotation::PatchTagSet;
use vcaptcha_core::grid::{extract_windows, make_grid};
pub use vcaptcha_core::grid::{volume_grids, BRAIN_QUANTILE};
use vcaptcha_core::{Mask3D, NormStats, Rect, Volume};
use vcaptcha_nn::Tensor;

use crate::augment::geometric_augment;
use crate::{PipelineError, Result};

/// One classifier training example (normalized pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct ClsSample {
    pub image: Array2<f32>,
    pub label: bool,
}

/// One segmenter training example (normalized pixels + binary target).
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
}

impl SegSample {
    pub fn has_vessel(&self) -> bool {
        self.mask.iter().any(|&v| v != 0)
    }
}

/// Tagged patches of one volume as classifier samples.
pub fn classifier_samples(v: &Volume, tags: &PatchTagSet, norm: &NormStats) -> Result<Vec<ClsSample>> {
    let nv = norm.normalize(v)?;
    let mut out = Vec::new();
    for st in tags.slices() {
        let windows = extract_windows(nv.slice(st.grid.slice_index), &st.grid);
        out.extend(
            windows
                .into_iter()
                .zip(&st.tags)
                .map(|(image, &label)| ClsSample { image, label }),
        );
    }
    Ok(out)
}

/// Crops of size `crop` tiling every slice of `v` (the full slice frame),
/// paired with the matching window of `mask`.
pub fn segmenter_samples(v: &Volume, mask: &Mask3D, norm: &NormStats, crop: usize) -> Result<Vec<SegSample>> {
    if v.shape() != mask.shape() {
        return Err(PipelineError::InvalidInput(format!(
            "volume {:?} and mask {:?} differ in shape",
            v.shape(),
            mask.shape()
        )));
    }
    let nv = norm.normalize(v)?;
    let (h, w, s) = v.shape();
    let mut out = Vec::new();
    for z in 0..s {
        let g = make_grid((h, w), Rect::full((h, w)), crop)?.with_slice_index(z);
        let img = nv.slice(z);
        let m = mask.slice(z);
        for (r, c) in g.offsets() {
            out.push(SegSample {
                image: img.slice(s![r..r + crop, c..c + crop]).to_owned(),
                mask: m.slice(s![r..r + crop, c..c + crop]).to_owned(),
            });
        }
    }
    Ok(out)
}

/// Indices for one classifier epoch: every sample of the minority class plus
/// an equal-size random draw from the majority class, shuffled.
pub fn balanced_epoch(samples: &[ClsSample], rng: &mut impl Rng) -> Vec<usize> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].label);
    let (minority, majority) = if pos.len() <= neg.len() {
        (&mut pos, &mut neg)
    } else {
        (&mut neg, &mut pos)
    };
    majority.shuffle(rng);
    let mut idx: Vec<usize> = minority.clone();
    idx.extend_from_slice(&majority[..minority.len()]);
    idx.shuffle(rng);
    idx
}

/// Indices for one segmenter epoch: all crops with vessel pixels plus a
/// random `bg_fraction` of the empty ones, shuffled.
pub fn segmenter_epoch(samples: &[SegSample], bg_fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let (fg, mut bg): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].has_vessel());
    bg.shuffle(rng);
    let keep = ((bg.len() as f64) * bg_fraction).ceil() as usize;
    let mut idx = fg;
    idx.extend_from_slice(&bg[..keep.min(bg.len())]);
    idx.shuffle(rng);
    idx
}

/// Stacks images (optionally augmented) into an (N, 1, p, p) batch, with
/// the matching masks as an (N, 1, p, p) float target.
pub fn seg_batch(samples: &[&SegSample], augment: bool, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let p = samples[0].image.nrows();
    let n = samples.len();
    let mut x = Vec::with_capacity(n * p * p);
    let mut y = Vec::with_capacity(n * p * p);
    for s in samples {
        if augment {
            let (img, m) = geometric_augment(s.image.view(), s.mask.view(), rng);
            x.extend(img.iter().copied());
            y.extend(m.iter().map(|&v| f32::from(v != 0)));
        } else {
            x.extend(s.image.iter().copied());
            y.extend(s.mask.iter().map(|&v| f32::from(v != 0)));
        }
    }
    Ok((Tensor::new(vec![n, 1, p, p], x)?, Tensor::new(vec![n, 1, p, p], y)?))
}

/// Classifier batch and label vector.
pub fn cls_batch(samples: &[&ClsSample], augment: bool, rng: &mut impl Rng) -> Result<(Tensor, Vec<f32>)> {
    let p = samples[0].image.nrows();
    let n = samples.len();
    let mut x = Vec::with_capacity(n * p * p);
    let labels = samples.iter().map(|s| f32::from(u8::from(s.label))).collect();
    let blank = Array2::<u8>::zeros((p, p));
    for s in samples {
        if augment {
            let (img, _) = geometric_augment(s.image.view(), blank.view(), rng);
            x.extend(img.iter().copied());
        } else {
            x.extend(s.image.iter().copied());
        }
    }
    Ok((Tensor::new(vec![n, 1, p, p], x)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balancing_takes_all_of_minority() {
        let samples: Vec<ClsSample> = (0..20)
            .map(|i| ClsSample {
                image: Array2::zeros((2, 2)),
                label: i < 4,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = balanced_epoch(&samples, &mut rng);
        assert_eq!(idx.len(), 8);
        assert_eq!(idx.iter().filter(|&&i| samples[i].label).count(), 4);
    }

    #[test]
    fn crops_tile_every_slice() {
        let data = Array3::from_shape_fn((64, 64, 3), |(r, c, z)| (r + c + z) as f32);
        let v = Volume::new("v", data, [1.0; 3]).unwrap();
        let mut m = Mask3D::zeros((64, 64, 3));
        m.set((5, 5, 1), true);
        let crops = segmenter_samples(&v, &m, &NormStats::identity(), 32).unwrap();
        assert_eq!(crops.len(), 12);
        assert_eq!(crops.iter().filter(|c| c.has_vessel()).count(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(segmenter_epoch(&crops, 0.25, &mut rng).len(), 1 + 3);
    }
}
