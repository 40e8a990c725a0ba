//! Volumes, binary masks, brain masking and intensity normalization.
//!
//! Volumes are stored as `(H, W, S)` arrays: rows, columns, then the axial
//! slice index. All annotation and inference work slice-by-slice along the
//! last axis.

use std::collections::VecDeque;

use ndarray::{Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D scalar image with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    data: Array3<f32>,
    spacing: [f64; 3],
}

impl Volume {
    pub fn new(id: impl Into<String>, data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let id = id.into();
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing components must be positive, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite intensity".into()));
        }
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "empty extent in shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { id, data, spacing })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// `(H, W, S)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn num_slices(&self) -> usize {
        self.data.dim().2
    }

    pub fn slice(&self, s: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(2), s)
    }

    /// Returns a copy with `f` applied voxel-wise. The result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Volume::new(self.id.clone(), self.data.mapv(f), self.spacing)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

/// Binary 3D mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    data: Array3<u8>,
}

impl Mask3D {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn ones(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::ones(shape),
        }
    }

    /// Wraps `data`, rejecting values other than 0 and 1.
    pub fn from_array(data: Array3<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidVolume("mask values must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    /// Any nonzero value becomes 1.
    pub fn from_nonzero(data: ArrayView3<'_, u8>) -> Self {
        Self {
            data: data.mapv(|v| u8::from(v != 0)),
        }
    }

    pub fn from_threshold(values: ArrayView3<'_, f32>, threshold: f32) -> Self {
        Self {
            data: values.mapv(|v| u8::from(v >= threshold)),
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, u8> {
        self.data.view()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn slice(&self, s: usize) -> ArrayView2<'_, u8> {
        self.data.index_axis(Axis(2), s)
    }

    pub fn set_slice(&mut self, s: usize, slice: ArrayView2<'_, u8>) -> Result<()> {
        let mut target = self.data.index_axis_mut(Axis(2), s);
        if target.dim() != slice.dim() {
            return Err(Error::ShapeMismatch {
                expected: target.shape().to_vec(),
                actual: slice.shape().to_vec(),
            });
        }
        Zip::from(&mut target)
            .and(&slice)
            .for_each(|t, &v| *t = u8::from(v != 0));
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn get(&self, idx: (usize, usize, usize)) -> bool {
        self.data[idx] != 0
    }

    pub fn set(&mut self, idx: (usize, usize, usize), value: bool) {
        self.data[idx] = u8::from(value);
    }

    /// Voxel-wise OR with `other`.
    pub fn union(&self, other: &Mask3D) -> Result<Mask3D> {
        self.check_shape(other)?;
        let mut out = self.data.clone();
        Zip::from(&mut out)
            .and(&other.data)
            .for_each(|a, &b| *a |= b);
        Ok(Mask3D { data: out })
    }

    /// Voxels set here and not in `other`.
    pub fn difference(&self, other: &Mask3D) -> Result<Mask3D> {
        self.check_shape(other)?;
        let mut out = self.data.clone();
        Zip::from(&mut out)
            .and(&other.data)
            .for_each(|a, &b| *a &= 1 - b);
        Ok(Mask3D { data: out })
    }

    pub fn is_subset_of(&self, other: &Mask3D) -> bool {
        self.data.dim() == other.data.dim()
            && Zip::from(&self.data)
                .and(&other.data)
                .all(|&a, &b| a <= b)
    }

    fn check_shape(&self, other: &Mask3D) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.data.shape().to_vec(),
                actual: other.data.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Half-open axis-aligned rectangle on a slice: rows `[r0, r1)`, cols `[c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl Rect {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn full(shape: (usize, usize)) -> Self {
        Self::new(0, 0, shape.0, shape.1)
    }

    pub fn height(&self) -> usize {
        self.r1.saturating_sub(self.r0)
    }

    pub fn width(&self) -> usize {
        self.c1.saturating_sub(self.c0)
    }

    pub fn is_empty(&self) -> bool {
        self.height() == 0 || self.width() == 0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r1 && c >= self.c0 && c < self.c1
    }
}

/// Tight bounding box of the nonzero pixels of `slice`, `None` when empty.
pub fn bounding_box(slice: ArrayView2<'_, u8>) -> Option<Rect> {
    let mut bbox: Option<Rect> = None;
    for ((r, c), &v) in slice.indexed_iter() {
        if v == 0 {
            continue;
        }
        bbox = Some(match bbox {
            None => Rect::new(r, c, r + 1, c + 1),
            Some(b) => Rect::new(b.r0.min(r), b.c0.min(c), b.r1.max(r + 1), b.c1.max(c + 1)),
        });
    }
    bbox
}

/// Brain mask for volumes without an external skull-stripping step.
///
/// Keeps voxels that are positive and at or above the `threshold_quantile`
/// intensity quantile, then retains the largest 6-connected component.
pub fn compute_brain_mask(v: &Volume, threshold_quantile: f64) -> Result<Mask3D> {
    if !(threshold_quantile > 0.0 && threshold_quantile < 1.0) {
        return Err(Error::InvalidVolume(format!(
            "threshold quantile must lie in (0, 1), got {threshold_quantile}"
        )));
    }
    let mut sorted: Vec<f32> = v.data().iter().copied().collect();
    sorted.sort_by(f32::total_cmp);
    let idx = ((sorted.len() - 1) as f64 * threshold_quantile).floor() as usize;
    let threshold = sorted[idx];

    let candidate = v.data().mapv(|x| x >= threshold && x > 0.0);
    let component = largest_component(&candidate);
    if component.is_empty() {
        return Err(Error::EmptyBrainMask);
    }
    Ok(component)
}

/// Largest 6-connected component of `fg`; ties go to the component found
/// first in row-major scan order.
pub fn largest_component(fg: &Array3<bool>) -> Mask3D {
    let (h, w, s) = fg.dim();
    let mut labels = Array3::<u32>::zeros((h, w, s));
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for (idx, &on) in fg.indexed_iter() {
        if !on || labels[idx] != 0 {
            continue;
        }
        next += 1;
        labels[idx] = next;
        queue.push_back(idx);
        let mut size = 0usize;
        while let Some((r, c, z)) = queue.pop_front() {
            size += 1;
            for n in neighbors6((r, c, z), (h, w, s)) {
                if fg[n] && labels[n] == 0 {
                    labels[n] = next;
                    queue.push_back(n);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let keep = best.0;
    Mask3D {
        data: labels.mapv(|l| u8::from(keep != 0 && l == keep)),
    }
}

pub(crate) fn neighbors6(
    (r, c, z): (usize, usize, usize),
    (h, w, s): (usize, usize, usize),
) -> impl Iterator<Item = (usize, usize, usize)> {
    let mut out = [(0, 0, 0); 6];
    let mut n = 0;
    if r > 0 {
        out[n] = (r - 1, c, z);
        n += 1;
    }
    if r + 1 < h {
        out[n] = (r + 1, c, z);
        n += 1;
    }
    if c > 0 {
        out[n] = (r, c - 1, z);
        n += 1;
    }
    if c + 1 < w {
        out[n] = (r, c + 1, z);
        n += 1;
    }
    if z > 0 {
        out[n] = (r, c, z - 1);
        n += 1;
    }
    if z + 1 < s {
        out[n] = (r, c, z + 1);
        n += 1;
    }
    out.into_iter().take(n)
}

/// Dataset-wide intensity statistics used to standardize network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, x: f32) -> f32 {
        ((x as f64 - self.mean) / self.std) as f32
    }

    pub fn normalize(&self, v: &Volume) -> Result<Volume> {
        v.map(|x| self.apply(x))
    }
}

/// Mean and population standard deviation over the masked voxels of all
/// training volumes. Unmasked volumes contribute every voxel.
pub fn normalize_dataset(volumes: &[(&Volume, Option<&Mask3D>)]) -> Result<NormStats> {
    if volumes.is_empty() {
        return Err(Error::InvalidVolume("no training volumes".into()));
    }
    let mut n = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (vol, mask) in volumes {
        if let Some(m) = mask {
            if m.shape() != vol.shape() {
                return Err(Error::ShapeMismatch {
                    expected: vol.data().shape().to_vec(),
                    actual: m.data().shape().to_vec(),
                });
            }
        }
        let mut push = |x: f32| {
            n += 1;
            let x = x as f64;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        };
        match mask {
            Some(m) => Zip::from(vol.data())
                .and(m.data())
                .for_each(|&x, &k| {
                    if k != 0 {
                        push(x)
                    }
                }),
            None => vol.data().iter().for_each(|&x| push(x)),
        }
    }
    if n == 0 {
        return Err(Error::InvalidVolume("brain masks select no voxels".into()));
    }
    let std = (m2 / n as f64).sqrt();
    if !(std > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(NormStats { mean, std })
}
