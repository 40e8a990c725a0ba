//! Random rotations, flips and shears applied identically to an image patch
//! and its mask.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_SHEAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    pub shear: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            angle_deg: 0.0,
            shear: 0.0,
        }
    }

    /// Flips with probability 0.5 each, rotation in ±15°, shear in ±0.1.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.random::<bool>(),
            flip_v: rng.random::<bool>(),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            shear: rng.random_range(-MAX_SHEAR..=MAX_SHEAR),
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.shear == 0.0
    }
}

/// Applies one random transform to both arrays.
pub fn geometric_augment(
    patch: ArrayView2<'_, f32>,
    mask: ArrayView2<'_, u8>,
    rng: &mut impl Rng,
) -> (Array2<f32>, Array2<u8>) {
    apply(&AugmentParams::sample(rng), patch, mask)
}

/// Flips first, then the rotation+shear about the patch centre. The image is
/// resampled bilinearly with edge clamping, the mask by nearest neighbour
/// with zero outside.
pub fn apply(
    params: &AugmentParams,
    patch: ArrayView2<'_, f32>,
    mask: ArrayView2<'_, u8>,
) -> (Array2<f32>, Array2<u8>) {
    assert_eq!(patch.dim(), mask.dim(), "patch and mask must be aligned");
    let mut img = patch.to_owned();
    let mut m = mask.to_owned();
    if params.flip_h {
        img.invert_axis(Axis(1));
        m.invert_axis(Axis(1));
    }
    if params.flip_v {
        img.invert_axis(Axis(0));
        m.invert_axis(Axis(0));
    }
    let img = img.as_standard_layout().into_owned();
    let m = m.as_standard_layout().into_owned();
    if params.is_rigid_identity() {
        return (img, m);
    }

    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let t = params.angle_deg.to_radians();
    let (sin, cos) = t.sin_cos();
    // forward map A = R · S with S = [[1, shear], [0, 1]]; sample through A⁻¹
    let a = [[cos, cos * params.shear - sin], [sin, sin * params.shear + cos]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let mut out_img = Array2::<f32>::zeros((h, w));
    let mut out_mask = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            // (x, y) = (column, row) relative to the centre
            let (x, y) = (c as f64 - cx, r as f64 - cy);
            let sx = inv[0][0] * x + inv[0][1] * y + cx;
            let sy = inv[1][0] * x + inv[1][1] * y + cy;
            out_img[(r, c)] = bilinear(&img, sy, sx);
            let (nr, nc) = (sy.round(), sx.round());
            if nr >= 0.0 && nc >= 0.0 && (nr as usize) < h && (nc as usize) < w {
                out_mask[(r, c)] = m[(nr as usize, nc as usize)];
            }
        }
    }
    (out_img, out_mask)
}

fn bilinear(img: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[(y0, x0)] * (1.0 - fx) + img[(y0, x1)] * fx;
    let bottom = img[(y1, x0)] * (1.0 - fx) + img[(y1, x1)] * fx;
    top * (1.0 - fy) + bottom * fy
}
