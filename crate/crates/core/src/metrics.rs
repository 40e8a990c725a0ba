//! Segmentation, classification and agreement metrics.
//!
//! Surface distances use boundary voxels (mask voxels with at least one
//! background 6-neighbour, the volume border counting as background) and are
//! reported in voxel units unless a spacing is supplied.

use ndarray::{Array3, ArrayView, ArrayView3, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dice similarity coefficient `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dsc<D: Dimension>(a: ArrayView<'_, u8, D>, b: ArrayView<'_, u8, D>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let (x, y) = (x != 0, y != 0);
        na += x as u64;
        nb += y as u64;
        inter += (x && y) as u64;
    });
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistanceReport {
    pub hd: f64,
    pub hd95: f64,
    pub mean_sd: f64,
    /// Distances from each boundary voxel of A to B's boundary, then B to A.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directed: Option<(Vec<f64>, Vec<f64>)>,
}

/// Boundary voxels of `m`.
pub fn boundary(m: ArrayView3<'_, u8>) -> Array3<bool> {
    let (h, w, s) = m.dim();
    Array3::from_shape_fn((h, w, s), |(r, c, z)| {
        if m[(r, c, z)] == 0 {
            return false;
        }
        r == 0
            || c == 0
            || z == 0
            || r + 1 == h
            || c + 1 == w
            || z + 1 == s
            || m[(r - 1, c, z)] == 0
            || m[(r + 1, c, z)] == 0
            || m[(r, c - 1, z)] == 0
            || m[(r, c + 1, z)] == 0
            || m[(r, c, z - 1)] == 0
            || m[(r, c, z + 1)] == 0
    })
}

/// Exact squared Euclidean distance transform to the nearest `true` voxel,
/// separable lower-envelope algorithm (Felzenszwalb & Huttenlocher) applied
/// axis by axis with per-axis spacing.
pub fn squared_edt(features: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let dims = d.dim();
    let shape = [dims.0, dims.1, dims.2];
    for axis in 0..3 {
        let n = shape[axis];
        let step = spacing[axis];
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; n];
        for mut lane in d.lanes_mut(ndarray::Axis(axis)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            lower_envelope(&buf, step, &mut out);
            for (v, o) in lane.iter_mut().zip(&out) {
                *v = *o;
            }
        }
    }
    d
}

/// 1D pass: `out[q] = min_p (f[p] + (step·(q−p))²)`.
fn lower_envelope(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let pos = |i: usize| i as f64 * step;
    // parabola vertices and the boundaries between their regions
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    z.push(f64::INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                        / (2.0 * (pos(q) - pos(p)));
                    if s <= z[v.len() - 1] {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    *z.last_mut().unwrap() = s;
                    z.push(f64::INFINITY);
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while z[k + 1] < x {
            k += 1;
        }
        let p = v[k];
        let dx = x - pos(p);
        *o = f[p] + dx * dx;
    }
}

/// Linear-interpolation percentile of an unsorted sample, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// HD, 95HD and mean surface distance between the boundaries of two masks.
///
/// Directed distances from both sides are pooled before taking the maximum,
/// the 95th percentile and the mean, so the report is symmetric in `a`, `b`.
pub fn surface_distances(
    a: ArrayView3<'_, u8>,
    b: ArrayView3<'_, u8>,
    spacing: Option<[f64; 3]>,
    keep_directed: bool,
) -> Result<SurfaceDistanceReport> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    if a.iter().all(|&v| v == 0) || b.iter().all(|&v| v == 0) {
        return Err(Error::UndefinedSurfaceDistance("empty mask"));
    }
    let spacing = spacing.unwrap_or([1.0; 3]);
    let ba = boundary(a);
    let bb = boundary(b);
    let da = squared_edt(&ba, spacing);
    let db = squared_edt(&bb, spacing);
    let directed = |from: &Array3<bool>, to_dist: &Array3<f64>| -> Vec<f64> {
        Zip::from(from)
            .and(to_dist)
            .fold(Vec::new(), |mut acc, &f, &d| {
                if f {
                    acc.push(d.sqrt());
                }
                acc
            })
    };
    let ab = directed(&ba, &db);
    let ba_d = directed(&bb, &da);
    let pooled: Vec<f64> = ab.iter().chain(&ba_d).copied().collect();
    let hd = pooled.iter().copied().fold(0.0, f64::max);
    let hd95 = percentile(&pooled, 95.0);
    let mean_sd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok(SurfaceDistanceReport {
        hd,
        hd95,
        mean_sd,
        directed: keep_directed.then_some((ab, ba_d)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

/// Precision, recall and F-score with the vessel patch as positive class.
pub fn classification_metrics(pred: &[bool], truth: &[bool]) -> Result<ClassificationReport> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut undefined = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            undefined = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined = true;
        0.0
    };
    Ok(ClassificationReport {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    /// Chance agreement was 1 (both raters constant and identical).
    pub degenerate: bool,
}

/// Cohen's kappa between two raters over the given categories.
pub fn cohens_kappa<T: PartialEq>(a: &[T], b: &[T], categories: &[T]) -> Result<Kappa> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let index = |x: &T| {
        categories
            .iter()
            .position(|c| c == x)
            .ok_or_else(|| Error::Schema("rating outside the category set".into()))
    };
    let k = categories.len();
    let mut table = vec![vec![0usize; k]; k];
    for (x, y) in a.iter().zip(b) {
        table[index(x)?][index(y)?] += 1;
    }
    let n = a.len() as f64;
    let p_o = (0..k).map(|i| table[i][i]).sum::<usize>() as f64 / n;
    let p_e: f64 = (0..k)
        .map(|i| {
            let row: usize = table[i].iter().sum();
            let col: usize = table.iter().map(|r| r[i]).sum();
            row as f64 / n * (col as f64 / n)
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(Kappa {
            kappa: 1.0,
            degenerate: true,
        });
    }
    Ok(Kappa {
        kappa: (p_o - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}

/// Mean and sample standard deviation, for `mean ± std` reporting.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    fn single(shape: (usize, usize, usize), at: (usize, usize, usize)) -> Array3<u8> {
        let mut m = Array3::zeros(shape);
        m[at] = 1;
        m
    }

    #[test]
    fn dsc_cases() {
        let a = Array1::from(vec![1u8, 1, 0, 0]);
        let b = Array1::from(vec![0u8, 1, 1, 0]);
        assert_eq!(dsc(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(dsc(a.view(), b.view()).unwrap(), 0.5);
        let c = Array1::from(vec![0u8, 0, 0, 1]);
        assert_eq!(dsc(a.view(), c.view()).unwrap(), 0.0);
        let z = Array1::<u8>::zeros(4);
        assert_eq!(dsc(z.view(), z.view()).unwrap(), 1.0);
        let short = Array1::<u8>::zeros(3);
        assert!(dsc(z.view(), short.view()).is_err());
    }

    #[test]
    fn single_voxels_three_four_five() {
        let a = single((6, 6, 2), (0, 0, 0));
        let b = single((6, 6, 2), (3, 4, 0));
        let r = surface_distances(a.view(), b.view(), None, false).unwrap();
        assert_eq!(r.hd, 5.0);
        assert_eq!(r.hd95, 5.0);
        assert_eq!(r.mean_sd, 5.0);
    }

    #[test]
    fn identical_masks_have_zero_distance() {
        let mut a = Array3::<u8>::zeros((8, 8, 8));
        a.slice_mut(ndarray::s![2..6, 1..5, 3..7]).fill(1);
        let r = surface_distances(a.view(), a.view(), None, false).unwrap();
        assert_eq!((r.hd, r.hd95, r.mean_sd), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_mask_is_undefined() {
        let a = Array3::<u8>::zeros((4, 4, 4));
        let b = single((4, 4, 4), (1, 1, 1));
        assert!(matches!(
            surface_distances(a.view(), b.view(), None, false),
            Err(Error::UndefinedSurfaceDistance(_))
        ));
    }

    #[test]
    fn spacing_scales_distances() {
        let a = single((6, 6, 6), (0, 0, 0));
        let b = single((6, 6, 6), (0, 0, 4));
        let r = surface_distances(a.view(), b.view(), Some([1.0, 1.0, 2.5]), false).unwrap();
        assert!((r.hd - 10.0).abs() < 1e-12);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let a = Array3::<u8>::ones((5, 5, 5));
        let bd = boundary(a.view());
        assert!(!bd[(2, 2, 2)]);
        assert!(bd[(0, 2, 2)]);
        assert_eq!(bd.iter().filter(|&&b| b).count(), 125 - 27);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((percentile(&v, 95.0) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&[2.0], 95.0), 2.0);
    }

    #[test]
    fn classification_cases() {
        let t = [true, true, false, false];
        let r = classification_metrics(&t, &t).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        // TP=3, FP=1, FN=1
        let pred = [true, true, true, true, false, false];
        let truth = [true, true, true, false, true, false];
        let r = classification_metrics(&pred, &truth).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (3, 1, 1));
        assert_eq!((r.precision, r.recall, r.f1), (0.75, 0.75, 0.75));

        let r = classification_metrics(&[false, false], &[true, false]).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.precision, 0.0);
        assert!(r.undefined);

        assert!(classification_metrics(&[true], &[true, false]).is_err());
    }

    #[test]
    fn kappa_cases() {
        let a = [1, 2, 1, 2, 2];
        let k = cohens_kappa(&a, &a, &[1, 2]).unwrap();
        assert_eq!(k.kappa, 1.0);
        assert!(!k.degenerate);

        // p_o = p_e = 0.5
        let x = [0, 0, 1, 1];
        let y = [0, 1, 0, 1];
        assert_eq!(cohens_kappa(&x, &y, &[0, 1]).unwrap().kappa, 0.0);

        let same = [4, 4, 4];
        let k = cohens_kappa(&same, &same, &[4, 5]).unwrap();
        assert!(k.degenerate);
        assert_eq!(k.kappa, 1.0);
    }

    #[test]
    fn kappa_contingency_oracle() {
        let a = [3, 3, 2, 2, 3];
        let b = [3, 2, 2, 3, 3];
        // contingency rows A, cols B over categories (2, 3): [[1, 1], [1, 2]]
        let table = [[1.0, 1.0], [1.0, 2.0]];
        let n = 5.0;
        let p_o = (table[0][0] + table[1][1]) / n;
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let p_e = (rows[0] * cols[0] + rows[1] * cols[1]) / (n * n);
        let expected = (p_o - p_e) / (1.0 - p_e);
        let k = cohens_kappa(&a, &b, &[2, 3]).unwrap();
        assert!((k.kappa - expected).abs() < 1e-12);
        assert!((k.kappa - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
