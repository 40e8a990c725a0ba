//! Pixel-wise pseudo-labels synthesized from patch tags.
//!
//! Untagged patches get an empty mask. Each tagged patch is split into two
//! intensity clusters and the vessel cluster (chosen by modality polarity)
//! becomes the mask, unless it covers more than 30% of the patch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::annotation::{PatchTagSet, TagSource};
use crate::error::{Error, Result};
use crate::grid::{extract_patches, reassemble};
use crate::volume::{Mask3D, Volume};

/// Vessel contrast of a modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Vessels brighter than tissue (TOF, synthetic).
    BrightVessel,
    /// Vessels darker than tissue (SWI).
    DarkVessel,
}

impl std::str::FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bright" | "bright_vessel" => Ok(Polarity::BrightVessel),
            "dark" | "dark_vessel" => Ok(Polarity::DarkVessel),
            other => Err(format!("unknown polarity {other:?}, expected bright or dark")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    #[default]
    Kmeans,
    Gmm,
}

/// Two split costs closer than this fraction of the total sum of squares
/// count as tied; ties go to the lower threshold.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Exact two-cluster split of a 1D sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoMeansSplit {
    /// Largest value of the low cluster; values above it form the high cluster.
    pub threshold: f32,
    pub low_mean: f64,
    pub high_mean: f64,
    pub low_count: usize,
    pub high_count: usize,
    /// Sum of squared deviations from the two cluster means.
    pub cost: f64,
}

/// Globally optimal 2-means partition of `values`, `None` when fewer than two
/// distinct values exist.
///
/// In one dimension optimal clusters are contiguous in sorted order, so the
/// optimum is found by sweeping every split between distinct values with
/// prefix sums. Values are centred first to keep the cost differences exact
/// enough for tie detection.
pub fn two_means_1d(values: &[f32]) -> Option<TwoMeansSplit> {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n < 2 || sorted[0] == sorted[n - 1] {
        return None;
    }
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = sorted.iter().map(|v| v - mean).collect();
    let total: f64 = centred.iter().sum();
    let sst: f64 = centred.iter().map(|v| v * v).sum();
    let tol = TIE_TOLERANCE * sst;

    // (cost, split index, centred left sum)
    let mut best: Option<(f64, usize, f64)> = None;
    let mut left = 0.0;
    for k in 1..n {
        left += centred[k - 1];
        if sorted[k] == sorted[k - 1] {
            continue;
        }
        let right = total - left;
        let cost = sst - (left * left / k as f64 + right * right / (n - k) as f64);
        if best.map_or(true, |(b, _, _)| cost < b - tol) {
            best = Some((cost, k, left));
        }
    }
    let (cost, k, left) = best?;
    Some(TwoMeansSplit {
        threshold: sorted[k - 1] as f32,
        low_mean: mean + left / k as f64,
        high_mean: mean + (total - left) / (n - k) as f64,
        low_count: k,
        high_count: n - k,
        cost: cost.max(0.0),
    })
}

/// A per-patch binary mask plus how it was obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub mask: Array2<u8>,
    /// Constant patch: no intensity evidence, mask left empty.
    pub degenerate: bool,
    /// The requested method failed and the k-means mask was used instead.
    pub fallback: bool,
}

fn vessel_mask(
    patch: ArrayView2<'_, f32>,
    threshold: f32,
    polarity: Polarity,
) -> Array2<u8> {
    match polarity {
        Polarity::BrightVessel => patch.mapv(|v| u8::from(v > threshold)),
        Polarity::DarkVessel => patch.mapv(|v| u8::from(v <= threshold)),
    }
}

/// K-means with K = 2 over the patch intensities.
pub fn kmeans2(patch: ArrayView2<'_, f32>, polarity: Polarity) -> PatchMask {
    let values: Vec<f32> = patch.iter().copied().collect();
    match two_means_1d(&values) {
        None => PatchMask {
            mask: Array2::zeros(patch.dim()),
            degenerate: true,
            fallback: false,
        },
        Some(split) => PatchMask {
            mask: vessel_mask(patch, split.threshold, polarity),
            degenerate: false,
            fallback: false,
        },
    }
}

pub const GMM_MAX_ITERS: usize = 200;
const GMM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1 {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

impl Gaussian1 {
    fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.weight.ln() - 0.5 * (2.0 * std::f64::consts::PI * self.var).ln() - d * d / (2.0 * self.var)
    }
}

/// Fitted two-component mixture; `None` if EM did not converge.
pub fn fit_gmm2(values: &[f64], init: &TwoMeansSplit, threshold: f64) -> Option<[Gaussian1; 2]> {
    let n = values.len() as f64;
    let mean_all = values.iter().sum::<f64>() / n;
    let var_all = values.iter().map(|v| (v - mean_all).powi(2)).sum::<f64>() / n;
    let var_floor = (1e-6 * var_all).max(1e-12);

    let cluster_var = |low: bool, mean: f64, count: usize| {
        let ss: f64 = values
            .iter()
            .filter(|&&v| (v <= threshold) == low)
            .map(|v| (v - mean).powi(2))
            .sum();
        (ss / count as f64).max(var_floor)
    };
    let mut comps = [
        Gaussian1 {
            weight: init.low_count as f64 / n,
            mean: init.low_mean,
            var: cluster_var(true, init.low_mean, init.low_count),
        },
        Gaussian1 {
            weight: init.high_count as f64 / n,
            mean: init.high_mean,
            var: cluster_var(false, init.high_mean, init.high_count),
        },
    ];

    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = vec![0.0f64; values.len()];
    for _ in 0..GMM_MAX_ITERS {
        // E step: responsibility of the high component
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(values) {
            let a = comps[0].log_density(x);
            let b = comps[1].log_density(x);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            ll += lse;
            *r = (b - lse).exp();
        }
        if !ll.is_finite() {
            return None;
        }
        // M step
        let w_high: f64 = resp.iter().sum();
        let w_low = n - w_high;
        if w_high < 1e-9 || w_low < 1e-9 {
            return None;
        }
        let mean_high = resp.iter().zip(values).map(|(r, x)| r * x).sum::<f64>() / w_high;
        let mean_low = resp.iter().zip(values).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / w_low;
        let var_high = resp
            .iter()
            .zip(values)
            .map(|(r, x)| r * (x - mean_high).powi(2))
            .sum::<f64>()
            / w_high;
        let var_low = resp
            .iter()
            .zip(values)
            .map(|(r, x)| (1.0 - r) * (x - mean_low).powi(2))
            .sum::<f64>()
            / w_low;
        comps = [
            Gaussian1 {
                weight: w_low / n,
                mean: mean_low,
                var: var_low.max(var_floor),
            },
            Gaussian1 {
                weight: w_high / n,
                mean: mean_high,
                var: var_high.max(var_floor),
            },
        ];
        if (ll - prev_ll).abs() <= GMM_TOL * ll.abs().max(1.0) {
            return Some(comps);
        }
        prev_ll = ll;
    }
    None
}

/// Two-component Gaussian mixture initialised from the k-means split; pixels
/// go to the component with the larger responsibility.
pub fn gmm2(patch: ArrayView2<'_, f32>, polarity: Polarity) -> PatchMask {
    let values: Vec<f32> = patch.iter().copied().collect();
    let Some(split) = two_means_1d(&values) else {
        return PatchMask {
            mask: Array2::zeros(patch.dim()),
            degenerate: true,
            fallback: false,
        };
    };
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let Some(comps) = fit_gmm2(&xs, &split, split.threshold as f64) else {
        let mut km = kmeans2(patch, polarity);
        km.fallback = true;
        return km;
    };
    let (hi, lo) = if comps[1].mean >= comps[0].mean {
        (comps[1], comps[0])
    } else {
        (comps[0], comps[1])
    };
    let vessel = match polarity {
        Polarity::BrightVessel => (hi, lo),
        Polarity::DarkVessel => (lo, hi),
    };
    PatchMask {
        mask: patch.mapv(|x| {
            let x = x as f64;
            u8::from(vessel.0.log_density(x) > vessel.1.log_density(x))
        }),
        degenerate: false,
        fallback: false,
    }
}

pub const NOISY_PATCH_FRACTION: f64 = 0.30;

/// Masks with more than 30% vessel pixels are treated as noise and cleared.
pub fn noisy_patch_filter(mask: &Array2<u8>) -> Array2<u8> {
    if is_noisy(mask) {
        Array2::zeros(mask.dim())
    } else {
        mask.clone()
    }
}

pub fn is_noisy(mask: &Array2<u8>) -> bool {
    let on = mask.iter().filter(|&&v| v != 0).count();
    on as f64 / mask.len() as f64 > NOISY_PATCH_FRACTION
}

/// What happened to one grid cell during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub cell: usize,
    pub tagged: bool,
    pub source: TagSource,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub noisy: bool,
    #[serde(default)]
    pub fallback: bool,
}

/// Pseudo-label mask for one volume, with per-patch provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub volume_id: String,
    pub mask: Mask3D,
    pub method: ClusterMethod,
    pub polarity: Polarity,
    pub records: BTreeMap<usize, Vec<PatchRecord>>,
}

impl PseudoLabelSet {
    pub fn source(&self) -> Option<TagSource> {
        self.records
            .values()
            .flatten()
            .map(|r| r.source)
            .next()
    }

    pub fn slice_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.keys().copied()
    }
}

/// Builds the pseudo-label volume from patch tags.
pub fn synthesize(
    volume: &Volume,
    tags: &PatchTagSet,
    polarity: Polarity,
    method: ClusterMethod,
) -> Result<PseudoLabelSet> {
    if tags.volume_id != volume.id() {
        return Err(Error::Schema(format!(
            "tags belong to volume {:?}, not {:?}",
            tags.volume_id,
            volume.id()
        )));
    }
    let mut mask = Mask3D::zeros(volume.shape());
    let mut records = BTreeMap::new();
    for st in tags.slices() {
        let patches = extract_patches(volume, &st.grid)?;
        let mut masks = Vec::with_capacity(patches.len());
        let mut recs = Vec::with_capacity(patches.len());
        for (patch, &tagged) in patches.iter().zip(&st.tags) {
            let mut rec = PatchRecord {
                cell: patch.grid_ref.cell_index,
                tagged,
                source: tags.source,
                degenerate: false,
                noisy: false,
                fallback: false,
            };
            if !tagged {
                masks.push(Array2::zeros(patch.pixels.dim()));
            } else {
                let pm = match method {
                    ClusterMethod::Kmeans => kmeans2(patch.pixels.view(), polarity),
                    ClusterMethod::Gmm => gmm2(patch.pixels.view(), polarity),
                };
                rec.degenerate = pm.degenerate;
                rec.fallback = pm.fallback;
                rec.noisy = is_noisy(&pm.mask);
                masks.push(noisy_patch_filter(&pm.mask));
            }
            recs.push(rec);
        }
        let slice_mask = reassemble(&masks, &st.grid)?;
        mask.set_slice(st.grid.slice_index, slice_mask.view())?;
        records.insert(st.grid.slice_index, recs);
    }
    Ok(PseudoLabelSet {
        volume_id: volume.id().to_string(),
        mask,
        method,
        polarity,
        records,
    })
}

// ---------------------------------------------------------------------------
// Provenance sidecar

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    volume_id: String,
    shape: [usize; 3],
    method: ClusterMethod,
    polarity: Polarity,
    slices: Vec<SidecarSlice>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarSlice {
    index: usize,
    cells: Vec<PatchRecord>,
}

impl PseudoLabelSet {
    pub fn sidecar_json(&self) -> Result<String> {
        let (h, w, s) = self.mask.shape();
        let sidecar = Sidecar {
            volume_id: self.volume_id.clone(),
            shape: [h, w, s],
            method: self.method,
            polarity: self.polarity,
            slices: self
                .records
                .iter()
                .map(|(&index, cells)| SidecarSlice {
                    index,
                    cells: cells.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&sidecar)?)
    }

    /// Persists the mask as NIfTI-1 next to a `<stem>.json` provenance file.
    pub fn save(&self, nifti_path: impl AsRef<Path>, spacing: [f64; 3]) -> Result<()> {
        let nifti_path = nifti_path.as_ref();
        crate::io::save_mask(&self.mask, spacing, nifti_path)?;
        let side = crate::io::sidecar_path(nifti_path);
        fs::write(&side, self.sidecar_json()?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(nifti_path: impl AsRef<Path>) -> Result<Self> {
        let nifti_path = nifti_path.as_ref();
        let mask = crate::io::load_mask(nifti_path)?;
        let side = crate::io::sidecar_path(nifti_path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        let (h, w, s) = mask.shape();
        if sidecar.shape != [h, w, s] {
            return Err(Error::Schema(format!(
                "sidecar shape {:?} differs from mask shape {:?}",
                sidecar.shape,
                mask.shape()
            )));
        }
        Ok(Self {
            volume_id: sidecar.volume_id,
            mask,
            method: sidecar.method,
            polarity: sidecar.polarity,
            records: sidecar
                .slices
                .into_iter()
                .map(|s| (s.index, s.cells))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::volume::Rect;
    use ndarray::Array3;

    fn four_bright() -> Array2<f32> {
        let mut p = Array2::from_elem((4, 4), 10.0f32);
        for &(r, c) in &[(0, 1), (1, 2), (2, 2), (3, 3)] {
            p[(r, c)] = 200.0;
        }
        p
    }

    /// Exhaustive oracle: try every split point of the sorted values and
    /// evaluate the within-cluster variance directly.
    fn sweep_oracle(values: &[f32]) -> Option<f32> {
        let mut sorted = values.to_vec();
        sorted.sort_by(f32::total_cmp);
        let all: Vec<f64> = sorted.iter().map(|&v| v as f64).collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let sst: f64 = all.iter().map(|v| (v - m).powi(2)).sum();
        let mut best: Option<(f64, f32)> = None;
        for k in 1..sorted.len() {
            if sorted[k] == sorted[k - 1] {
                continue;
            }
            let sse = |part: &[f32]| {
                let m = part.iter().map(|&v| v as f64).sum::<f64>() / part.len() as f64;
                part.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
            };
            let cost = sse(&sorted[..k]) + sse(&sorted[k..]);
            if best.map_or(true, |(b, _)| cost < b - TIE_TOLERANCE * sst) {
                best = Some((cost, sorted[k - 1]));
            }
        }
        best.map(|(_, t)| t)
    }

    #[test]
    fn bright_cluster_is_the_vessel() {
        let p = four_bright();
        assert_eq!(sweep_oracle(p.as_slice().unwrap()), Some(10.0));
        let m = kmeans2(p.view(), Polarity::BrightVessel);
        assert!(!m.degenerate);
        assert_eq!(m.mask, p.mapv(|v| u8::from(v == 200.0)));
        assert_eq!(m.mask.iter().filter(|&&v| v == 1).count(), 4);
    }

    #[test]
    fn dark_polarity_selects_low_cluster() {
        let p = four_bright();
        let m = kmeans2(p.view(), Polarity::DarkVessel);
        assert_eq!(m.mask.iter().filter(|&&v| v == 1).count(), 12);
        let bright = kmeans2(p.view(), Polarity::BrightVessel);
        assert_eq!(m.mask, bright.mask.mapv(|v| 1 - v));
    }

    #[test]
    fn constant_patch_is_degenerate() {
        let p = Array2::from_elem((8, 8), 3.0f32);
        for pm in [kmeans2(p.view(), Polarity::BrightVessel), gmm2(p.view(), Polarity::BrightVessel)] {
            assert!(pm.degenerate);
            assert!(pm.mask.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn split_cost_matches_direct_evaluation() {
        let values = [1.0f32, 2.0, 2.0, 9.0, 10.0, 12.0];
        let s = two_means_1d(&values).unwrap();
        assert_eq!(s.threshold, 2.0);
        let direct = {
            let lo = [1.0f64, 2.0, 2.0];
            let hi = [9.0f64, 10.0, 12.0];
            let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            let ss = |x: &[f64]| x.iter().map(|v| (v - m(x)).powi(2)).sum::<f64>();
            ss(&lo) + ss(&hi)
        };
        assert!((s.cost - direct).abs() < 1e-9);
    }

    #[test]
    fn tie_goes_to_lower_threshold() {
        // {0 | 1 2} and {0 1 | 2} both cost 0.5
        let s = two_means_1d(&[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.threshold, 0.0);
    }

    #[test]
    fn gmm_matches_kmeans_on_separated_modes() {
        // two narrow modes 20 sigma apart
        let mut p = Array2::<f32>::zeros((16, 16));
        for ((r, c), v) in p.indexed_iter_mut() {
            let jitter = (((r * 16 + c) * 7919) % 11) as f32 / 10.0 - 0.5;
            *v = if (r + c) % 5 == 0 { 100.0 } else { 80.0 } + jitter;
        }
        let km = kmeans2(p.view(), Polarity::BrightVessel);
        let gm = gmm2(p.view(), Polarity::BrightVessel);
        assert!(!gm.fallback);
        assert_eq!(km.mask, gm.mask);
    }

    #[test]
    fn noisy_rule_boundary() {
        let mut m = Array2::<u8>::zeros((32, 32));
        for (i, v) in m.iter_mut().enumerate() {
            if i < 308 {
                *v = 1;
            }
        }
        assert!(noisy_patch_filter(&m).iter().all(|&v| v == 0));
        let mut m307 = m.clone();
        m307[(9, 19)] = 0; // index 307
        assert_eq!(m307.iter().filter(|&&v| v == 1).count(), 307);
        assert_eq!(noisy_patch_filter(&m307), m307);
        let zero = Array2::<u8>::zeros((32, 32));
        assert_eq!(noisy_patch_filter(&zero), zero);
        // idempotent
        assert_eq!(noisy_patch_filter(&noisy_patch_filter(&m)), noisy_patch_filter(&m));
    }

    fn volume_with_patch(p: &Array2<f32>) -> Volume {
        let mut data = Array3::from_elem((32, 32, 1), 10.0f32);
        for ((r, c), &v) in p.indexed_iter() {
            data[(r + 8, c + 8, 0)] = v;
        }
        Volume::new("v", data, [1.0; 3]).unwrap()
    }

    #[test]
    fn synthesize_zero_tags_gives_empty_mask() {
        let v = volume_with_patch(&four_bright());
        let g = make_grid((32, 32), Rect::full((32, 32)), 32).unwrap();
        let tags = PatchTagSet::from_grids("v", 32, [g]).unwrap();
        let pl = synthesize(&v, &tags, Polarity::BrightVessel, ClusterMethod::Kmeans).unwrap();
        assert!(pl.mask.is_empty());
        assert!(!pl.records[&0][0].tagged);
    }

    #[test]
    fn synthesize_single_vessel_patch() {
        let v = volume_with_patch(&four_bright());
        let g = make_grid((32, 32), Rect::full((32, 32)), 32).unwrap();
        let mut tags = PatchTagSet::from_grids("v", 32, [g]).unwrap();
        tags.set(0, 0, true).unwrap();
        let pl = synthesize(&v, &tags, Polarity::BrightVessel, ClusterMethod::Kmeans).unwrap();
        assert_eq!(pl.mask.count(), 4);
        for &(r, c) in &[(0, 1), (1, 2), (2, 2), (3, 3)] {
            assert!(pl.mask.get((r + 8, c + 8, 0)));
        }
    }

    #[test]
    fn polarity_parses() {
        assert_eq!("bright".parse::<Polarity>().unwrap(), Polarity::BrightVessel);
        assert_eq!("dark_vessel".parse::<Polarity>().unwrap(), Polarity::DarkVessel);
        assert!("grey".parse::<Polarity>().is_err());
    }
}
