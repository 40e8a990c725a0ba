//! Whole-volume segmentation, classifier tagging, second-opinion filtering
//! and classifier threshold calibration.

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use vcaptcha_core::annotation::{PatchTagSet, SliceTags, TagSource};
use vcaptcha_core::grid::{extract_windows, make_grid, reassemble_max, PatchGrid};
use vcaptcha_core::metrics::dsc;
use vcaptcha_core::{Mask3D, Rect, Volume};
use vcaptcha_nn::{Checkpoint, Tensor};

use crate::dataset::volume_grids;
use crate::{PipelineError, Result};

/// Tiles per forward call.
const CHUNK: usize = 16;

/// Sweep used by [`calibrate_threshold`].
pub fn threshold_grid() -> Vec<f32> {
    (1..=19).map(|k| k as f32 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub threshold: f32,
    /// Pads slices smaller than the network input instead of failing.
    pub pad: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            pad: false,
        }
    }
}

/// One disagreement cell between classifier and segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementCell {
    pub slice: usize,
    pub cell: usize,
    /// Classifier verdict for the cell.
    pub classifier_vessel: bool,
    /// Segmented pixels inside the cell before filtering.
    pub segmented_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub volume_id: String,
    pub mask: Mask3D,
    /// Pre-threshold probabilities (maximum over overlapping tiles).
    pub probability: Array3<f32>,
    pub disagreement: Option<Mask3D>,
    pub disagreement_cells: Vec<DisagreementCell>,
    pub threshold: f32,
    pub filtered: bool,
}

fn predict_tiles(ckpt: &Checkpoint, tiles: &[Array2<f32>]) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(tiles.len());
    for part in tiles.chunks(CHUNK) {
        let (h, w) = part[0].dim();
        let data: Vec<f32> = part.iter().flat_map(|t| t.iter().copied()).collect();
        let x = Tensor::new(vec![part.len(), 1, h, w], data)?;
        let p = ckpt.model.predict(&x, part.len())?;
        let per = p.numel() / part.len();
        for i in 0..part.len() {
            let slice = &p.data()[i * per..(i + 1) * per];
            if per == 1 {
                out.push(Array2::from_elem((1, 1), slice[0]));
            } else {
                out.push(Array2::from_shape_vec((h, w), slice.to_vec()).map_err(|e| PipelineError::InvalidInput(e.to_string()))?);
            }
        }
    }
    Ok(out)
}

/// Predicts every full-frame tile of every slice and thresholds the
/// reassembled map. Overlaps keep the larger probability, so the mask is the
/// OR of the per-tile thresholded masks.
pub fn segment_volume(seg: &Checkpoint, v: &Volume, opts: &SegmentOptions) -> Result<SegmentationResult> {
    let arch = seg.model.arch();
    if arch.is_classifier() {
        return Err(PipelineError::InvalidInput(format!("{} is not a segmenter", arch.name())));
    }
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(PipelineError::InvalidInput(format!(
            "segmentation threshold {} outside (0, 1)",
            opts.threshold
        )));
    }
    let p = arch.input_size();
    let (h, w, depth) = v.shape();
    if (h < p || w < p) && !opts.pad {
        return Err(PipelineError::InvalidInput(format!(
            "slice {h}×{w} is smaller than the {p}×{p} network input (use padding)"
        )));
    }
    let nv = seg.norm.normalize(v)?;
    let (ph, pw) = (h.max(p), w.max(p));
    let grid = make_grid((ph, pw), Rect::full((ph, pw)), p)?;
    let mut prob = Array3::<f32>::zeros((h, w, depth));
    for z in 0..depth {
        // padding is zero in normalized units, i.e. the training mean
        let mut frame = Array2::<f32>::zeros((ph, pw));
        frame.slice_mut(s![..h, ..w]).assign(&nv.slice(z));
        let tiles = extract_windows(frame.view(), &grid);
        let maps = predict_tiles(seg, &tiles)?;
        let full = reassemble_max(&maps, &grid)?;
        prob.index_axis_mut(Axis(2), z).assign(&full.slice(s![..h, ..w]));
    }
    let mask = Mask3D::from_threshold(prob.view(), opts.threshold);
    Ok(SegmentationResult {
        volume_id: v.id().to_string(),
        mask,
        probability: prob,
        disagreement: None,
        disagreement_cells: Vec::new(),
        threshold: opts.threshold,
        filtered: false,
    })
}

/// Classifier probabilities for every cell of `grids`, one vector per grid.
pub fn cell_probabilities(clf: &Checkpoint, v: &Volume, grids: &[PatchGrid]) -> Result<Vec<Vec<f32>>> {
    let arch = clf.model.arch();
    if !arch.is_classifier() {
        return Err(PipelineError::InvalidInput(format!("{} is not a classifier", arch.name())));
    }
    let nv = clf.norm.normalize(v)?;
    let mut out = Vec::with_capacity(grids.len());
    for g in grids {
        if g.patch_size != arch.input_size() {
            return Err(PipelineError::InvalidInput(format!(
                "grid patch size {} differs from classifier input {}",
                g.patch_size,
                arch.input_size()
            )));
        }
        let tiles = extract_windows(nv.slice(g.slice_index), g);
        out.push(predict_tiles(clf, &tiles)?.into_iter().map(|a| a[(0, 0)]).collect());
    }
    Ok(out)
}

/// Tags every brain-mask grid cell of `v` with the classifier; a cell is a
/// vessel cell iff its probability is at least `threshold`.
pub fn classify_volume(clf: &Checkpoint, v: &Volume, threshold: f32) -> Result<PatchTagSet> {
    if clf.training.is_none() {
        return Err(PipelineError::InvalidInput("classifier checkpoint is untrained".into()));
    }
    let p = clf.model.arch().input_size();
    let grids = volume_grids(v, p)?;
    let probs = cell_probabilities(clf, v, &grids)?;
    let mut set = PatchTagSet::new(v.id(), p).with_source(TagSource::Classifier);
    for (g, pr) in grids.into_iter().zip(probs) {
        set.insert_slice(SliceTags {
            grid: g,
            tags: pr.iter().map(|&x| x >= threshold).collect(),
        })?;
    }
    Ok(set)
}

/// Classifier grids with their cell probabilities, reusable across
/// thresholds.
#[derive(Debug, Clone)]
pub struct CellScores {
    pub grids: Vec<PatchGrid>,
    pub probs: Vec<Vec<f32>>,
}

impl CellScores {
    pub fn compute(clf: &Checkpoint, v: &Volume) -> Result<Self> {
        let grids = volume_grids(v, clf.model.arch().input_size())?;
        let probs = cell_probabilities(clf, v, &grids)?;
        Ok(Self { grids, probs })
    }
}

/// Zeroes segmented pixels that lie only in cells the classifier calls
/// non-vessel, and marks cells where the two networks disagree.
///
/// A pixel survives if any cell covering it is a vessel cell; pixels outside
/// every classifier cell are left alone.
pub fn second_opinion_filter(res: &SegmentationResult, scores: &CellScores, threshold: f32) -> Result<SegmentationResult> {
    let (h, w, depth) = res.mask.shape();
    let mut mask = res.mask.data().clone();
    let mut prob = res.probability.clone();
    let mut dis = Array3::<u8>::zeros((h, w, depth));
    let mut cells = Vec::new();
    for (g, pr) in scores.grids.iter().zip(&scores.probs) {
        if g.slice_shape != (h, w) || g.slice_index >= depth {
            return Err(PipelineError::InvalidInput(format!(
                "classifier grid for slice {} does not fit a {h}×{w}×{depth} result",
                g.slice_index
            )));
        }
        let z = g.slice_index;
        let seg = res.mask.slice(z);
        let mut covered = Array2::<u8>::zeros((h, w));
        let mut keep = Array2::<u8>::zeros((h, w));
        for (cell, &pv) in pr.iter().enumerate() {
            let r = g.cell_rect(cell);
            let vessel = pv >= threshold;
            let win = s![r.r0..r.r1, r.c0..r.c1];
            covered.slice_mut(win).fill(1);
            if vessel {
                keep.slice_mut(win).fill(1);
            }
            let fired = seg.slice(win).iter().filter(|&&x| x != 0).count();
            if vessel == (fired == 0) {
                dis.index_axis_mut(Axis(2), z).slice_mut(win).fill(1);
                cells.push(DisagreementCell {
                    slice: z,
                    cell,
                    classifier_vessel: vessel,
                    segmented_pixels: fired,
                });
            }
        }
        let mut ms = mask.index_axis_mut(Axis(2), z);
        let mut ps = prob.index_axis_mut(Axis(2), z);
        for ((r, c), k) in keep.indexed_iter() {
            if covered[(r, c)] == 1 && *k == 0 {
                ms[(r, c)] = 0;
                ps[(r, c)] = 0.0;
            }
        }
    }
    Ok(SegmentationResult {
        volume_id: res.volume_id.clone(),
        mask: Mask3D::from_array(mask)?,
        probability: prob,
        disagreement: Some(Mask3D::from_array(dis)?),
        disagreement_cells: cells,
        threshold: res.threshold,
        filtered: true,
    })
}

/// Sweep outcome: the chosen threshold and mean DSC at every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f32,
    pub dsc: f64,
    pub sweep: Vec<(f32, f64)>,
}

/// Picks the classifier threshold whose filtered segmentations maximize the
/// mean validation DSC; the lowest threshold wins ties.
pub fn calibrate_threshold(
    clf: &Checkpoint,
    seg: &Checkpoint,
    val: &[(Volume, Mask3D)],
    opts: &SegmentOptions,
) -> Result<Calibration> {
    if val.is_empty() {
        return Err(PipelineError::InvalidInput("calibration needs at least one validation volume".into()));
    }
    let mut prepared = Vec::with_capacity(val.len());
    for (v, truth) in val {
        if truth.shape() != v.shape() {
            return Err(PipelineError::InvalidInput(format!("ground truth shape differs for {}", v.id())));
        }
        prepared.push((segment_volume(seg, v, opts)?, CellScores::compute(clf, v)?, truth));
    }
    let mut sweep = Vec::new();
    let mut best: Option<(f32, f64)> = None;
    for t in threshold_grid() {
        let mut total = 0.0;
        for (res, scores, truth) in &prepared {
            let f = second_opinion_filter(res, scores, t)?;
            total += dsc(f.mask.view(), truth.view())?;
        }
        let mean = total / prepared.len() as f64;
        sweep.push((t, mean));
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((t, mean));
        }
    }
    let (threshold, dsc) = best.expect("threshold grid is non-empty");
    Ok(Calibration { threshold, dsc, sweep })
}
