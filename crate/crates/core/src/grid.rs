//! Deterministic patch grids over axial slices, patch extraction and
//! reassembly of per-patch predictions.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{bounding_box, Mask3D, Rect, Volume};

/// Tiling of one slice into `patch_size × patch_size` windows.
///
/// Offsets advance by `patch_size` along each axis. When the tiled extent on
/// an axis is not a multiple of the patch size, the final window is pulled
/// back so it ends on the extent boundary and overlaps its predecessor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub slice_index: usize,
    pub patch_size: usize,
    pub slice_shape: (usize, usize),
    /// The dilated bounding box the grid tiles.
    pub window: Rect,
    pub row_offsets: Vec<usize>,
    pub col_offsets: Vec<usize>,
}

impl PatchGrid {
    pub fn num_cells(&self) -> usize {
        self.row_offsets.len() * self.col_offsets.len()
    }

    pub fn num_rows(&self) -> usize {
        self.row_offsets.len()
    }

    pub fn num_cols(&self) -> usize {
        self.col_offsets.len()
    }

    /// Top-left corner of `cell`, row-major.
    pub fn offset(&self, cell: usize) -> (usize, usize) {
        let ncols = self.col_offsets.len();
        (self.row_offsets[cell / ncols], self.col_offsets[cell % ncols])
    }

    /// All top-left corners in row-major order.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        self.row_offsets
            .iter()
            .flat_map(|&r| self.col_offsets.iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn cell_rect(&self, cell: usize) -> Rect {
        let (r, c) = self.offset(cell);
        Rect::new(r, c, r + self.patch_size, c + self.patch_size)
    }

    /// Cells whose window contains pixel `(r, c)`.
    pub fn cells_covering(&self, r: usize, c: usize) -> Vec<usize> {
        let p = self.patch_size;
        let ncols = self.col_offsets.len();
        let rows: Vec<usize> = self
            .row_offsets
            .iter()
            .enumerate()
            .filter(|(_, &o)| r >= o && r < o + p)
            .map(|(i, _)| i)
            .collect();
        let cols: Vec<usize> = self
            .col_offsets
            .iter()
            .enumerate()
            .filter(|(_, &o)| c >= o && c < o + p)
            .map(|(j, _)| j)
            .collect();
        rows.iter()
            .flat_map(|&i| cols.iter().map(move |&j| i * ncols + j))
            .collect()
    }

    /// Checks the structural invariants, used when grids come from files.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = make_grid(self.slice_shape, self.window, self.patch_size)?;
        if rebuilt.window != self.window
            || rebuilt.row_offsets != self.row_offsets
            || rebuilt.col_offsets != self.col_offsets
        {
            return Err(Error::InvalidGrid(format!(
                "offsets for slice {} do not follow the tiling rule",
                self.slice_index
            )));
        }
        Ok(())
    }

    pub fn with_slice_index(mut self, s: usize) -> Self {
        self.slice_index = s;
        self
    }
}

/// Grows `[lo, hi)` symmetrically to `target` inside `[0, n)`, shifting the
/// window back inside when one side hits the border.
fn dilate_axis(lo: usize, hi: usize, target: usize, n: usize) -> (usize, usize) {
    let extent = hi - lo;
    if target >= n {
        return (0, n);
    }
    let extra = target.saturating_sub(extent);
    let mut start = lo.saturating_sub(extra / 2);
    if start + target > n {
        start = n - target;
    }
    (start, start + target)
}

fn axis_offsets(lo: usize, extent: usize, p: usize) -> Vec<usize> {
    let count = extent.div_ceil(p);
    let mut offsets: Vec<usize> = (0..count).map(|i| lo + i * p).collect();
    if let Some(last) = offsets.last_mut() {
        *last = lo + extent - p;
    }
    offsets
}

/// Builds the annotation grid for one slice.
///
/// Each axis of `mask_bbox` is dilated symmetrically to the next multiple of
/// `p` (at least `p`). If that does not fit the slice, the axis spans the
/// whole slice and its last tile overlaps the previous one.
pub fn make_grid(slice_shape: (usize, usize), mask_bbox: Rect, p: usize) -> Result<PatchGrid> {
    let (h, w) = slice_shape;
    if p == 0 {
        return Err(Error::InvalidGrid("patch size must be positive".into()));
    }
    if p > h || p > w {
        return Err(Error::InvalidGrid(format!(
            "patch size {p} exceeds slice extent {h}x{w}"
        )));
    }
    if mask_bbox.is_empty() || mask_bbox.r1 > h || mask_bbox.c1 > w {
        return Err(Error::InvalidGrid(format!(
            "bounding box {mask_bbox:?} is empty or outside slice {h}x{w}"
        )));
    }
    let target_rows = mask_bbox.height().div_ceil(p).max(1) * p;
    let target_cols = mask_bbox.width().div_ceil(p).max(1) * p;
    let (r0, r1) = dilate_axis(mask_bbox.r0, mask_bbox.r1, target_rows, h);
    let (c0, c1) = dilate_axis(mask_bbox.c0, mask_bbox.c1, target_cols, w);
    Ok(PatchGrid {
        slice_index: 0,
        patch_size: p,
        slice_shape,
        window: Rect::new(r0, c0, r1, c1),
        row_offsets: axis_offsets(r0, r1 - r0, p),
        col_offsets: axis_offsets(c0, c1 - c0, p),
    })
}

/// One grid per slice whose brain mask is nonempty; empty slices are skipped.
pub fn grids_for_volume(mask: &Mask3D, p: usize) -> Result<Vec<PatchGrid>> {
    let (h, w, s) = mask.shape();
    let mut grids = Vec::new();
    for z in 0..s {
        if let Some(bbox) = bounding_box(mask.slice(z)) {
            grids.push(make_grid((h, w), bbox, p)?.with_slice_index(z));
        }
    }
    Ok(grids)
}

/// Intensity quantile used for the brain masks that place annotation grids.
pub const BRAIN_QUANTILE: f64 = 0.01;

/// Annotation/classification grids for a volume, laid over its brain mask.
pub fn volume_grids(v: &Volume, p: usize) -> Result<Vec<PatchGrid>> {
    let brain = crate::volume::compute_brain_mask(v, BRAIN_QUANTILE)?;
    grids_for_volume(&brain, p)
}

/// Grids tiling every full slice, for volumes without a brain mask.
pub fn full_slice_grids(shape: (usize, usize, usize), p: usize) -> Result<Vec<PatchGrid>> {
    let (h, w, s) = shape;
    (0..s)
        .map(|z| Ok(make_grid((h, w), Rect::full((h, w)), p)?.with_slice_index(z)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub slice_index: usize,
    pub cell_index: usize,
}

/// A copied `p × p` window of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub volume_id: String,
    pub grid_ref: PatchRef,
    pub row: usize,
    pub col: usize,
    pub pixels: Array2<f32>,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }
}

/// Copies the windows of `g` out of slice `g.slice_index` of `v`, in grid order.
pub fn extract_patches(v: &Volume, g: &PatchGrid) -> Result<Vec<Patch>> {
    let (h, w, s) = v.shape();
    if g.slice_shape != (h, w) || g.slice_index >= s {
        return Err(Error::InvalidGrid(format!(
            "grid for slice {} of shape {:?} does not fit volume {:?}",
            g.slice_index,
            g.slice_shape,
            v.shape()
        )));
    }
    let slice = v.slice(g.slice_index);
    Ok(extract_windows(slice, g)
        .into_iter()
        .enumerate()
        .map(|(cell, pixels)| {
            let (row, col) = g.offset(cell);
            Patch {
                volume_id: v.id().to_string(),
                grid_ref: PatchRef {
                    slice_index: g.slice_index,
                    cell_index: cell,
                },
                row,
                col,
                pixels,
            }
        })
        .collect())
}

/// Windows of a 2D array in grid order.
pub fn extract_windows<T: Clone>(slice: ArrayView2<'_, T>, g: &PatchGrid) -> Vec<Array2<T>> {
    let p = g.patch_size;
    g.offsets()
        .into_iter()
        .map(|(r, c)| slice.slice(s![r..r + p, c..c + p]).to_owned())
        .collect()
}

/// Puts per-cell binary masks back on the slice. Pixels covered by two tiles
/// are the OR of both; pixels outside every tile are 0.
pub fn reassemble(masks: &[Array2<u8>], g: &PatchGrid) -> Result<Array2<u8>> {
    let mut out = Array2::<u8>::zeros(g.slice_shape);
    paste(masks, g, &mut out, |dst, src| *dst |= u8::from(src != 0))?;
    Ok(out)
}

/// Reassembles per-cell probability maps, taking the maximum at overlaps so
/// that thresholding the result equals OR-reassembling thresholded tiles.
pub fn reassemble_max(maps: &[Array2<f32>], g: &PatchGrid) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros(g.slice_shape);
    paste(maps, g, &mut out, |dst, src| *dst = dst.max(src))?;
    Ok(out)
}

fn paste<T: Copy>(
    tiles: &[Array2<T>],
    g: &PatchGrid,
    out: &mut Array2<T>,
    combine: impl Fn(&mut T, T),
) -> Result<()> {
    if tiles.len() != g.num_cells() {
        return Err(Error::CellCountMismatch {
            expected: g.num_cells(),
            actual: tiles.len(),
        });
    }
    let p = g.patch_size;
    for (tile, (r, c)) in tiles.iter().zip(g.offsets()) {
        if tile.dim() != (p, p) {
            return Err(Error::ShapeMismatch {
                expected: vec![p, p],
                actual: tile.shape().to_vec(),
            });
        }
        let mut dst = out.slice_mut(s![r..r + p, c..c + p]);
        ndarray::Zip::from(&mut dst)
            .and(tile)
            .for_each(|d, &v| combine(d, v));
    }
    Ok(())
}
