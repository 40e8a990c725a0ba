//! Patch-level vessel tags: the only human input to training.
//!
//! A [`PatchTagSet`] stores, per annotated slice, the grid that was shown to
//! the rater and one bit per grid cell (1 = the cell contains vessel).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{extract_windows, PatchGrid};
use crate::volume::{Mask3D, Rect};

/// 1 iff any pixel of the patch was marked.
///
/// Scribbles, strokes, dots and full outlines over the same vessel all give
/// the same tag.
pub fn indicator(pixel_marks: ArrayView2<'_, u8>) -> bool {
    pixel_marks.iter().any(|&v| v != 0)
}

/// Who produced a set of tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TagSource {
    #[default]
    Human,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceTags {
    pub grid: PatchGrid,
    pub tags: Vec<bool>,
}

impl SliceTags {
    pub fn empty(grid: PatchGrid) -> Self {
        let n = grid.num_cells();
        Self {
            grid,
            tags: vec![false; n],
        }
    }

    pub fn vessel_cells(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per-slice grid cell tags for one volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchTagSet {
    pub volume_id: String,
    pub patch_size: usize,
    pub source: TagSource,
    slices: BTreeMap<usize, SliceTags>,
}

impl PatchTagSet {
    pub fn new(volume_id: impl Into<String>, patch_size: usize) -> Self {
        Self {
            volume_id: volume_id.into(),
            patch_size,
            source: TagSource::Human,
            slices: BTreeMap::new(),
        }
    }

    /// All-zero tags over the given grids.
    pub fn from_grids(
        volume_id: impl Into<String>,
        patch_size: usize,
        grids: impl IntoIterator<Item = PatchGrid>,
    ) -> Result<Self> {
        let mut set = Self::new(volume_id, patch_size);
        for g in grids {
            set.insert_slice(SliceTags::empty(g))?;
        }
        Ok(set)
    }

    pub fn with_source(mut self, source: TagSource) -> Self {
        self.source = source;
        self
    }

    pub fn insert_slice(&mut self, slice: SliceTags) -> Result<()> {
        if slice.grid.patch_size != self.patch_size {
            return Err(Error::Schema(format!(
                "slice {} uses patch size {}, tag set uses {}",
                slice.grid.slice_index, slice.grid.patch_size, self.patch_size
            )));
        }
        if slice.tags.len() != slice.grid.num_cells() {
            return Err(Error::Schema(format!(
                "slice {}: {} tags for {} grid cells",
                slice.grid.slice_index,
                slice.tags.len(),
                slice.grid.num_cells()
            )));
        }
        self.slices.insert(slice.grid.slice_index, slice);
        Ok(())
    }

    pub fn slice(&self, s: usize) -> Option<&SliceTags> {
        self.slices.get(&s)
    }

    pub fn slices(&self) -> impl Iterator<Item = &SliceTags> {
        self.slices.values()
    }

    pub fn slice_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.slices.keys().copied()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.slices.values().map(|s| s.tags.len()).sum()
    }

    pub fn num_vessel_cells(&self) -> usize {
        self.slices
            .values()
            .map(|s| s.tags.iter().filter(|&&t| t).count())
            .sum()
    }

    pub fn get(&self, s: usize, cell: usize) -> Result<bool> {
        let st = self.slices.get(&s).ok_or(Error::UnknownSlice(s))?;
        st.tags.get(cell).copied().ok_or(Error::CellOutOfRange {
            cell,
            cells: st.tags.len(),
        })
    }

    /// Sets one cell in place.
    pub fn set(&mut self, s: usize, cell: usize, value: bool) -> Result<()> {
        let st = self.slices.get_mut(&s).ok_or(Error::UnknownSlice(s))?;
        let cells = st.tags.len();
        let bit = st
            .tags
            .get_mut(cell)
            .ok_or(Error::CellOutOfRange { cell, cells })?;
        *bit = value;
        Ok(())
    }

    /// Replaces all tags of slice `s`.
    pub fn set_slice_tags(&mut self, s: usize, tags: Vec<bool>) -> Result<()> {
        let st = self.slices.get_mut(&s).ok_or(Error::UnknownSlice(s))?;
        if tags.len() != st.tags.len() {
            return Err(Error::LengthMismatch(st.tags.len(), tags.len()));
        }
        st.tags = tags;
        Ok(())
    }

    /// Cell-wise OR of two raters' tags over identical grids.
    pub fn merge_or(&self, other: &PatchTagSet) -> Result<PatchTagSet> {
        if self.volume_id != other.volume_id || self.patch_size != other.patch_size {
            return Err(Error::Schema(
                "cannot merge tags of different volumes or patch sizes".into(),
            ));
        }
        let mut out = self.clone();
        for (s, theirs) in &other.slices {
            match out.slices.get_mut(s) {
                Some(ours) => {
                    if ours.grid != theirs.grid {
                        return Err(Error::Schema(format!("grids differ on slice {s}")));
                    }
                    for (a, &b) in ours.tags.iter_mut().zip(&theirs.tags) {
                        *a |= b;
                    }
                }
                None => {
                    out.slices.insert(*s, theirs.clone());
                }
            }
        }
        Ok(out)
    }

    /// Tags derived from pixel-level marks with [`indicator`].
    pub fn from_pixel_marks(
        volume_id: impl Into<String>,
        marks: &Mask3D,
        grids: &[PatchGrid],
    ) -> Result<Self> {
        let p = grids.first().map(|g| g.patch_size).unwrap_or(0);
        let mut set = Self::new(volume_id, p);
        for g in grids {
            let (h, w, s) = marks.shape();
            if g.slice_shape != (h, w) || g.slice_index >= s {
                return Err(Error::InvalidGrid(format!(
                    "grid for slice {} does not fit marks of shape {:?}",
                    g.slice_index,
                    marks.shape()
                )));
            }
            let tags = extract_windows(marks.slice(g.slice_index), g)
                .iter()
                .map(|w| indicator(w.view()))
                .collect();
            set.insert_slice(SliceTags {
                grid: g.clone(),
                tags,
            })?;
        }
        Ok(set)
    }
}

/// Functional single-cell update.
pub fn apply_click(
    tags: &PatchTagSet,
    slice: usize,
    cell_index: usize,
    value: bool,
) -> Result<PatchTagSet> {
    let mut out = tags.clone();
    out.set(slice, cell_index, value)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TagFile {
    volume_id: String,
    patch_size: usize,
    #[serde(default)]
    source: TagSource,
    slices: Vec<SliceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceRecord {
    index: usize,
    grid: GridRecord,
    tags: TagBits,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    pub slice_shape: [usize; 2],
    pub bbox: [usize; 4],
    pub patch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<OffsetRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetRecord {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl GridRecord {
    pub fn from_grid(g: &PatchGrid) -> Self {
        Self {
            slice_shape: [g.slice_shape.0, g.slice_shape.1],
            bbox: [g.window.r0, g.window.c0, g.window.r1, g.window.c1],
            patch_size: g.patch_size,
            offsets: Some(OffsetRecord {
                rows: g.row_offsets.clone(),
                cols: g.col_offsets.clone(),
            }),
        }
    }

    pub fn to_grid(&self, slice_index: usize) -> Result<PatchGrid> {
        let [r0, c0, r1, c1] = self.bbox;
        let grid = crate::grid::make_grid(
            (self.slice_shape[0], self.slice_shape[1]),
            Rect::new(r0, c0, r1, c1),
            self.patch_size,
        )
        .map_err(|e| Error::Schema(format!("slice {slice_index}: {e}")))?
        .with_slice_index(slice_index);
        if let Some(off) = &self.offsets {
            if off.rows != grid.row_offsets || off.cols != grid.col_offsets {
                return Err(Error::Schema(format!(
                    "slice {slice_index}: stored offsets disagree with the grid rule"
                )));
            }
        }
        Ok(grid)
    }
}

/// Either an explicit list of vessel cell indices or a base64 bitset
/// (bit `i` is bit `i % 8` of byte `i / 8`).
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum TagBits {
    Indices(Vec<usize>),
    Bitset(String),
}

impl TagBits {
    fn decode(&self, cells: usize, slice: usize) -> Result<Vec<bool>> {
        match self {
            TagBits::Indices(idx) => {
                let mut tags = vec![false; cells];
                for &i in idx {
                    if i >= cells {
                        return Err(Error::Schema(format!(
                            "slice {slice}: cell index {i} out of range for {cells} cells"
                        )));
                    }
                    tags[i] = true;
                }
                Ok(tags)
            }
            TagBits::Bitset(b64) => {
                let bytes = BASE64
                    .decode(b64)
                    .map_err(|e| Error::Schema(format!("slice {slice}: bad base64: {e}")))?;
                if bytes.len() != cells.div_ceil(8) {
                    return Err(Error::Schema(format!(
                        "slice {slice}: bitset length {} bytes does not match {cells} cells",
                        bytes.len()
                    )));
                }
                let tags: Vec<bool> = (0..cells)
                    .map(|i| bytes[i / 8] >> (i % 8) & 1 == 1)
                    .collect();
                let trailing = (cells..bytes.len() * 8).any(|i| bytes[i / 8] >> (i % 8) & 1 == 1);
                if trailing {
                    return Err(Error::Schema(format!(
                        "slice {slice}: bitset has bits beyond {cells} cells"
                    )));
                }
                Ok(tags)
            }
        }
    }
}

pub fn encode_bitset(tags: &[bool]) -> String {
    let mut bytes = vec![0u8; tags.len().div_ceil(8)];
    for (i, _) in tags.iter().enumerate().filter(|(_, &t)| t) {
        bytes[i / 8] |= 1 << (i % 8);
    }
    BASE64.encode(bytes)
}

impl PatchTagSet {
    pub fn to_json(&self) -> Result<String> {
        let file = TagFile {
            volume_id: self.volume_id.clone(),
            patch_size: self.patch_size,
            source: self.source,
            slices: self
                .slices
                .values()
                .map(|st| SliceRecord {
                    index: st.grid.slice_index,
                    grid: GridRecord::from_grid(&st.grid),
                    tags: TagBits::Indices(st.vessel_cells()),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TagFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let mut set = PatchTagSet::new(file.volume_id, file.patch_size).with_source(file.source);
        for rec in file.slices {
            if rec.grid.patch_size != file.patch_size {
                return Err(Error::Schema(format!(
                    "slice {}: grid patch size {} differs from {}",
                    rec.index, rec.grid.patch_size, file.patch_size
                )));
            }
            if set.slices.contains_key(&rec.index) {
                return Err(Error::Schema(format!("slice {} listed twice", rec.index)));
            }
            let grid = rec.grid.to_grid(rec.index)?;
            let tags = rec.tags.decode(grid.num_cells(), rec.index)?;
            set.insert_slice(SliceTags { grid, tags })?;
        }
        Ok(set)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn save_tags(tags: &PatchTagSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, tags.to_json()?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_tags(path: impl AsRef<Path>) -> Result<PatchTagSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PatchTagSet::from_json(&text)
}

// ---------------------------------------------------------------------------
// Sessions

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One rater working through the slices of one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub session_id: String,
    pub volume_id: String,
    pub rater_id: String,
    pub cursor: usize,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub completed: bool,
    pub submitted_slices: Vec<usize>,
}

impl AnnotationSession {
    pub fn new(
        session_id: impl Into<String>,
        volume_id: impl Into<String>,
        rater_id: impl Into<String>,
    ) -> Self {
        let now = now_millis();
        Self {
            session_id: session_id.into(),
            volume_id: volume_id.into(),
            rater_id: rater_id.into(),
            cursor: 0,
            created_ms: now,
            updated_ms: now,
            completed: false,
            submitted_slices: Vec::new(),
        }
    }

    fn touch(&mut self) {
        self.updated_ms = now_millis().max(self.updated_ms);
    }

    pub fn move_to(&mut self, slice: usize) {
        self.cursor = slice;
        self.touch();
    }

    /// Records a submitted slice; the session completes once every slice in
    /// `total` has been submitted.
    pub fn record_submit(&mut self, slice: usize, total: &[usize]) {
        if let Err(pos) = self.submitted_slices.binary_search(&slice) {
            self.submitted_slices.insert(pos, slice);
        }
        self.cursor = slice;
        self.completed = total
            .iter()
            .all(|s| self.submitted_slices.binary_search(s).is_ok());
        self.touch();
    }

    pub fn progress(&self, total: usize) -> f64 {
        if total == 0 {
            1.0
        } else {
            self.submitted_slices.len() as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use ndarray::Array2;

    fn grid9(s: usize) -> PatchGrid {
        make_grid((96, 96), Rect::full((96, 96)), 32)
            .unwrap()
            .with_slice_index(s)
    }

    fn tagset() -> PatchTagSet {
        PatchTagSet::from_grids("vol", 32, [grid9(0), grid9(3)]).unwrap()
    }

    #[test]
    fn indicator_is_existential() {
        let mut m = Array2::<u8>::zeros((32, 32));
        assert!(!indicator(m.view()));
        m[(31, 31)] = 1;
        assert!(indicator(m.view()));
    }

    #[test]
    fn mark_styles_are_equivalent() {
        // a diagonal vessel through the patch, marked four different ways
        let mut stroke = Array2::<u8>::zeros((32, 32));
        let mut dot = Array2::<u8>::zeros((32, 32));
        let mut outline = Array2::<u8>::zeros((32, 32));
        let mut scribble = Array2::<u8>::zeros((32, 32));
        for i in 4..28 {
            stroke[(i, i)] = 1;
            outline[(i, i.saturating_sub(1))] = 1;
            outline[(i, (i + 1).min(31))] = 1;
        }
        dot[(16, 16)] = 1;
        for i in (10..20).step_by(3) {
            scribble[(i, 30 - i)] = 1;
        }
        let values: Vec<bool> = [stroke, dot, outline, scribble]
            .iter()
            .map(|m| indicator(m.view()))
            .collect();
        assert_eq!(values, vec![true; 4]);
    }

    #[test]
    fn click_toggle_roundtrip() {
        let t = tagset();
        let on = apply_click(&t, 0, 5, true).unwrap();
        assert!(on.get(0, 5).unwrap());
        let off = apply_click(&on, 0, 5, false).unwrap();
        assert_eq!(off, t);
        // idempotent
        assert_eq!(apply_click(&on, 0, 5, true).unwrap(), on);
    }

    #[test]
    fn clicks_commute() {
        let t = tagset();
        let ab = apply_click(&apply_click(&t, 0, 1, true).unwrap(), 3, 7, true).unwrap();
        let ba = apply_click(&apply_click(&t, 3, 7, true).unwrap(), 0, 1, true).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn click_out_of_range() {
        let t = tagset();
        assert!(matches!(
            apply_click(&t, 0, 17, true),
            Err(Error::CellOutOfRange { cell: 17, cells: 9 })
        ));
        assert!(matches!(
            apply_click(&t, 1, 0, true),
            Err(Error::UnknownSlice(1))
        ));
    }

    #[test]
    fn json_roundtrip() {
        let mut t = tagset();
        t.set(0, 2, true).unwrap();
        t.set(3, 8, true).unwrap();
        let back = PatchTagSet::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn empty_tag_set_is_valid() {
        let t = tagset();
        let back = PatchTagSet::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back.num_vessel_cells(), 0);
        assert_eq!(back.num_cells(), 18);
    }

    #[test]
    fn bitset_decoding_and_length_check() {
        let tags = vec![true, false, false, true, false, false, false, false, true];
        let b64 = encode_bitset(&tags);
        let json = format!(
            r#"{{"volume_id":"v","patch_size":32,"slices":[{{"index":0,
            "grid":{{"slice_shape":[96,96],"bbox":[0,0,96,96],"patch_size":32}},
            "tags":"{b64}"}}]}}"#
        );
        let t = PatchTagSet::from_json(&json).unwrap();
        assert_eq!(t.slice(0).unwrap().tags, tags);

        // 3 bytes for a 9-cell grid is a length mismatch
        let bad = BASE64.encode([0u8, 0, 0]);
        let json = json.replace(&b64, &bad);
        let err = PatchTagSet::from_json(&json).unwrap_err();
        assert!(err.to_string().contains("bitset length"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_index_and_unknown_keys() {
        let json = r#"{"volume_id":"v","patch_size":32,"slices":[{"index":0,
            "grid":{"slice_shape":[96,96],"bbox":[0,0,96,96],"patch_size":32},
            "tags":[9]}]}"#;
        assert!(matches!(PatchTagSet::from_json(json), Err(Error::Schema(_))));
        let json = r#"{"volume_id":"v","patch_size":32,"slices":[],"extra":1}"#;
        assert!(matches!(PatchTagSet::from_json(json), Err(Error::Schema(_))));
    }

    #[test]
    fn merge_is_or() {
        let a = apply_click(&tagset(), 0, 1, true).unwrap();
        let b = apply_click(&tagset(), 0, 2, true).unwrap();
        let m = a.merge_or(&b).unwrap();
        assert_eq!(m.slice(0).unwrap().vessel_cells(), vec![1, 2]);
    }

    #[test]
    fn tags_from_marks() {
        let mut marks = Mask3D::zeros((96, 96, 4));
        marks.set((40, 70, 3), true);
        let t = PatchTagSet::from_pixel_marks("v", &marks, &[grid9(0), grid9(3)]).unwrap();
        assert_eq!(t.num_vessel_cells(), 1);
        assert!(t.get(3, 5).unwrap());
    }

    #[test]
    fn session_progress() {
        let mut s = AnnotationSession::new("s1", "v", "r");
        s.record_submit(3, &[0, 3]);
        assert!(!s.completed);
        assert_eq!(s.progress(2), 0.5);
        let before = s.updated_ms;
        s.record_submit(0, &[0, 3]);
        assert!(s.completed);
        assert!(s.updated_ms >= before);
    }
}
