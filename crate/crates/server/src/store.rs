//! In-memory state behind the annotation API: loaded volumes, their grids,
//! per-slice tag versions and rater sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};
use vcaptcha_core::annotation::{load_tags, save_tags, AnnotationSession, PatchTagSet};
use vcaptcha_core::grid::{volume_grids, PatchGrid};
use vcaptcha_core::io::load_volume;
use vcaptcha_core::Volume;

use crate::ApiError;

pub struct VolumeEntry {
    pub volume: Volume,
    pub grids: BTreeMap<usize, PatchGrid>,
    /// Global intensity range, the default rendering window.
    pub range: (f32, f32),
}

struct TagState {
    set: PatchTagSet,
    versions: BTreeMap<usize, u64>,
}

/// Current tags of one slice with their version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceTagsView {
    pub volume_id: String,
    pub slice: usize,
    pub patch_size: usize,
    pub num_cells: usize,
    pub tags: Vec<bool>,
    pub vessel_cells: Vec<usize>,
    pub version: u64,
}

/// Precondition attached to a tag write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Precondition {
    Any,
    Version(u64),
}

pub struct Store {
    volumes: BTreeMap<String, VolumeEntry>,
    tags: HashMap<String, Mutex<TagState>>,
    sessions: Mutex<HashMap<String, AnnotationSession>>,
    tags_dir: Option<PathBuf>,
    next_session: AtomicU64,
    pub patch_size: usize,
}

fn is_volume_file(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".raw") || name.ends_with(".f32")
}

impl Store {
    /// Builds the store from loaded volumes. Existing tag files in
    /// `tags_dir` are picked up when their grids match.
    pub fn new(volumes: Vec<Volume>, patch_size: usize, tags_dir: Option<PathBuf>) -> Result<Self, ApiError> {
        let mut entries = BTreeMap::new();
        let mut tags = HashMap::new();
        for v in volumes {
            let id = v.id().to_string();
            if entries.contains_key(&id) {
                return Err(ApiError::Invalid(format!("duplicate volume id {id}")));
            }
            let grids = volume_grids(&v, patch_size)?;
            let set = Self::initial_tags(&id, patch_size, &grids, tags_dir.as_deref());
            let (lo, hi) = v
                .data()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let versions = grids.iter().map(|g| (g.slice_index, 0)).collect();
            entries.insert(
                id.clone(),
                VolumeEntry {
                    volume: v,
                    grids: grids.into_iter().map(|g| (g.slice_index, g)).collect(),
                    range: (lo, hi),
                },
            );
            tags.insert(id, Mutex::new(TagState { set, versions }));
        }
        if let Some(dir) = &tags_dir {
            std::fs::create_dir_all(dir).map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        Ok(Self {
            volumes: entries,
            tags,
            sessions: Mutex::new(HashMap::new()),
            tags_dir,
            next_session: AtomicU64::new(1),
            patch_size,
        })
    }

    /// Loads every volume file in `data_dir` (non-recursive).
    pub fn open(data_dir: &Path, patch_size: usize, tags_dir: Option<PathBuf>) -> Result<Self, ApiError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(data_dir)
            .map_err(|e| ApiError::Internal(format!("{}: {e}", data_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_volume_file(p))
            .collect();
        paths.sort();
        let mut volumes = Vec::new();
        for p in paths {
            volumes.push(load_volume(&p)?);
        }
        info!(count = volumes.len(), dir = %data_dir.display(), "volumes loaded");
        Self::new(volumes, patch_size, tags_dir)
    }

    fn initial_tags(id: &str, p: usize, grids: &[PatchGrid], dir: Option<&Path>) -> PatchTagSet {
        let empty = || PatchTagSet::from_grids(id, p, grids.iter().cloned()).expect("grids are consistent");
        let Some(path) = dir.map(|d| d.join(format!("{id}.json"))) else {
            return empty();
        };
        if !path.exists() {
            return empty();
        }
        match load_tags(&path) {
            Ok(saved) if saved.patch_size == p && saved.slices().all(|s| grids.contains(&s.grid)) => {
                let mut set = empty();
                for st in saved.slices() {
                    set.set_slice_tags(st.grid.slice_index, st.tags.clone())
                        .expect("same grid, same length");
                }
                set
            }
            Ok(_) => {
                warn!(path = %path.display(), "tag file does not match the volume grids; starting empty");
                empty()
            }
            Err(e) => {
                warn!(path = %path.display(), error = %e, "unreadable tag file; starting empty");
                empty()
            }
        }
    }

    pub fn volumes(&self) -> impl Iterator<Item = &VolumeEntry> {
        self.volumes.values()
    }

    pub fn volume(&self, id: &str) -> Result<&VolumeEntry, ApiError> {
        self.volumes
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("volume {id}")))
    }

    pub fn grid(&self, id: &str, slice: usize) -> Result<&PatchGrid, ApiError> {
        let v = self.volume(id)?;
        if slice >= v.volume.num_slices() {
            return Err(ApiError::NotFound(format!("slice {slice} of {id}")));
        }
        v.grids
            .get(&slice)
            .ok_or_else(|| ApiError::NotFound(format!("slice {slice} of {id} has no brain tissue")))
    }

    /// Number of vessel cells and tagged slices so far.
    pub fn tag_summary(&self, id: &str) -> (usize, usize) {
        let st = self.tags[id].lock().expect("tag lock");
        (st.set.num_vessel_cells(), st.set.num_slices())
    }

    pub fn tags(&self, id: &str, slice: usize) -> Result<SliceTagsView, ApiError> {
        self.grid(id, slice)?;
        let st = self.tags[id].lock().expect("tag lock");
        Ok(Self::view(&st, id, slice))
    }

    fn view(st: &TagState, id: &str, slice: usize) -> SliceTagsView {
        let tags = st.set.slice(slice).expect("slice has a grid").tags.clone();
        SliceTagsView {
            volume_id: id.to_string(),
            slice,
            patch_size: st.set.patch_size,
            num_cells: tags.len(),
            vessel_cells: tags.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i).collect(),
            tags,
            version: st.versions[&slice],
        }
    }

    /// Replaces one slice's tags if `pre` matches the stored version. The
    /// whole volume's tag file is rewritten while the lock is held.
    pub fn put_tags(
        &self,
        id: &str,
        slice: usize,
        tags: Vec<bool>,
        pre: Precondition,
        session: Option<&str>,
    ) -> Result<SliceTagsView, ApiError> {
        self.grid(id, slice)?;
        let mut st = self.tags[id].lock().expect("tag lock");
        let current = st.versions[&slice];
        if let Precondition::Version(v) = pre {
            if v != current {
                return Err(ApiError::VersionConflict(Box::new(Self::view(&st, id, slice))));
            }
        }
        let n = st.set.slice(slice).expect("slice has a grid").tags.len();
        if tags.len() != n {
            return Err(ApiError::Invalid(format!("{} tags for {n} grid cells", tags.len())));
        }
        if let Some(sid) = session {
            let sessions = self.sessions.lock().expect("session lock");
            match sessions.get(sid) {
                Some(s) if s.volume_id == id => {}
                Some(_) => return Err(ApiError::Invalid(format!("session {sid} belongs to another volume"))),
                None => return Err(ApiError::NotFound(format!("session {sid}"))),
            }
        }
        let mut next = st.set.clone();
        next.set_slice_tags(slice, tags)?;
        if let Some(dir) = &self.tags_dir {
            save_tags(&next, dir.join(format!("{id}.json")))?;
        }
        st.set = next;
        *st.versions.get_mut(&slice).expect("slice has a version") = current + 1;
        let view = Self::view(&st, id, slice);
        drop(st);
        if let Some(sid) = session {
            let total: Vec<usize> = self.volume(id)?.grids.keys().copied().collect();
            if let Some(s) = self.sessions.lock().expect("session lock").get_mut(sid) {
                s.record_submit(slice, &total);
            }
        }
        Ok(view)
    }

    pub fn create_session(&self, volume_id: &str, rater_id: &str) -> Result<AnnotationSession, ApiError> {
        let v = self.volume(volume_id)?;
        let n = self.next_session.fetch_add(1, Ordering::Relaxed);
        let mut s = AnnotationSession::new(format!("s{n:04}"), volume_id, rater_id);
        if let Some(&first) = v.grids.keys().next() {
            s.move_to(first);
        }
        self.sessions
            .lock()
            .expect("session lock")
            .insert(s.session_id.clone(), s.clone());
        Ok(s)
    }

    pub fn session(&self, id: &str) -> Result<AnnotationSession, ApiError> {
        self.sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn move_session(&self, id: &str, slice: usize) -> Result<AnnotationSession, ApiError> {
        let mut sessions = self.sessions.lock().expect("session lock");
        let s = sessions
            .get_mut(id)
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))?;
        if slice >= self.volume(&s.volume_id)?.volume.num_slices() {
            return Err(ApiError::Invalid(format!("slice {slice} out of range")));
        }
        s.move_to(slice);
        Ok(s.clone())
    }
}
