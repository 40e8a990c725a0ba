//! Data root layout: `images/<id>.nii.gz`, `labels/<id>.nii.gz` and
//! `tags/<id>.json`. Pseudo-label directories hold `<id>_pseudo.nii.gz`
//! with a JSON sidecar.

use std::path::{Path, PathBuf};

use vcaptcha_core::annotation::{load_tags, PatchTagSet};
use vcaptcha_core::io::{load_mask, load_volume};
use vcaptcha_core::pseudolabel::PseudoLabelSet;
use vcaptcha_core::volume::compute_brain_mask;
use vcaptcha_core::{Mask3D, NormStats, Volume};
use vcaptcha_pipeline::dataset::BRAIN_QUANTILE;
use vcaptcha_pipeline::split::{split_dataset, SplitSpec};

use crate::CliError;

const VOLUME_EXTS: [&str; 4] = [".nii.gz", ".nii", ".raw", ".f32"];
pub const PSEUDO_SUFFIX: &str = "_pseudo";

pub fn strip_volume_ext(name: &str) -> Option<&str> {
    VOLUME_EXTS.iter().find_map(|e| name.strip_suffix(e))
}

/// Finds `<dir>/<stem><ext>` for any supported extension.
pub fn find_volume_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    VOLUME_EXTS
        .iter()
        .map(|e| dir.join(format!("{stem}{e}")))
        .find(|p| p.is_file())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::MissingInput(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DataRoot {
    pub root: PathBuf,
}

impl DataRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn tags_dir(&self) -> PathBuf {
        self.root.join("tags")
    }

    /// Ids of all images, sorted.
    pub fn volume_ids(&self) -> Result<Vec<String>, CliError> {
        let ids: Vec<String> = read_dir_sorted(&self.images_dir())?
            .iter()
            .filter_map(|p| p.file_name()?.to_str().and_then(strip_volume_ext).map(String::from))
            .collect();
        if ids.is_empty() {
            return Err(CliError::MissingInput(format!("no volumes in {}", self.images_dir().display())));
        }
        Ok(ids)
    }

    pub fn split(&self, seed: u64) -> Result<SplitSpec, CliError> {
        Ok(split_dataset(&self.volume_ids()?, seed)?)
    }

    /// Loads an image; the file name is the volume id.
    pub fn image(&self, id: &str) -> Result<Volume, CliError> {
        let p = find_volume_file(&self.images_dir(), id)
            .ok_or_else(|| CliError::MissingInput(format!("image for volume {id} in {}", self.images_dir().display())))?;
        Ok(load_volume(p)?.with_id(id))
    }

    pub fn labels(&self, id: &str) -> Result<Mask3D, CliError> {
        labels_from(&self.labels_dir(), id)
    }

    pub fn tags(&self, dir: &Path, id: &str) -> Result<PatchTagSet, CliError> {
        let p = dir.join(format!("{id}.json"));
        if !p.is_file() {
            return Err(CliError::MissingInput(format!("tags for volume {id} ({})", p.display())));
        }
        Ok(load_tags(p)?)
    }
}

pub fn labels_from(dir: &Path, id: &str) -> Result<Mask3D, CliError> {
    let p = find_volume_file(dir, id)
        .ok_or_else(|| CliError::MissingInput(format!("labels for volume {id} in {}", dir.display())))?;
    Ok(load_mask(p)?)
}

/// Tag files given as files or directories (non-recursive), sorted.
pub fn tag_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(
                read_dir_sorted(p)?
                    .into_iter()
                    .filter(|f| f.extension().is_some_and(|e| e == "json")),
            );
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::MissingInput(format!("tag file {}", p.display())));
        }
    }
    Ok(out)
}

pub fn pseudo_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{PSEUDO_SUFFIX}.nii.gz"))
}

/// The first directory holding a pseudo-label for `id`.
pub fn find_pseudo(dirs: &[PathBuf], id: &str) -> Option<PathBuf> {
    dirs.iter()
        .filter_map(|d| find_volume_file(d, &format!("{id}{PSEUDO_SUFFIX}")))
        .next()
}

pub fn load_pseudo(dirs: &[PathBuf], id: &str) -> Result<Option<PseudoLabelSet>, CliError> {
    find_pseudo(dirs, id)
        .map(|p| PseudoLabelSet::load(p).map_err(CliError::from))
        .transpose()
}

/// Statistics over the brain region of the given volumes.
pub fn brain_norm(volumes: &[&Volume]) -> Result<NormStats, CliError> {
    let masks: Vec<Mask3D> = volumes
        .iter()
        .map(|v| compute_brain_mask(v, BRAIN_QUANTILE))
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(&Volume, Option<&Mask3D>)> = volumes.iter().copied().zip(masks.iter().map(Some)).collect();
    Ok(vcaptcha_core::volume::normalize_dataset(&pairs)?)
}

/// Volume ids, one per line; blank lines and `#` comments ignored.
pub fn read_id_list(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}
