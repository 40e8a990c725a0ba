//! Training-set enlargement: classifier tags on unlabeled volumes turned
//! into pseudo-labels and appended to the human-tagged set.

use serde::{Deserialize, Serialize};
use tracing::info;
use vcaptcha_core::annotation::{PatchTagSet, TagSource};
use vcaptcha_core::pseudolabel::{synthesize, ClusterMethod, Polarity, PseudoLabelSet};
use vcaptcha_core::Volume;
use vcaptcha_nn::Checkpoint;

use crate::infer::classify_volume;
use crate::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnlargeOptions {
    /// Classifier cut for auto-tagging.
    pub threshold: f32,
    pub polarity: Polarity,
    pub method: ClusterMethod,
}

impl Default for EnlargeOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            polarity: Polarity::BrightVessel,
            method: ClusterMethod::Kmeans,
        }
    }
}

/// Entries produced for one pool volume.
#[derive(Debug, Clone)]
pub struct Enlarged {
    pub tags: PatchTagSet,
    pub labels: PseudoLabelSet,
}

fn is_human(set: &PseudoLabelSet) -> bool {
    set.source() != Some(TagSource::Classifier)
}

/// Returns `training` followed by one classifier-derived entry per pool
/// volume not already present. Existing entries are copied untouched, so
/// running twice with the same pool adds nothing. A pool volume that shares
/// an id with a human-tagged entry is an error.
pub fn enlarge(
    training: &[PseudoLabelSet],
    pool: &[Volume],
    clf: &Checkpoint,
    opts: &EnlargeOptions,
) -> Result<(Vec<PseudoLabelSet>, Vec<Enlarged>)> {
    let mut out = training.to_vec();
    let mut added = Vec::new();
    for v in pool {
        if let Some(existing) = out.iter().find(|s| s.volume_id == v.id()) {
            if is_human(existing) {
                return Err(PipelineError::InvalidInput(format!(
                    "pool volume {} is already human-annotated",
                    v.id()
                )));
            }
            continue;
        }
        let tags = classify_volume(clf, v, opts.threshold)?;
        let labels = synthesize(v, &tags, opts.polarity, opts.method)?;
        info!(
            volume = v.id(),
            vessel_cells = tags.num_vessel_cells(),
            cells = tags.num_cells(),
            "auto-tagged"
        );
        out.push(labels.clone());
        added.push(Enlarged { tags, labels });
    }
    Ok((out, added))
}
