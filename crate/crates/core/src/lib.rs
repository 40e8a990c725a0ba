//! Core data model for patch-tag supervised vessel segmentation: volumes and
//! masks, patch grids, patch tags, pseudo-label synthesis, metrics, I/O and
//! a synthetic vessel generator.

pub mod annotation;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod pseudolabel;
pub mod synthgen;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Mask3D, NormStats, Rect, Volume};
