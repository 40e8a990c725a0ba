//! Synthetic vascular volumes with exact labels.
//!
//! Trees of capsules (cylinders with spherical caps) are grown from random
//! roots, rasterized by a point-in-capsule test on voxel centres, and
//! rendered as two-level images with additive Gaussian noise.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotation::{PatchTagSet, TagSource};
use crate::error::{Error, Result};
use crate::grid::PatchGrid;
use crate::pseudolabel::Polarity;
use crate::volume::{Mask3D, Volume};

pub const VESSEL_INTENSITY: f32 = 200.0;
pub const BACKGROUND_INTENSITY: f32 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub parent: Option<usize>,
    pub level: usize,
}

impl Segment {
    /// Squared distance from `p` to the segment axis.
    pub fn dist2(&self, p: [f64; 3]) -> f64 {
        let d = sub(self.end, self.start);
        let len2 = dot(d, d);
        let t = if len2 > 0.0 {
            (dot(sub(p, self.start), d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [
            self.start[0] + t * d[0],
            self.start[1] + t * d[1],
            self.start[2] + t * d[2],
        ];
        let e = sub(p, q);
        dot(e, e)
    }

    pub fn length(&self) -> f64 {
        let d = sub(self.end, self.start);
        dot(d, d).sqrt()
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    if n < 1e-12 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// A forest of tube segments; children start where their parent ends.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TubeTree {
    pub segments: Vec<Segment>,
    pub depth: usize,
    /// Maximum children per segment.
    pub branching: usize,
}

impl TubeTree {
    pub fn max_radius(&self) -> f64 {
        self.segments.iter().map(|s| s.radius).fold(0.0, f64::max)
    }

    pub fn children(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.parent == Some(idx))
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Number of segment generations along any root-to-leaf path.
    pub depth: usize,
    /// Probability that a segment forks into two children instead of one.
    pub branch_prob: f64,
    /// Root radius is drawn uniformly from this range; it is also the floor
    /// and ceiling for every segment.
    pub radius_range: (f64, f64),
    /// Child radius = parent radius × taper (floored at the range minimum).
    pub taper: f64,
    pub length_range: (f64, f64),
    pub roots: usize,
    /// Standard deviation of the direction perturbation at each generation.
    pub wiggle: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self::desk()
    }
}

impl TreeParams {
    /// Tuned so that one tree occupies roughly 0.5% of a 64³ volume.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            branch_prob: 0.6,
            radius_range: (1.0, 2.0),
            taper: 0.85,
            length_range: (10.0, 22.0),
            roots: 1,
            wiggle: 0.5,
        }
    }

    fn validate(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (h, w, s) = shape;
        let min_dim = h.min(w).min(s);
        if min_dim < 32 {
            return Err(Error::InvalidParams(format!(
                "shape {shape:?} is smaller than 32 voxels on some axis"
            )));
        }
        let (rmin, rmax) = self.radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::InvalidParams(format!(
                "radius range {:?} must satisfy 0 < min <= max",
                self.radius_range
            )));
        }
        if rmax > min_dim as f64 / 4.0 {
            return Err(Error::InvalidParams(format!(
                "radius {rmax} exceeds a quarter of the smallest extent {min_dim}"
            )));
        }
        if self.depth == 0 || self.roots == 0 {
            return Err(Error::InvalidParams("depth and roots must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::InvalidParams("branch_prob must lie in [0, 1]".into()));
        }
        if !(self.taper > 0.0 && self.taper <= 1.0) {
            return Err(Error::InvalidParams("taper must lie in (0, 1]".into()));
        }
        let (lmin, lmax) = self.length_range;
        if !(lmin > 0.0 && lmin <= lmax) {
            return Err(Error::InvalidParams("invalid length range".into()));
        }
        Ok(())
    }
}

/// Largest step along `dir` from `p` that stays inside `[lo, hi]` per axis.
fn max_step(p: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> f64 {
    let mut t = f64::INFINITY;
    for a in 0..3 {
        if dir[a] > 1e-12 {
            t = t.min((hi[a] - p[a]) / dir[a]);
        } else if dir[a] < -1e-12 {
            t = t.min((lo[a] - p[a]) / dir[a]);
        }
    }
    t.max(0.0)
}

/// Grows a deterministic forest of tubes inside `shape`.
///
/// Random draws happen in this order, from one ChaCha8 stream seeded with
/// `seed`. For each root: start point (3 uniforms), direction (3 standard
/// normals), radius (1 uniform). Segments are then processed breadth-first;
/// each draws its length (1 uniform) and, if it is not in the last
/// generation, one uniform deciding whether it forks, followed by three
/// standard normals per child for the child direction.
pub fn generate_tree(seed: u64, shape: (usize, usize, usize), params: &TreeParams) -> Result<TubeTree> {
    params.validate(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = params.radius_range.1 + 0.5;
    let lo = [margin; 3];
    let hi = [
        shape.0 as f64 - 1.0 - margin,
        shape.1 as f64 - 1.0 - margin,
        shape.2 as f64 - 1.0 - margin,
    ];

    struct Pending {
        start: [f64; 3],
        dir: [f64; 3],
        radius: f64,
        parent: Option<usize>,
        level: usize,
    }

    let mut queue = std::collections::VecDeque::new();
    for _ in 0..params.roots {
        let start = [
            rng.random_range(lo[0]..=hi[0]),
            rng.random_range(lo[1]..=hi[1]),
            rng.random_range(lo[2]..=hi[2]),
        ];
        let dir = normalized([
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ]);
        let radius = rng.random_range(params.radius_range.0..=params.radius_range.1);
        queue.push_back(Pending {
            start,
            dir,
            radius,
            parent: None,
            level: 0,
        });
    }

    let mut segments = Vec::new();
    while let Some(p) = queue.pop_front() {
        let length = rng.random_range(params.length_range.0..=params.length_range.1);
        let mut dir = p.dir;
        let mut t = max_step(p.start, dir, lo, hi);
        if t < 0.5 * length {
            // head back into the volume along the blocked axes
            for a in 0..3 {
                if (dir[a] > 0.0 && hi[a] - p.start[a] < length * dir[a].abs())
                    || (dir[a] < 0.0 && p.start[a] - lo[a] < length * dir[a].abs())
                {
                    dir[a] = -dir[a];
                }
            }
            t = max_step(p.start, dir, lo, hi);
        }
        let step = length.min(t);
        let end = [
            p.start[0] + dir[0] * step,
            p.start[1] + dir[1] * step,
            p.start[2] + dir[2] * step,
        ];
        let idx = segments.len();
        segments.push(Segment {
            start: p.start,
            end,
            radius: p.radius,
            parent: p.parent,
            level: p.level,
        });
        if p.level + 1 < params.depth {
            let forks = rng.random::<f64>() < params.branch_prob;
            let n_children = if forks { 2 } else { 1 };
            let child_radius = (p.radius * params.taper).max(params.radius_range.0);
            for _ in 0..n_children {
                let jitter: [f64; 3] = [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ];
                let child_dir = normalized([
                    dir[0] + params.wiggle * jitter[0],
                    dir[1] + params.wiggle * jitter[1],
                    dir[2] + params.wiggle * jitter[2],
                ]);
                queue.push_back(Pending {
                    start: end,
                    dir: child_dir,
                    radius: child_radius,
                    parent: Some(idx),
                    level: p.level + 1,
                });
            }
        }
    }
    Ok(TubeTree {
        segments,
        depth: params.depth,
        branching: 2,
    })
}

/// Voxel `(r, c, z)` is set iff its centre lies within some segment's radius
/// of that segment's axis.
pub fn rasterize(tree: &TubeTree, shape: (usize, usize, usize)) -> Mask3D {
    let mut mask = Mask3D::zeros(shape);
    let dims = [shape.0, shape.1, shape.2];
    for seg in &tree.segments {
        let r2 = seg.radius * seg.radius;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let min = seg.start[a].min(seg.end[a]) - seg.radius;
            let max = seg.start[a].max(seg.end[a]) + seg.radius;
            lo[a] = min.ceil().max(0.0) as usize;
            hi[a] = (max.floor() as i64).clamp(-1, dims[a] as i64 - 1) as usize + 1;
            if max < 0.0 {
                hi[a] = 0;
            }
        }
        for r in lo[0]..hi[0] {
            for c in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    if seg.dist2([r as f64, c as f64, z as f64]) <= r2 {
                        mask.set((r, c, z), true);
                    }
                }
            }
        }
    }
    mask
}

/// Two-level rendering: vessels 200 / background 50 for bright polarity,
/// swapped for dark, plus Gaussian noise with standard deviation `noise_sigma`.
pub fn render_intensity(
    id: impl Into<String>,
    labels: &Mask3D,
    polarity: Polarity,
    noise_sigma: f64,
    seed: u64,
) -> Result<Volume> {
    let (vessel, background) = match polarity {
        Polarity::BrightVessel => (VESSEL_INTENSITY, BACKGROUND_INTENSITY),
        Polarity::DarkVessel => (BACKGROUND_INTENSITY, VESSEL_INTENSITY),
    };
    let mut data = labels
        .data()
        .mapv(|l| if l != 0 { vessel } else { background });
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::InvalidParams(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Volume::new(id, data, [1.0; 3])
}

/// Oracle annotator: a cell is tagged iff the labels touch its window. With
/// `flip_prob > 0`, each tag is then flipped independently.
pub fn simulate_tags(
    volume_id: impl Into<String>,
    labels: &Mask3D,
    grids: &[PatchGrid],
    flip_prob: f64,
    seed: u64,
) -> Result<PatchTagSet> {
    let mut tags = PatchTagSet::from_pixel_marks(volume_id, labels, grids)?;
    if flip_prob > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices: Vec<usize> = tags.slice_indices().collect();
        for s in indices {
            let current = tags.slice(s).map(|st| st.tags.clone()).unwrap_or_default();
            let flipped = current
                .into_iter()
                .map(|t| if rng.random::<f64>() < flip_prob { !t } else { t })
                .collect();
            tags.set_slice_tags(s, flipped)?;
        }
    }
    Ok(tags.with_source(TagSource::Human))
}

/// A generated case: tree, labels and rendered image.
#[derive(Debug, Clone)]
pub struct SynthCase {
    pub tree: TubeTree,
    pub labels: Mask3D,
    pub image: Volume,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub tree: TreeParams,
    /// Roots are added one at a time until the vessel fraction reaches this.
    pub target_fraction: f64,
    pub max_roots: usize,
    pub polarity: Polarity,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tree: TreeParams::desk(),
            target_fraction: 0.021,
            max_roots: 64,
            polarity: Polarity::BrightVessel,
            noise_sigma: 20.0,
        }
    }
}

/// Grows trees until the labelled fraction reaches `cfg.target_fraction`,
/// stopping at whichever root count lands closest to it.
pub fn synth_case(
    id: impl Into<String>,
    seed: u64,
    shape: (usize, usize, usize),
    cfg: &SynthConfig,
) -> Result<SynthCase> {
    let total = (shape.0 * shape.1 * shape.2) as f64;
    let mut forest = TubeTree {
        segments: Vec::new(),
        depth: cfg.tree.depth,
        branching: 2,
    };
    let mut labels = Mask3D::zeros(shape);
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_roots {
        let tree = generate_tree(seeds.random(), shape, &cfg.tree)?;
        let candidate = labels.union(&rasterize(&tree, shape))?;
        let before = labels.count() as f64 / total;
        let after = candidate.count() as f64 / total;
        if before > 0.0 && (after - cfg.target_fraction).abs() > (before - cfg.target_fraction).abs() {
            break;
        }
        let offset = forest.segments.len();
        forest.segments.extend(tree.segments.into_iter().map(|mut s| {
            s.parent = s.parent.map(|p| p + offset);
            s
        }));
        labels = candidate;
        if after >= cfg.target_fraction {
            break;
        }
    }
    let image = render_intensity(id, &labels, cfg.polarity, cfg.noise_sigma, seeds.random())?;
    Ok(SynthCase {
        tree: forest,
        labels,
        image,
    })
}

/// Adds zero-mean Gaussian noise of `sigma` inside an axis-aligned box
/// covering `fraction` of each axis, placed at random. Returns the box mask.
pub fn inject_noise_box(
    volume: &Volume,
    fraction: f64,
    sigma: f64,
    seed: u64,
) -> Result<(Volume, Mask3D)> {
    let (h, w, s) = volume.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let ext = |n: usize| ((n as f64 * fraction).round() as usize).clamp(1, n);
    let (eh, ew, es) = (ext(h), ext(w), ext(s));
    let r0 = rng.random_range(0..=h - eh);
    let c0 = rng.random_range(0..=w - ew);
    let z0 = rng.random_range(0..=s - es);
    let mut data = volume.data().clone();
    let mut region = Mask3D::zeros((h, w, s));
    for r in r0..r0 + eh {
        for c in c0..c0 + ew {
            for z in z0..z0 + es {
                data[(r, c, z)] += normal.sample(&mut rng) as f32;
                region.set((r, c, z), true);
            }
        }
    }
    Ok((Volume::new(volume.id(), data, volume.spacing())?, region))
}

/// Fraction of labelled voxels.
pub fn vessel_fraction(labels: &Mask3D) -> f64 {
    let (h, w, s) = labels.shape();
    labels.count() as f64 / (h * w * s) as f64
}
