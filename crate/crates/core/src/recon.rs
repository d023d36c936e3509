//! Occupancy evaluation, view recycling and isosurface export.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::flow::{relative_flow, RigidPose};
use crate::image::ImagePlane;
use crate::mc_table::TRI_TABLE;
use crate::net::TbnModel;
use crate::scalar::Real;
use crate::scenes::random_pose;
use crate::volume::{aggregate, cell_coord, resample, Dims, FeatureVolume, OccupancyVolume};

pub const SWEEP_POINTS: usize = 64;
pub const MAX_EXTRA_VIEWS: usize = 9;

/// `|pred > τ ∧ truth| / |pred > τ ∨ truth|`, 1 when both are empty.
pub fn iou<T: Real>(pred: &OccupancyVolume<T>, truth: &[bool], threshold: T) -> Result<f64> {
    if pred.channels() != 1 || pred.data().len() != truth.len() {
        return Err(shape_err!(
            "prediction with {} values against {} truth cells",
            pred.data().len(),
            truth.len()
        ));
    }
    let bin: Vec<bool> = pred.data().iter().map(|&v| v > threshold).collect();
    Ok(binary_iou(&bin, truth))
}

pub fn binary_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Threshold grid `i / 65` for `i = 1..=64`.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=SWEEP_POINTS).map(|i| i as f64 / (SWEEP_POINTS + 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Regular,
    Random,
    Real,
}

impl std::str::FromStr for SamplingMode {
    type Err = crate::TbnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Self::Regular),
            "random" => Ok(Self::Random),
            "real" => Ok(Self::Real),
            _ => Err(invalid!("unknown sampling mode {s:?}, expected regular, random or real")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_scene: Vec<f64>,
    pub mean: f64,
    pub threshold: f64,
    pub views_added: usize,
    pub mode: SamplingMode,
}

/// Sweeps the threshold grid and keeps the smallest threshold reaching the
/// best mean IoU over all pairs.
pub fn optimal_threshold_iou<T: Real>(
    preds: &[OccupancyVolume<T>],
    truths: &[Vec<bool>],
    views_added: usize,
    mode: SamplingMode,
) -> Result<IoUReport> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(invalid!(
            "need matching nonempty prediction and truth lists, got {} and {}",
            preds.len(),
            truths.len()
        ));
    }
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for tau in sweep_thresholds() {
        let per_scene = preds
            .iter()
            .zip(truths)
            .map(|(p, t)| iou(p, t, T::lit(tau)))
            .collect::<Result<Vec<_>>>()?;
        let mean = per_scene.iter().sum::<f64>() / per_scene.len() as f64;
        if best.as_ref().map_or(true, |(m, _, _)| mean > *m) {
            best = Some((mean, tau, per_scene));
        }
    }
    let (mean, threshold, per_scene) = best.expect("sweep is nonempty");
    Ok(IoUReport {
        per_scene,
        mean,
        threshold,
        views_added,
        mode,
    })
}

/// Plain-text table of mean IoU with one row per views-added count and one
/// column per sampling mode.
pub fn iou_table(reports: &[IoUReport]) -> String {
    let mut modes: Vec<SamplingMode> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in reports {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
        if !counts.contains(&r.views_added) {
            counts.push(r.views_added);
        }
    }
    counts.sort_unstable();
    let mut out = String::from("views added");
    for m in &modes {
        let _ = write!(out, " | {:>8}", format!("{m:?}").to_lowercase());
    }
    out.push('\n');
    for c in counts {
        let _ = write!(out, "{c:>11}");
        for m in &modes {
            match reports.iter().find(|r| r.views_added == c && r.mode == *m) {
                Some(r) => {
                    let _ = write!(out, " | {:>8.4}", r.mean);
                }
                None => out.push_str(" |        -"),
            }
        }
        out.push('\n');
    }
    out
}

/// Views synthesized for recycling.
#[derive(Clone, Debug)]
pub enum Recycling<'a, T> {
    /// Azimuths `input + 360·j/(n+1)` at zero elevation.
    Regular,
    /// Dataset-style random poses from a seeded generator.
    Random { seed: u64 },
    /// Supplied real views instead of synthesized ones.
    Real(&'a [(ImagePlane<T>, RigidPose)]),
}

impl<T> Recycling<'_, T> {
    pub fn mode(&self) -> SamplingMode {
        match self {
            Self::Regular => SamplingMode::Regular,
            Self::Random { .. } => SamplingMode::Random,
            Self::Real(_) => SamplingMode::Real,
        }
    }
}

pub fn regular_poses(input: &RigidPose, n: usize) -> Vec<RigidPose> {
    (1..=n)
        .map(|j| RigidPose::new(input.azimuth + 360.0 * j as f64 / (n + 1) as f64, 0.0))
        .collect()
}

/// Canonical-frame occupancy from one posed image plus `n_extra` recycled
/// views.
pub fn reconstruct_with_recycling<T: Real>(
    model: &TbnModel<T>,
    input_image: &ImagePlane<T>,
    input_pose: &RigidPose,
    n_extra: usize,
    mode: &Recycling<'_, T>,
) -> Result<OccupancyVolume<T>> {
    if n_extra > MAX_EXTRA_VIEWS {
        return Err(invalid!("at most {MAX_EXTRA_VIEWS} extra views, got {n_extra}"));
    }
    match mode {
        Recycling::Regular => reconstruct_from_poses(model, input_image, input_pose, &regular_poses(input_pose, n_extra)),
        Recycling::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let poses: Vec<RigidPose> = (0..n_extra).map(|_| random_pose(&mut rng)).collect();
            reconstruct_from_poses(model, input_image, input_pose, &poses)
        }
        Recycling::Real(views) => {
            if views.len() < n_extra {
                return Err(invalid!("{n_extra} extra views requested, {} supplied", views.len()));
            }
            let mut all = vec![(input_image.clone(), *input_pose)];
            all.extend_from_slice(&views[..n_extra]);
            let agg = model.aggregate_views(&all, &RigidPose::identity())?;
            model.decode_occupancy(&agg)
        }
    }
}

/// Synthesizes the input at each extra pose, re-encodes those images, and
/// decodes the mean of all bottlenecks in the canonical frame.
pub fn reconstruct_from_poses<T: Real>(
    model: &TbnModel<T>,
    input_image: &ImagePlane<T>,
    input_pose: &RigidPose,
    extra_poses: &[RigidPose],
) -> Result<OccupancyVolume<T>> {
    let dims: Dims = model.arch().dims();
    let canonical = RigidPose::identity();
    let x = model.encode(input_image)?;
    let mut bottlenecks = vec![resample(&x, &relative_flow(dims, input_pose, &canonical))?];
    for pose in extra_poses {
        let moved = resample(&x, &relative_flow(dims, input_pose, pose))?;
        let synthesized = model.decode_image(&moved)?.rgb()?;
        let again = model.encode(&synthesized)?;
        bottlenecks.push(resample(&again, &relative_flow(dims, pose, &canonical))?);
    }
    model.decode_occupancy(&aggregate(&bottlenecks)?)
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Axis-aligned `(min, max)` corners, `None` for an empty mesh.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Marching-cubes isosurface of the min-max normalized occupancy at
/// `threshold`. The volume is padded with empty cells so surfaces close at
/// the border; vertices are clamped to `[-1, 1]³`.
pub fn extract_mesh<T: Real>(occ: &OccupancyVolume<T>, threshold: f64) -> Result<Mesh> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid!("threshold must lie in (0, 1), got {threshold}"));
    }
    if occ.channels() != 1 {
        return Err(shape_err!("occupancy must have one channel"));
    }
    let d = occ.dims();
    let vals: Vec<f64> = occ.data().iter().map(|v| v.to_f64_lossy()).collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // a constant volume is solid unless it is all zero
    if !(hi > 0.0) {
        return Ok(Mesh::default());
    }
    let (lo, span) = if hi > lo { (lo, hi - lo) } else { (0.0, hi) };
    let (pd, ph, pw) = (d.d + 2, d.h + 2, d.w + 2);
    // padded value lookup, index (x, y, z) with the pad at 0
    let value = |x: usize, y: usize, z: usize| -> f64 {
        if x == 0 || y == 0 || z == 0 || x > d.w || y > d.h || z > d.d {
            0.0
        } else {
            (vals[d.index(z - 1, y - 1, x - 1)] - lo) / span
        }
    };
    let coord = |i: usize, n: usize| -> f64 {
        let s = if n > 1 { 2.0 / (n - 1) as f64 } else { 2.0 };
        cell_coord::<f64>(0, n) + (i as f64 - 1.0) * s
    };
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<([usize; 3], [usize; 3]), u32> = HashMap::new();
    for z in 0..pd - 1 {
        for y in 0..ph - 1 {
            for x in 0..pw - 1 {
                let corner = |k: usize| [x + CORNERS[k][0], y + CORNERS[k][1], z + CORNERS[k][2]];
                let cv: [f64; 8] = std::array::from_fn(|k| {
                    let c = corner(k);
                    value(c[0], c[1], c[2])
                });
                let case = (0..8).fold(0usize, |acc, k| acc | (usize::from(cv[k] < threshold) << k));
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let (a, b) = EDGES[e as usize];
                        let (ca, cb) = (corner(a), corner(b));
                        let key = if ca < cb { (ca, cb) } else { (cb, ca) };
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let t = (threshold - cv[a]) / (cv[b] - cv[a]);
                            let pa = [coord(ca[0], d.w), coord(ca[1], d.h), coord(ca[2], d.d)];
                            let pb = [coord(cb[0], d.w), coord(cb[1], d.h), coord(cb[2], d.d)];
                            let p = std::array::from_fn(|i| (pa[i] + t * (pb[i] - pa[i])).clamp(-1.0, 1.0));
                            mesh.vertices.push(p);
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    Ok(mesh)
}

/// Converts a binary grid to an occupancy volume of zeros and ones.
pub fn binary_volume<T: Real>(dims: Dims, cells: &[bool]) -> Result<FeatureVolume<T>> {
    FeatureVolume::from_data(dims, 1, cells.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
}
