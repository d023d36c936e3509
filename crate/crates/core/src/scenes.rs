//! Procedural voxel scenes, an orthographic renderer and the dataset builder.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TbnError};
use crate::flow::{RigidPose, RigidTransform};
use crate::image::ImagePlane;
use crate::scalar::Real;
use crate::volume::{cell_coord, nearest_cell, Dims, FeatureVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Box,
    Ell,
    Chairoid,
    Tee,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [Self::Box, Self::Ell, Self::Chairoid, Self::Tee];

    pub fn name(self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::Ell => "ell",
            Self::Chairoid => "chairoid",
            Self::Tee => "tee",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = TbnError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| invalid!("unknown shape family {s:?}"))
    }
}

/// Binary occupancy on a cubic grid with one color per occupied cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelShape {
    side: usize,
    family: ShapeFamily,
    occupied: Vec<bool>,
    colors: Vec<[u8; 3]>,
}

impl VoxelShape {
    pub fn new(side: usize, family: ShapeFamily, occupied: Vec<bool>, colors: Vec<[u8; 3]>) -> Result<Self> {
        let n = side * side * side;
        if side == 0 || occupied.len() != n || colors.len() != n {
            return Err(invalid!("shape buffers must hold {n} cells"));
        }
        if !occupied.iter().any(|&o| o) {
            return Err(invalid!("shape has no occupied cell"));
        }
        Ok(Self {
            side,
            family,
            occupied,
            colors,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dims(&self) -> Dims {
        Dims::cube(self.side)
    }

    pub fn family(&self) -> ShapeFamily {
        self.family
    }

    pub fn occupied(&self) -> &[bool] {
        &self.occupied
    }

    pub fn is_occupied(&self, z: usize, y: usize, x: usize) -> bool {
        self.occupied[self.dims().index(z, y, x)]
    }

    pub fn color(&self, z: usize, y: usize, x: usize) -> [u8; 3] {
        self.colors[self.dims().index(z, y, x)]
    }

    pub fn count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn occupancy<T: Real>(&self) -> FeatureVolume<T> {
        FeatureVolume::from_data(
            self.dims(),
            1,
            self.occupied.iter().map(|&o| if o { T::one() } else { T::zero() }).collect(),
        )
        .expect("cube buffer")
    }

    /// Colors as a 3-channel volume, zero where empty.
    pub fn color_volume<T: Real>(&self) -> FeatureVolume<T> {
        let d = self.dims();
        FeatureVolume::from_fn(d, 3, |z, y, x, c| {
            let i = d.index(z, y, x);
            if self.occupied[i] {
                T::lit(f64::from(self.colors[i][c]) / 255.0)
            } else {
                T::zero()
            }
        })
    }

    /// Rebuilds a shape from stored occupancy and color volumes.
    pub fn from_volumes<T: Real>(family: ShapeFamily, occ: &FeatureVolume<T>, colors: &FeatureVolume<T>) -> Result<Self> {
        let d = occ.dims();
        if d.d != d.h || d.h != d.w || colors.dims() != d || occ.channels() != 1 || colors.channels() != 3 {
            return Err(invalid!("occupancy and color volumes must be matching cubes"));
        }
        let occupied = occ.data().iter().map(|&v| v > T::lit(0.5)).collect();
        let colors = colors
            .data()
            .chunks(3)
            .map(|c| c.iter().map(|v| (v.to_f64_lossy() * 255.0).round() as u8).collect::<Vec<_>>().try_into().expect("3 channels"))
            .collect();
        Self::new(d.d, family, occupied, colors)
    }

    fn fill(&mut self, lo: [usize; 3], hi: [usize; 3], color: [u8; 3]) {
        let d = self.dims();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let i = d.index(z, y, x);
                    self.occupied[i] = true;
                    self.colors[i] = color;
                }
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [0; 3].map(|_| rng.gen_range(25..=215))
}

/// Random inclusive span of `min_len..=max_len` cells inside `[lo, hi]`.
fn span(rng: &mut ChaCha8Rng, lo: usize, hi: usize, min_len: usize, max_len: usize) -> (usize, usize) {
    let len = rng.gen_range(min_len..=max_len);
    let start = rng.gen_range(lo..=hi + 1 - len);
    (start, start + len - 1)
}

/// Deterministic random shape on the default 8-cell grid.
pub fn generate_shape(seed: u64, family: ShapeFamily) -> VoxelShape {
    generate_shape_sized(seed, family, 8).expect("8 cells fit every family")
}

/// Deterministic random shape on a `side`-cell grid (at least 6), kept one
/// cell away from the border.
pub fn generate_shape_sized(seed: u64, family: ShapeFamily, side: usize) -> Result<VoxelShape> {
    if side < 6 {
        return Err(invalid!("grid side {side} is too small, need at least 6"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side * side;
    let mut s = VoxelShape {
        side,
        family,
        occupied: vec![false; n],
        colors: vec![[0; 3]; n],
    };
    let (lo, hi) = (1, side - 2);
    let room = hi - lo + 1;
    match family {
        ShapeFamily::Box => {
            let c = random_color(&mut rng);
            let (x0, x1) = span(&mut rng, lo, hi, 2, room);
            let (y0, y1) = span(&mut rng, lo, hi, 2, room);
            let (z0, z1) = span(&mut rng, lo, hi, 2, room);
            s.fill([x0, y0, z0], [x1, y1, z1], c);
        }
        ShapeFamily::Ell => {
            let (x0, x1) = span(&mut rng, lo, hi, 3, room);
            let (z0, z1) = span(&mut rng, lo, hi, 2, room);
            let (y0, y1) = span(&mut rng, lo, hi, 3, room);
            let foot = rng.gen_range(1..=2);
            let post = rng.gen_range(1..=2);
            s.fill([x0, y0, z0], [x1, y0 + foot - 1, z1], random_color(&mut rng));
            s.fill([x0, y0 + foot, z0], [x0 + post - 1, y1, z1], random_color(&mut rng));
        }
        ShapeFamily::Tee => {
            let (x0, x1) = span(&mut rng, lo, hi, 3, room);
            let (z0, z1) = span(&mut rng, lo, hi, 1, room.min(3));
            let (y0, y1) = span(&mut rng, lo, hi, 3, room);
            let bar = rng.gen_range(1..=2);
            let mid = (x0 + x1) / 2;
            s.fill([x0, y1 + 1 - bar, z0], [x1, y1, z1], random_color(&mut rng));
            s.fill([mid, y0, z0], [mid + (x1 - x0 + 1) % 2, y1 - bar, z1], random_color(&mut rng));
        }
        ShapeFamily::Chairoid => {
            // seat on four legs, a back along the low-z edge and two
            // full-depth armrests, leaving a cavity above the seat
            let (x0, x1) = span(&mut rng, lo, hi, 4, room);
            let (z0, z1) = span(&mut rng, lo, hi, 4, room);
            let seat = rng.gen_range(lo + 1..=(lo + 2).min(hi - 2));
            let top = rng.gen_range(seat + 2..=hi);
            let arm_top = rng.gen_range(seat + 1..=top);
            let (seat_c, leg_c, back_c, arm_c) = (
                random_color(&mut rng),
                random_color(&mut rng),
                random_color(&mut rng),
                random_color(&mut rng),
            );
            s.fill([x0, seat, z0], [x1, seat, z1], seat_c);
            for (x, z) in [(x0, z0), (x1, z0), (x0, z1), (x1, z1)] {
                s.fill([x, lo, z], [x, seat - 1, z], leg_c);
            }
            s.fill([x0, seat + 1, z0], [x0, arm_top, z1], arm_c);
            s.fill([x1, seat + 1, z0], [x1, arm_top, z1], arm_c);
            s.fill([x0, seat + 1, z0], [x1, top, z0], back_c);
        }
    }
    Ok(s)
}

/// Half-width of the rendered field of view in volume coordinates: one
/// cell edge beyond the outermost cell centers.
pub fn view_extent(side: usize) -> f64 {
    side as f64 / (side as f64 - 1.0)
}

/// Center of image column `j` (or, negated, row `j`) in view coordinates.
pub fn pixel_center(j: usize, size: usize, extent: f64) -> f64 {
    -extent + 2.0 * extent * (j as f64 + 0.5) / size as f64
}

/// Pixel containing view coordinate `u`, if inside the image.
pub fn pixel_of(u: f64, size: usize, extent: f64) -> Option<usize> {
    let f = (u + extent) / (2.0 * extent) * size as f64;
    (f >= 0.0 && f < size as f64).then(|| f as usize)
}

/// Depths sampled along each pixel ray, front first.
pub fn depth_samples(size: usize, extent: f64) -> Vec<f64> {
    let n = 2 * size;
    (0..n)
        .map(|k| 2.0 * extent - 4.0 * extent * (k as f64 + 0.5) / n as f64)
        .collect()
}

fn cell_at(shape: &VoxelShape, inv: &RigidTransform<f64>, q: [f64; 3]) -> Option<usize> {
    let p = inv.apply(q);
    let n = shape.side;
    let x = nearest_cell(p[0], n)?;
    let y = nearest_cell(p[1], n)?;
    let z = nearest_cell(p[2], n)?;
    let i = shape.dims().index(z, y, x);
    shape.occupied[i].then_some(i)
}

/// Orthographic render looking down `-z` of the view frame: each pixel
/// shows the front-most occupied cell hit by its ray, white elsewhere.
pub fn render_view<T: Real>(shape: &VoxelShape, pose: &RigidPose, image_size: usize) -> (ImagePlane<T>, ImagePlane<T>) {
    let extent = view_extent(shape.side);
    let inv = pose.transform::<f64>().inverse();
    let depths = depth_samples(image_size, extent);
    let mut rgb = ImagePlane::filled(image_size, image_size, 3, T::one());
    let mut mask = ImagePlane::filled(image_size, image_size, 1, T::zero());
    for r in 0..image_size {
        let vy = -pixel_center(r, image_size, extent);
        for j in 0..image_size {
            let vx = pixel_center(j, image_size, extent);
            let hit = depths.iter().find_map(|&vz| cell_at(shape, &inv, [vx, vy, vz]));
            if let Some(i) = hit {
                for c in 0..3 {
                    rgb.set(c, r, j, T::lit(f64::from(shape.colors[i][c]) / 255.0));
                }
                mask.set(0, r, j, T::one());
            }
        }
    }
    (rgb, mask)
}

/// Cells whose centers project inside every mask.
pub fn visual_hull<T: Real>(side: usize, views: &[(RigidPose, ImagePlane<T>)]) -> Vec<bool> {
    let dims = Dims::cube(side);
    let extent = view_extent(side);
    (0..dims.cells())
        .map(|i| {
            let (z, y, x) = dims.unindex(i);
            let p = [cell_coord::<f64>(x, side), cell_coord(y, side), cell_coord(z, side)];
            views.iter().all(|(pose, mask)| {
                let q = pose.transform::<f64>().apply(p);
                let s = mask.width();
                match (pixel_of(q[0], s, extent), pixel_of(-q[1], mask.height(), extent)) {
                    (Some(j), Some(r)) => mask.get(0, r, j) > T::lit(0.5),
                    _ => false,
                }
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoseSampling {
    /// Azimuths `0, step, 2·step, …` at zero elevation.
    Ring { step: f64 },
    /// Uniform azimuth in `[0, 360)` and elevation in `[-20, 30]`.
    Random,
}

pub const ELEVATION_RANGE: (f64, f64) = (-20.0, 30.0);

impl PoseSampling {
    pub fn poses(&self, n_views: usize, rng: &mut ChaCha8Rng) -> Vec<RigidPose> {
        match *self {
            Self::Ring { step } => (0..n_views).map(|k| RigidPose::new(step * k as f64, 0.0)).collect(),
            Self::Random => (0..n_views).map(|_| random_pose(rng)).collect(),
        }
    }
}

pub fn random_pose(rng: &mut impl Rng) -> RigidPose {
    RigidPose::new(
        rng.gen_range(0.0..360.0),
        rng.gen_range(ELEVATION_RANGE.0..=ELEVATION_RANGE.1),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct View<T> {
    pub pose: RigidPose,
    pub image: ImagePlane<T>,
    pub mask: ImagePlane<T>,
}

impl<T: Real> View<T> {
    /// RGB stacked with the mask, the decoder's output layout.
    pub fn rgba(&self) -> ImagePlane<T> {
        self.image.stack(&self.mask).expect("same-size planes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample<T> {
    pub id: usize,
    pub shape: VoxelShape,
    pub views: Vec<View<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_views: usize,
    pub sampling: PoseSampling,
    pub families: Vec<ShapeFamily>,
    pub image_size: usize,
    pub side: usize,
    /// Number of trailing scenes held out for testing.
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 240,
            n_views: 8,
            sampling: PoseSampling::Ring { step: 45.0 },
            families: vec![ShapeFamily::Chairoid, ShapeFamily::Box],
            image_size: 32,
            side: 8,
            n_test: 40,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(invalid!("at least two views per scene are required, got {}", self.n_views));
        }
        if self.families.is_empty() {
            return Err(invalid!("no shape families given"));
        }
        if self.n_test > self.n_scenes {
            return Err(invalid!("{} test scenes out of {}", self.n_test, self.n_scenes));
        }
        if self.image_size == 0 {
            return Err(invalid!("image size must be positive"));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.n_scenes - self.n_test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub config: DatasetConfig,
    pub scenes: Vec<MultiViewSample<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn train(&self) -> &[MultiViewSample<T>] {
        &self.scenes[..self.config.n_train()]
    }

    pub fn test(&self) -> &[MultiViewSample<T>] {
        &self.scenes[self.config.n_train()..]
    }
}

/// Scene `index` of a dataset, independent of every other scene.
pub fn make_scene<T: Real>(config: &DatasetConfig, index: usize) -> Result<MultiViewSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let family = config.families[index % config.families.len()];
    let shape = generate_shape_sized(rng.gen(), family, config.side)?;
    let views = config
        .sampling
        .poses(config.n_views, &mut rng)
        .into_iter()
        .map(|pose| {
            let (image, mask) = render_view(&shape, &pose, config.image_size);
            View { pose, image, mask }
        })
        .collect();
    Ok(MultiViewSample {
        id: index,
        shape,
        views,
    })
}

pub fn make_dataset<T: Real>(config: &DatasetConfig) -> Result<Dataset<T>> {
    config.validate()?;
    let scenes = (0..config.n_scenes)
        .into_par_iter()
        .map(|i| make_scene(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_names_round_trip() {
        for f in ShapeFamily::ALL {
            assert_eq!(f.name().parse::<ShapeFamily>().unwrap(), f);
        }
        assert!("sofa".parse::<ShapeFamily>().is_err());
    }

    #[test]
    fn every_family_fits_the_smallest_grid() {
        for seed in 0..40 {
            for f in ShapeFamily::ALL {
                for side in 6..=9 {
                    assert!(generate_shape_sized(seed, f, side).unwrap().count() > 0);
                }
            }
        }
        assert!(generate_shape_sized(0, ShapeFamily::Box, 5).is_err());
    }

    #[test]
    fn shapes_are_deterministic_and_in_bounds() {
        for f in ShapeFamily::ALL {
            for seed in 0..20 {
                let a = generate_shape(seed, f);
                assert_eq!(a, generate_shape(seed, f));
                assert!(a.count() > 0);
                let d = a.dims();
                for i in 0..d.cells() {
                    let (z, y, x) = d.unindex(i);
                    if a.occupied()[i] {
                        assert!([z, y, x].iter().all(|&k| (1..=6).contains(&k)), "{f} {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn box_is_a_filled_cuboid() {
        for seed in 0..20 {
            let s = generate_shape(seed, ShapeFamily::Box);
            let d = s.dims();
            let cells: Vec<_> = (0..d.cells()).filter(|&i| s.occupied()[i]).map(|i| d.unindex(i)).collect();
            let lo = (0..3).map(|a| cells.iter().map(|c| [c.0, c.1, c.2][a]).min().unwrap()).collect::<Vec<_>>();
            let hi = (0..3).map(|a| cells.iter().map(|c| [c.0, c.1, c.2][a]).max().unwrap()).collect::<Vec<_>>();
            let volume: usize = (0..3).map(|a| hi[a] - lo[a] + 1).product();
            assert_eq!(volume, cells.len());
        }
    }

    #[test]
    fn single_front_voxel_projects_to_its_block() {
        let side = 8;
        let mut occ = vec![false; 512];
        let mut colors = vec![[0; 3]; 512];
        let d = Dims::cube(side);
        occ[d.index(7, 5, 2)] = true;
        colors[d.index(7, 5, 2)] = [10, 20, 30];
        let shape = VoxelShape::new(side, ShapeFamily::Box, occ, colors).unwrap();
        let (rgb, mask) = render_view::<f64>(&shape, &RigidPose::identity(), 32);
        // x index 2 covers columns 8..12; y index 5 counts from the bottom,
        // so it covers rows (7-5)*4 .. +4
        for r in 0..32 {
            for j in 0..32 {
                let inside = (8..12).contains(&j) && (8..12).contains(&r);
                assert_eq!(mask.get(0, r, j), if inside { 1.0 } else { 0.0 }, "{r} {j}");
                let expect = if inside { 10.0 / 255.0 } else { 1.0 };
                assert_eq!(rgb.get(0, r, j), expect);
            }
        }
    }

    #[test]
    fn symmetric_box_half_turn_mask() {
        let side = 8;
        let d = Dims::cube(side);
        let mut occ = vec![false; 512];
        for i in 0..512 {
            let (z, y, x) = d.unindex(i);
            occ[i] = (2..=5).contains(&x) && (1..=4).contains(&y) && (3..=4).contains(&z);
        }
        let shape = VoxelShape::new(side, ShapeFamily::Box, occ, vec![[9; 3]; 512]).unwrap();
        let (_, a) = render_view::<f32>(&shape, &RigidPose::identity(), 32);
        let (_, b) = render_view::<f32>(&shape, &RigidPose::new(180.0, 0.0), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn every_shape_has_mask_coverage_and_white_background() {
        let cfg = DatasetConfig {
            n_scenes: 8,
            n_test: 2,
            families: ShapeFamily::ALL.to_vec(),
            sampling: PoseSampling::Random,
            ..DatasetConfig::default()
        };
        let ds = make_dataset::<f32>(&cfg).unwrap();
        for s in &ds.scenes {
            for v in &s.views {
                assert!(v.mask.data().iter().any(|&m| m == 1.0));
                assert!(v.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
                for (i, &m) in v.mask.data().iter().enumerate() {
                    if m == 0.0 {
                        for c in 0..3 {
                            assert_eq!(v.image.channel(c)[i], 1.0);
                        }
                    }
                }
                let (lo, hi) = ELEVATION_RANGE;
                assert!(v.pose.elevation >= lo && v.pose.elevation <= hi);
                assert!((0.0..360.0).contains(&v.pose.azimuth));
            }
        }
    }

    #[test]
    fn ring_poses_and_determinism() {
        let cfg = DatasetConfig {
            n_scenes: 3,
            n_test: 1,
            ..DatasetConfig::default()
        };
        let a = make_dataset::<f32>(&cfg).unwrap();
        let az: Vec<f64> = a.scenes[0].views.iter().map(|v| v.pose.azimuth).collect();
        assert_eq!(az, vec![0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0]);
        assert_eq!(a, make_dataset::<f32>(&cfg).unwrap());
        assert_eq!(a.train().len(), 2);
        assert_eq!(a.test().len(), 1);
        assert!(make_dataset::<f32>(&DatasetConfig { n_views: 1, ..cfg }).is_err());
    }

    #[test]
    fn chairoid_has_a_cavity_inside_its_hull() {
        let ring = PoseSampling::Ring { step: 45.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..20 {
            let shape = generate_shape(seed, ShapeFamily::Chairoid);
            let views: Vec<_> = ring
                .poses(8, &mut rng)
                .into_iter()
                .map(|p| (p, render_view::<f64>(&shape, &p, 32).1))
                .collect();
            let hull = visual_hull(8, &views);
            let carved = hull.iter().zip(shape.occupied()).filter(|(&h, &o)| h && !o).count();
            assert!(carved > 0, "seed {seed}");
        }
    }

    #[test]
    fn volume_round_trip() {
        let s = generate_shape(3, ShapeFamily::Chairoid);
        let back = VoxelShape::from_volumes(s.family(), &s.occupancy::<f32>(), &s.color_volume::<f32>()).unwrap();
        assert_eq!(back.occupied(), s.occupied());
        for i in 0..s.occupied().len() {
            if s.occupied()[i] {
                assert_eq!(back.colors[i], s.colors[i]);
            }
        }
    }
}
