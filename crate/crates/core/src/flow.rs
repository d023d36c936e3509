//! Flow-field constructors for rigid view changes and non-rigid edits.
//!
//! Every flow maps an output cell to the input coordinate it samples, so a
//! content transform `T` is realized by the flow `p -> T⁻¹(p)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::{sin_cos_deg, Real};
use crate::volume::{cell_coord, coord_to_index, Dims, FeatureVolume, FlowField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn len(self, dims: Dims) -> usize {
        match self {
            Axis::X => dims.w,
            Axis::Y => dims.h,
            Axis::Z => dims.d,
        }
    }

    fn cell_of(self, z: usize, y: usize, x: usize) -> usize {
        match self {
            Axis::X => x,
            Axis::Y => y,
            Axis::Z => z,
        }
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self([[o, z, z], [z, o, z], [z, z, o]])
    }

    /// Rotation about `+y` by `degrees`.
    pub fn rot_y(degrees: T) -> Self {
        let (s, c) = sin_cos_deg(degrees);
        let (o, z) = (T::one(), T::zero());
        Self([[c, z, s], [z, o, z], [-s, z, c]])
    }

    /// Rotation about `+x` by `degrees`.
    pub fn rot_x(degrees: T) -> Self {
        let (s, c) = sin_cos_deg(degrees);
        let (o, z) = (T::one(), T::zero());
        Self([[o, z, z], [z, c, -s], [z, s, c]])
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[r][k] * rhs.0[k][c]).sum();
            }
        }
        Self(m)
    }

    pub fn transpose(&self) -> Self {
        let a = self.0;
        Self([
            [a[0][0], a[1][0], a[2][0]],
            [a[0][1], a[1][1], a[2][1]],
            [a[0][2], a[1][2], a[2][2]],
        ])
    }

    #[inline]
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let a = &self.0;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + a[0][2] * p[2],
            a[1][0] * p[0] + a[1][1] * p[1] + a[1][2] * p[2],
            a[2][0] * p[0] + a[2][1] * p[1] + a[2][2] * p[2],
        ]
    }
}

/// A camera viewpoint: azimuth about `+y`, elevation about `+x`, both in
/// degrees, plus a translation in normalized volume coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub azimuth: f64,
    pub elevation: f64,
    #[serde(default)]
    pub translation: [f64; 3],
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub const fn identity() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            translation: [0.0; 3],
        }
    }

    pub const fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth,
            elevation,
            translation: [0.0; 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.azimuth.is_finite()
            && self.elevation.is_finite()
            && self.translation.iter().all(|t| t.is_finite())
    }

    /// Rotation taking canonical coordinates into this view: the azimuth
    /// turn is applied first, then the elevation tilt.
    pub fn rotation<T: Real>(&self) -> Mat3<T> {
        Mat3::rot_x(T::lit(self.elevation)).mul(&Mat3::rot_y(T::lit(self.azimuth)))
    }

    pub fn transform<T: Real>(&self) -> RigidTransform<T> {
        RigidTransform {
            rotation: self.rotation(),
            translation: self.translation.map(T::lit),
        }
    }
}

/// `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: [T; 3],
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: [T::zero(); 3],
        }
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = self.rotation.apply(p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let t = rt.apply(self.translation);
        Self {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.apply(other.translation),
        }
    }

    /// Transform taking coordinates in view `from` to coordinates in view `to`.
    pub fn between(from: &RigidPose, to: &RigidPose) -> Self {
        to.transform::<T>().then_after(&from.transform::<T>().inverse())
    }

    /// Inverse-map flow realizing this transform on volume content.
    pub fn flow(&self, dims: Dims) -> FlowField<T> {
        let inv = self.inverse();
        let no_shift = inv.translation.iter().all(|t| *t == T::zero());
        FlowField::from_fn(dims, |p| {
            if no_shift {
                inv.rotation.apply(p)
            } else {
                inv.apply(p)
            }
        })
    }
}

/// Flow realizing `relative_pose` as a rigid motion of the volume content.
pub fn rigid_flow<T: Real>(dims: Dims, relative_pose: &RigidPose) -> FlowField<T> {
    relative_pose.transform::<T>().flow(dims)
}

/// Flow moving a bottleneck encoded in view `from` into view `to`.
pub fn relative_flow<T: Real>(dims: Dims, from: &RigidPose, to: &RigidPose) -> FlowField<T> {
    RigidTransform::<T>::between(from, to).flow(dims)
}

/// Linear resampling of one axis over a slice of output cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StretchSpec {
    pub axis: Axis,
    /// Input coordinate sampled by the first cell of the slice.
    pub a: f64,
    /// Input coordinate sampled by the last cell of the slice.
    pub b: f64,
    /// Inclusive output cell range along `axis`; the full extent when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(usize, usize)>,
}

/// Opposite rotations about `y` above and below a horizontal plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistSpec {
    pub split_y: f64,
    /// Degrees.
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Positive,
    Negative,
}

pub fn stretch_flow<T: Real>(dims: Dims, spec: &StretchSpec) -> Result<FlowField<T>> {
    if !spec.a.is_finite() || !spec.b.is_finite() {
        return Err(invalid!("stretch endpoints must be finite"));
    }
    let len = spec.axis.len(dims);
    let (i0, i1) = spec.range.unwrap_or((0, len - 1));
    if i0 > i1 || i1 >= len {
        return Err(invalid!(
            "stretch range {i0}..={i1} outside {len} cells along {:?}",
            spec.axis
        ));
    }
    let n = i1 - i0 + 1;
    if n == 1 && spec.a != spec.b {
        return Err(invalid!("a single-cell stretch needs a == b"));
    }
    let (a, b) = (T::lit(spec.a), T::lit(spec.b));
    // (a (n-1-j) + b j) / (n-1) keeps the a=-1, b=1 case bit-equal to the grid
    let targets: Vec<T> = (0..n)
        .map(|j| {
            if n == 1 {
                a
            } else {
                let m = T::from_usize_lossy(n - 1);
                (a * T::from_usize_lossy(n - 1 - j) + b * T::from_usize_lossy(j)) / m
            }
        })
        .collect();
    let k = spec.axis.index();
    let mut flow = FlowField::identity(dims);
    for (i, c) in flow.coords_mut().iter_mut().enumerate() {
        let (z, y, x) = dims.unindex(i);
        let cell = spec.axis.cell_of(z, y, x);
        if (i0..=i1).contains(&cell) {
            c[k] = targets[cell - i0];
        }
    }
    Ok(flow)
}

/// Cells whose center `y >= split_y` turn by `-alpha` about `y`, the rest by
/// `+alpha`, each in the inverse-map convention of [`rigid_flow`].
pub fn twist_flow<T: Real>(dims: Dims, spec: &TwistSpec) -> Result<FlowField<T>> {
    if !spec.alpha.is_finite() || !spec.split_y.is_finite() {
        return Err(invalid!("twist parameters must be finite"));
    }
    let upper = Mat3::<T>::rot_y(T::lit(-spec.alpha)).transpose();
    let lower = Mat3::<T>::rot_y(T::lit(spec.alpha)).transpose();
    let split = T::lit(spec.split_y);
    Ok(FlowField::from_fn(dims, |p| {
        if p[1] >= split {
            upper.apply(p)
        } else {
            lower.apply(p)
        }
    }))
}

/// Keeps one half of the volume across the plane through the center normal
/// to `plane_axis` and mirrors it into the other half.
pub fn reflect_merge_flow<T: Real>(dims: Dims, plane_axis: Axis, keep_side: Side) -> Result<FlowField<T>> {
    if plane_axis == Axis::Y {
        return Err(invalid!("reflection plane axis must be x or z"));
    }
    let k = plane_axis.index();
    Ok(FlowField::from_fn(dims, |mut p: [T; 3]| {
        let discard = match keep_side {
            Side::Positive => p[k] < T::zero(),
            Side::Negative => p[k] > T::zero(),
        };
        if discard {
            p[k] = -p[k];
        }
        p
    }))
}

/// Cells with center `y > split_y` come from `top`, the rest from `bottom`.
pub fn merge_volumes<T: Real>(
    top: &FeatureVolume<T>,
    bottom: &FeatureVolume<T>,
    split_y: f64,
) -> Result<FeatureVolume<T>> {
    if !top.same_shape(bottom) {
        return Err(shape_err!(
            "merge of {:?}x{} with {:?}x{}",
            top.dims(),
            top.channels(),
            bottom.dims(),
            bottom.channels()
        ));
    }
    let dims = top.dims();
    let split = T::lit(split_y);
    let mut out = bottom.clone();
    for y in 0..dims.h {
        if cell_coord::<T>(y, dims.h) > split {
            for z in 0..dims.d {
                for x in 0..dims.w {
                    out.cell_mut(z, y, x).copy_from_slice(top.cell(z, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Flow whose single resample approximates resampling by `first`, then by
/// `second`: `second`'s coordinates are looked up trilinearly in `first`.
///
/// Lookups outside `first` extrapolate linearly from the nearest cells, so
/// affine flows compose exactly up to rounding.
pub fn compose_flows<T: Real>(first: &FlowField<T>, second: &FlowField<T>) -> FlowField<T> {
    if first.is_identity() {
        return second.clone();
    }
    let fd = first.dims();
    let coords = second
        .coords()
        .iter()
        .map(|q| lookup_extrapolated(first, q, fd))
        .collect();
    FlowField::from_coords(second.dims(), coords).expect("composed flow shape")
}

fn axis_bracket<T: Real>(c: T, n: usize) -> (usize, T) {
    if n == 1 {
        return (0, T::zero());
    }
    let u = coord_to_index(c, n);
    let max0 = T::from_usize_lossy(n - 2);
    let i0 = u.floor().max(T::zero()).min(max0);
    (i0.to_usize().unwrap_or(0), u - i0)
}

fn lookup_extrapolated<T: Real>(flow: &FlowField<T>, q: &[T; 3], dims: Dims) -> [T; 3] {
    let (x0, fx) = axis_bracket(q[0], dims.w);
    let (y0, fy) = axis_bracket(q[1], dims.h);
    let (z0, fz) = axis_bracket(q[2], dims.d);
    let coords = flow.coords();
    let mut out = [T::zero(); 3];
    let mut first = true;
    for bz in 0..2usize {
        let (z, wz) = if bz == 0 { (z0, T::one() - fz) } else { (z0 + 1, fz) };
        if z >= dims.d {
            continue;
        }
        for by in 0..2usize {
            let (y, wy) = if by == 0 { (y0, T::one() - fy) } else { (y0 + 1, fy) };
            if y >= dims.h {
                continue;
            }
            for bx in 0..2usize {
                let (x, wx) = if bx == 0 { (x0, T::one() - fx) } else { (x0 + 1, fx) };
                if x >= dims.w {
                    continue;
                }
                let w = wz * wy * wx;
                if w == T::zero() {
                    continue;
                }
                let c = coords[dims.index(z, y, x)];
                for k in 0..3 {
                    if first {
                        out[k] = w * c[k];
                    } else {
                        out[k] += w * c[k];
                    }
                }
                first = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::resample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_coord_err(a: &FlowField<f64>, b: &FlowField<f64>) -> f64 {
        a.coords()
            .iter()
            .zip(b.coords())
            .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
            .fold(0.0, f64::max)
    }

    /// Rotating content by +90° about +y moves index (x, y, z) to (z, y, n-1-x).
    fn rotate_indices_90(v: &FeatureVolume<f64>, quarter_turns: i32) -> FeatureVolume<f64> {
        let n = v.dims().w;
        let mut cur = v.clone();
        for _ in 0..quarter_turns.rem_euclid(4) {
            let mut next = FeatureVolume::zeros(v.dims(), v.channels());
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        next.cell_mut(n - 1 - x, y, z).copy_from_slice(cur.cell(z, y, x));
                    }
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn rotations_are_orthonormal() {
        let r: Mat3<f64> = RigidPose::new(37.0, -12.0).rotation();
        let rtr = r.transpose().mul(&r);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rtr.0[i][j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_pose_gives_identity_flow() {
        let dims = Dims::new(3, 4, 5);
        assert!(rigid_flow::<f32>(dims, &RigidPose::identity()).is_identity());
    }

    #[test]
    fn quarter_turns_match_index_permutation() {
        let dims = Dims::cube(4);
        let mut v = FeatureVolume::zeros(dims, 1);
        v.set(3, 2, 1, 0, 1.0);
        for k in 0..4 {
            let flow = rigid_flow(dims, &RigidPose::new(90.0 * k as f64, 0.0));
            let out = resample(&v, &flow).unwrap();
            assert_eq!(out, rotate_indices_90(&v, k), "k = {k}");
        }
    }

    #[test]
    fn inverse_rotation_composes_to_identity() {
        let dims = Dims::cube(5);
        let f1 = rigid_flow::<f64>(dims, &RigidPose::new(33.0, 0.0));
        let f2 = rigid_flow::<f64>(dims, &RigidPose::new(-33.0, 0.0));
        let c = compose_flows(&f1, &f2);
        assert!(max_coord_err(&c, &FlowField::identity(dims)) < 1e-6);
    }

    #[test]
    fn composed_rotations_match_closed_form() {
        let dims = Dims::cube(6);
        let (a, b) = (RigidPose::new(25.0, 10.0), RigidPose::new(-40.0, 5.0));
        let c = compose_flows(&rigid_flow::<f64>(dims, &a), &rigid_flow::<f64>(dims, &b));
        // content moves by a, then by b
        let t = b.transform::<f64>().then_after(&a.transform());
        let expect = t.flow(dims);
        for (i, (p, q)) in c.coords().iter().zip(expect.coords()).enumerate() {
            let (z, y, x) = dims.unindex(i);
            let _ = (z, y, x);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-5, "cell {i}: {p:?} vs {q:?}");
            }
        }
        // azimuth-only chains add angles
        let c = compose_flows(
            &rigid_flow::<f64>(dims, &RigidPose::new(20.0, 0.0)),
            &rigid_flow::<f64>(dims, &RigidPose::new(50.0, 0.0)),
        );
        assert!(max_coord_err(&c, &rigid_flow(dims, &RigidPose::new(70.0, 0.0))) < 1e-5);
    }

    #[test]
    fn compose_with_identity_is_exact() {
        let dims = Dims::cube(4);
        let f = rigid_flow::<f32>(dims, &RigidPose::new(17.0, 8.0));
        assert_eq!(compose_flows(&FlowField::identity(dims), &f), f);
        assert_eq!(compose_flows(&f, &FlowField::identity(dims)), f);
    }

    #[test]
    fn full_extent_stretch_is_identity() {
        let dims = Dims::new(4, 7, 5);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let s = StretchSpec { axis, a: -1.0, b: 1.0, range: None };
            assert!(stretch_flow::<f32>(dims, &s).unwrap().is_identity());
            assert!(stretch_flow::<f64>(dims, &s).unwrap().is_identity());
        }
    }

    #[test]
    fn half_range_stretch_coordinates() {
        let dims = Dims::new(1, 5, 1);
        let s = StretchSpec { axis: Axis::Y, a: -0.5, b: 0.5, range: None };
        let f = stretch_flow::<f64>(dims, &s).unwrap();
        let ys: Vec<f64> = f.coords().iter().map(|c| c[1]).collect();
        assert_eq!(ys, vec![-0.5, -0.25, 0.0, 0.25, 0.5]);
        // two-voxel content at y = -0.5 and y = 0.5 spreads to the full height
        let mut v = FeatureVolume::zeros(dims, 1);
        v.set(0, 1, 0, 0, 1.0);
        v.set(0, 3, 0, 0, 1.0);
        let out = resample(&v, &f).unwrap();
        assert_eq!(out.data(), &[1.0, 0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn degenerate_stretch_replicates_center_plane() {
        let dims = Dims::cube(5);
        let f = stretch_flow::<f64>(dims, &StretchSpec { axis: Axis::Y, a: 0.0, b: 0.0, range: None })
            .unwrap();
        assert!(f.coords().iter().all(|c| c[1] == 0.0));
    }

    #[test]
    fn stretch_slice_passes_other_cells_through() {
        let dims = Dims::cube(5);
        let s = StretchSpec { axis: Axis::X, a: 0.0, b: 1.0, range: Some((2, 4)) };
        let f = stretch_flow::<f64>(dims, &s).unwrap();
        let xs: Vec<f64> = (0..5).map(|x| f.coords()[dims.index(0, 0, x)][0]).collect();
        assert_eq!(xs, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        let s = StretchSpec { axis: Axis::X, a: 0.2, b: 0.7, range: Some((0, 1)) };
        let xs: Vec<f64> = {
            let f = stretch_flow::<f64>(dims, &s).unwrap();
            (0..5).map(|x| f.coords()[dims.index(0, 0, x)][0]).collect()
        };
        assert_eq!(xs, vec![0.2, 0.7, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn stretch_errors() {
        let dims = Dims::cube(4);
        let one = StretchSpec { axis: Axis::Y, a: 0.0, b: 0.5, range: Some((2, 2)) };
        assert!(stretch_flow::<f64>(dims, &one).is_err());
        let ok = StretchSpec { b: 0.0, ..one };
        assert!(stretch_flow::<f64>(dims, &ok).is_ok());
        let out = StretchSpec { axis: Axis::Y, a: 0.0, b: 0.5, range: Some((2, 4)) };
        assert!(stretch_flow::<f64>(dims, &out).is_err());
        let nan = StretchSpec { axis: Axis::Y, a: f64::NAN, b: 0.5, range: None };
        assert!(stretch_flow::<f64>(dims, &nan).is_err());
    }

    #[test]
    fn zero_twist_is_identity() {
        let dims = Dims::cube(5);
        let f = twist_flow::<f32>(dims, &TwistSpec { split_y: 0.3, alpha: 0.0 }).unwrap();
        assert!(f.is_identity());
    }

    #[test]
    fn full_twist_is_a_rigid_turn() {
        let dims = Dims::cube(4);
        let f = twist_flow::<f64>(dims, &TwistSpec { split_y: -1.0, alpha: 90.0 }).unwrap();
        assert_eq!(f, rigid_flow(dims, &RigidPose::new(-90.0, 0.0)));
    }

    #[test]
    fn half_twist_hand_computed() {
        let dims = Dims::cube(3);
        let f = twist_flow::<f64>(dims, &TwistSpec { split_y: 0.0, alpha: 45.0 }).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // upper half content turns by -45°: sample at R_y(45°) p
        // lower half content turns by +45°: sample at R_y(-45°) p
        let cases = [
            ((2, 2, 2), [2.0 * h, 1.0, 0.0]),
            ((0, 2, 2), [0.0, 1.0, -2.0 * h]),
            ((2, 0, 2), [0.0, -1.0, 2.0 * h]),
            ((1, 0, 2), [h, -1.0, h]),
        ];
        for ((z, y, x), expect) in cases {
            let c = f.coords()[dims.index(z, y, x)];
            for k in 0..3 {
                assert!((c[k] - expect[k]).abs() < 1e-12, "({z},{y},{x}): {c:?} vs {expect:?}");
            }
        }
    }

    #[test]
    fn twist_and_rigid_preserve_radius() {
        let dims = Dims::cube(6);
        let flows = [
            twist_flow::<f64>(dims, &TwistSpec { split_y: 0.1, alpha: 33.0 }).unwrap(),
            rigid_flow(dims, &RigidPose::new(71.0, 0.0)),
        ];
        for f in &flows {
            for (i, c) in f.coords().iter().enumerate() {
                let (z, y, x) = dims.unindex(i);
                let p = dims.center::<f64>(z, y, x);
                let r0 = (p[0] * p[0] + p[2] * p[2]).sqrt();
                let r1 = (c[0] * c[0] + c[2] * c[2]).sqrt();
                assert!((r0 - r1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reflect_mirrors_kept_half() {
        let dims = Dims::cube(5);
        let mut v = FeatureVolume::zeros(dims, 1);
        // x = +0.5 is cell 3
        v.set(1, 2, 3, 0, 1.0);
        let f = reflect_merge_flow::<f64>(dims, Axis::X, Side::Positive).unwrap();
        let out = resample(&v, &f).unwrap();
        assert_eq!(out.get(1, 2, 3, 0), 1.0);
        assert_eq!(out.get(1, 2, 1, 0), 1.0);
        assert_eq!(out.data().iter().filter(|&&x| x != 0.0).count(), 2);
    }

    #[test]
    fn reflect_of_symmetric_volume_is_identity() {
        let dims = Dims::cube(4);
        let v = FeatureVolume::from_fn(dims, 2, |z, y, x, c| {
            let xs = x.min(3 - x);
            (z * 7 + y * 3 + xs + c) as f64
        });
        let f = reflect_merge_flow::<f64>(dims, Axis::X, Side::Negative).unwrap();
        assert_eq!(resample(&v, &f).unwrap(), v);
    }

    #[test]
    fn opposite_reflections_land_on_first_kept_side() {
        let dims = Dims::cube(4);
        let keep_pos = reflect_merge_flow::<f64>(dims, Axis::Z, Side::Positive).unwrap();
        let keep_neg = reflect_merge_flow::<f64>(dims, Axis::Z, Side::Negative).unwrap();
        let c = compose_flows(&keep_pos, &keep_neg);
        assert!(c.coords().iter().all(|p| p[2] >= 0.0));
    }

    #[test]
    fn reflect_is_idempotent_on_kept_side() {
        let dims = Dims::cube(5);
        let f = reflect_merge_flow::<f64>(dims, Axis::X, Side::Positive).unwrap();
        assert_eq!(compose_flows(&f, &f), f);
        assert!(reflect_merge_flow::<f64>(dims, Axis::Y, Side::Positive).is_err());
    }

    #[test]
    fn merge_cases() {
        let dims = Dims::cube(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FeatureVolume::from_fn(dims, 2, |_, _, _, _| rng.gen::<f64>());
        let y = x.map(|v| v + 1.0);
        assert_eq!(merge_volumes(&x, &x, 0.0).unwrap(), x);
        assert_eq!(merge_volumes(&x, &y, -1.0 - 1e-9).unwrap(), x);
        let mut hi = FeatureVolume::zeros(dims, 1);
        hi.set(1, 3, 2, 0, 1.0);
        let mut lo = FeatureVolume::zeros(dims, 1);
        lo.set(2, 0, 1, 0, 1.0);
        let m = merge_volumes(&hi, &lo, 0.0).unwrap();
        assert_eq!(m.get(1, 3, 2, 0), 1.0);
        assert_eq!(m.get(2, 0, 1, 0), 1.0);
        assert!(merge_volumes(&x, &FeatureVolume::zeros(dims, 1), 0.0).is_err());
    }

    #[test]
    fn composing_flows_approximates_double_resample() {
        // smooth band-limited content
        let dims = Dims::cube(12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..6.28)).collect();
        let v = FeatureVolume::from_fn(dims, 1, |z, y, x, _| {
            let p = dims.center::<f64>(z, y, x);
            (1.3 * p[0] + phases[0]).sin() * (0.9 * p[1] + phases[1]).cos()
                + 0.5 * (1.1 * p[2] + phases[2]).sin()
        });
        let f1 = rigid_flow::<f64>(dims, &RigidPose::new(30.0, 10.0));
        let f2 = twist_flow::<f64>(dims, &TwistSpec { split_y: 0.2, alpha: 20.0 }).unwrap();
        let twice = resample(&resample(&v, &f1).unwrap(), &f2).unwrap();
        let once = resample(&v, &compose_flows(&f1, &f2)).unwrap();
        // only cells whose whole sampling chain stays inside the volume
        let inside = |c: &[f64; 3]| c.iter().all(|v| v.abs() <= 1.0);
        let chain_inside = |q: &[f64; 3]| {
            if !inside(q) {
                return false;
            }
            let base: Vec<usize> = (0..3)
                .map(|k| coord_to_index(q[k], 12).floor().clamp(0.0, 10.0) as usize)
                .collect();
            (0..8).all(|b| {
                let (x, y, z) = (base[0] + (b & 1), base[1] + (b >> 1 & 1), base[2] + (b >> 2));
                inside(&f1.coords()[dims.index(z, y, x)])
            })
        };
        let mut checked = 0;
        let mut worst = 0.0f64;
        for (i, q) in f2.coords().iter().enumerate() {
            if chain_inside(q) {
                checked += 1;
                worst = worst.max((twice.data()[i] - once.data()[i]).abs());
            }
        }
        assert!(checked > dims.cells() / 4, "only {checked} interior cells");
        assert!(worst < 5e-2, "max difference {worst}");
    }
}
