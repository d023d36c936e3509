//! Feature volumes, flow fields and differentiable trilinear resampling.
//!
//! Coordinates are normalized to `[-1, 1]` per axis with the origin at the
//! volume center, `+x` right, `+y` up and `+z` toward the camera. Cell `i` of
//! an axis with `n` cells sits at `(2i - (n - 1)) / (n - 1)`; a single-cell
//! axis has its center at 0 and a nominal spacing of 2.
//!
//! Storage is row-major: z slowest, then y, then x, then channel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TbnError};
use crate::scalar::Real;

/// Cell counts along z (depth), y (height) and x (width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self { d: n, h: n, w: n }
    }

    pub const fn cells(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_valid(&self) -> bool {
        self.d > 0 && self.h > 0 && self.w > 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    /// Inverse of [`Dims::index`], returning `(z, y, x)`.
    #[inline]
    pub const fn unindex(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (z, y, x)
    }

    /// Normalized `(x, y, z)` coordinate of a cell center.
    #[inline]
    pub fn center<T: Real>(&self, z: usize, y: usize, x: usize) -> [T; 3] {
        [
            cell_coord(x, self.w),
            cell_coord(y, self.h),
            cell_coord(z, self.d),
        ]
    }
}

/// Normalized coordinate of cell `i` along an axis of `n` cells.
#[inline]
pub fn cell_coord<T: Real>(i: usize, n: usize) -> T {
    if n <= 1 {
        return T::zero();
    }
    let m = (n - 1) as f64;
    T::lit((2.0 * i as f64 - m) / m)
}

/// Continuous cell index of a normalized coordinate along an axis of `n`
/// cells, snapped to the nearest integer when within rounding distance of it.
#[inline]
pub fn coord_to_index<T: Real>(c: T, n: usize) -> T {
    let u = if n <= 1 {
        c * T::lit(0.5)
    } else {
        (c + T::one()) * T::lit((n - 1) as f64 * 0.5)
    };
    let r = u.round();
    let tol = T::lit(8.0) * T::epsilon() * T::one().max(u.abs());
    if (u - r).abs() <= tol {
        r
    } else {
        u
    }
}

/// Index-space derivative `du/dc` of [`coord_to_index`].
#[inline]
pub fn index_scale<T: Real>(n: usize) -> T {
    if n <= 1 {
        T::lit(0.5)
    } else {
        T::lit((n - 1) as f64 * 0.5)
    }
}

/// Nearest cell index of a normalized coordinate, if inside the axis.
pub fn nearest_cell<T: Real>(c: T, n: usize) -> Option<usize> {
    let u = coord_to_index(c, n).round();
    if u < T::zero() || u > T::from_usize_lossy(n - 1) {
        None
    } else {
        u.to_usize()
    }
}

/// A `D x H x W` grid holding a `C`-dimensional feature vector per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume<T> {
    dims: Dims,
    channels: usize,
    data: Vec<T>,
}

/// Scalar occupancy per cell; a [`FeatureVolume`] with one channel.
pub type OccupancyVolume<T> = FeatureVolume<T>;

impl<T: Real> FeatureVolume<T> {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        assert!(dims.is_valid() && channels > 0, "empty volume");
        Self {
            dims,
            channels,
            data: vec![T::zero(); dims.cells() * channels],
        }
    }

    pub fn from_data(dims: Dims, channels: usize, data: Vec<T>) -> Result<Self> {
        if !dims.is_valid() || channels == 0 {
            return Err(shape_err!("volume dims {dims:?} x {channels} must be positive"));
        }
        if data.len() != dims.cells() * channels {
            return Err(shape_err!(
                "volume data length {} != {} cells x {} channels",
                data.len(),
                dims.cells(),
                channels
            ));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    pub fn from_fn(dims: Dims, channels: usize, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut v = Self::zeros(dims, channels);
        for i in 0..dims.cells() {
            let (z, y, x) = dims.unindex(i);
            for c in 0..channels {
                v.data[i * channels + c] = f(z, y, x, c);
            }
        }
        v
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Feature vector of a cell.
    pub fn cell(&self, z: usize, y: usize, x: usize) -> &[T] {
        let i = self.dims.index(z, y, x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn cell_mut(&mut self, z: usize, y: usize, x: usize) -> &mut [T] {
        let i = self.dims.index(z, y, x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn get(&self, z: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.dims.index(z, y, x) * self.channels + c]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.dims.index(z, y, x) * self.channels + c;
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureVolume<U> {
        FeatureVolume {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Element-wise inner product with a same-shaped volume.
    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }
}

/// Per output cell, the normalized input coordinate `(x, y, z)` to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    dims: Dims,
    coords: Vec<[T; 3]>,
}

impl<T: Real> FlowField<T> {
    pub fn from_coords(dims: Dims, coords: Vec<[T; 3]>) -> Result<Self> {
        if !dims.is_valid() || coords.len() != dims.cells() {
            return Err(shape_err!(
                "flow with {} coordinates does not fill {dims:?}",
                coords.len()
            ));
        }
        Ok(Self { dims, coords })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([T; 3]) -> [T; 3]) -> Self {
        assert!(dims.is_valid(), "empty flow");
        let coords = (0..dims.cells())
            .map(|i| {
                let (z, y, x) = dims.unindex(i);
                f(dims.center(z, y, x))
            })
            .collect();
        Self { dims, coords }
    }

    /// Every cell samples its own center.
    pub fn identity(dims: Dims) -> Self {
        Self::from_fn(dims, |p| p)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn coords(&self) -> &[[T; 3]] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.coords
    }

    pub fn is_identity(&self) -> bool {
        self.coords.iter().enumerate().all(|(i, c)| {
            let (z, y, x) = self.dims.unindex(i);
            *c == self.dims.center::<T>(z, y, x)
        })
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            dims: self.dims,
            coords: self
                .coords
                .iter()
                .map(|c| c.map(|v| U::lit(v.to_f64_lossy())))
                .collect(),
        }
    }

    /// Packs the coordinates as a 3-channel volume (x, y, z order).
    pub fn to_volume(&self) -> FeatureVolume<T> {
        let data = self.coords.iter().flat_map(|c| c.iter().copied()).collect();
        FeatureVolume::from_data(self.dims, 3, data).expect("flow volume shape")
    }

    pub fn from_volume(v: &FeatureVolume<T>) -> Result<Self> {
        if v.channels() != 3 {
            return Err(shape_err!("flow volume needs 3 channels, got {}", v.channels()));
        }
        let coords = v
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Self::from_coords(v.dims(), coords)
    }
}

/// Base index and fractional offset of a coordinate along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSample<T> {
    pub i0: isize,
    pub frac: T,
}

impl<T: Real> AxisSample<T> {
    #[inline]
    pub fn new(c: T, n: usize) -> Self {
        let u = coord_to_index(c, n);
        let f = u.floor();
        Self {
            i0: f.to_isize().unwrap_or(isize::MIN / 4),
            frac: u - f,
        }
    }

    /// Index and weight of the lower (`bit = 0`) or upper corner.
    #[inline]
    pub fn corner(&self, bit: usize, n: usize) -> Option<(usize, T)> {
        let i = self.i0 + bit as isize;
        if i < 0 || i >= n as isize {
            return None;
        }
        let w = if bit == 0 { T::one() - self.frac } else { self.frac };
        Some((i as usize, w))
    }

    /// Derivative of the corner weight with respect to the fractional offset.
    #[inline]
    pub fn dweight(bit: usize) -> T {
        if bit == 0 {
            -T::one()
        } else {
            T::one()
        }
    }
}

const PAR_THRESHOLD: usize = 32 * 32 * 32;

fn check_finite_flow<T: Real>(flow: &FlowField<T>) -> Result<()> {
    if let Some(i) = flow.coords.iter().position(|c| !c.iter().all(|v| v.is_finite())) {
        let (z, y, x) = flow.dims.unindex(i);
        return Err(TbnError::NonFinite(format!(
            "flow coordinate at cell (z={z}, y={y}, x={x})"
        )));
    }
    Ok(())
}

fn sample_cell<T: Real>(volume: &FeatureVolume<T>, coord: &[T; 3], out: &mut [T]) {
    let dims = volume.dims;
    let c = volume.channels;
    let sx = AxisSample::new(coord[0], dims.w);
    let sy = AxisSample::new(coord[1], dims.h);
    let sz = AxisSample::new(coord[2], dims.d);
    let mut first = true;
    for bz in 0..2 {
        let Some((z, wz)) = sz.corner(bz, dims.d) else { continue };
        for by in 0..2 {
            let Some((y, wy)) = sy.corner(by, dims.h) else { continue };
            for bx in 0..2 {
                let Some((x, wx)) = sx.corner(bx, dims.w) else { continue };
                let w = wz * wy * wx;
                if w == T::zero() {
                    continue;
                }
                let src = volume.cell(z, y, x);
                if first {
                    for (o, &v) in out.iter_mut().zip(src) {
                        *o = w * v;
                    }
                    first = false;
                } else {
                    for (o, &v) in out.iter_mut().zip(src) {
                        *o += w * v;
                    }
                }
            }
        }
    }
    if first {
        out[..c].fill(T::zero());
    }
}

/// Trilinearly resamples `volume` at every coordinate of `flow`.
///
/// Coordinates outside the volume see zero-valued neighbors.
pub fn resample<T: Real>(volume: &FeatureVolume<T>, flow: &FlowField<T>) -> Result<FeatureVolume<T>> {
    check_finite_flow(flow)?;
    let c = volume.channels;
    let mut out = FeatureVolume::zeros(flow.dims, c);
    if flow.dims.cells() >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(c)
            .zip(flow.coords.par_iter())
            .for_each(|(o, p)| sample_cell(volume, p, o));
    } else {
        for (o, p) in out.data.chunks_mut(c).zip(&flow.coords) {
            sample_cell(volume, p, o);
        }
    }
    Ok(out)
}

/// Gradients of [`resample`] with respect to its volume and flow inputs.
pub struct ResampleGrads<T> {
    pub volume: FeatureVolume<T>,
    /// `d loss / d coordinate` per output cell, `(x, y, z)` order.
    pub flow: Vec<[T; 3]>,
}

/// Reverse pass of [`resample`] given the gradient of its output.
///
/// At coordinates exactly on a cell boundary the flow gradient is the
/// one-sided derivative of the cell whose lower corner is that boundary.
pub fn resample_backward<T: Real>(
    volume: &FeatureVolume<T>,
    flow: &FlowField<T>,
    output_grad: &FeatureVolume<T>,
) -> Result<ResampleGrads<T>> {
    if output_grad.dims != flow.dims || output_grad.channels != volume.channels {
        return Err(shape_err!(
            "output gradient {:?}x{} does not match flow {:?} x volume channels {}",
            output_grad.dims,
            output_grad.channels,
            flow.dims,
            volume.channels
        ));
    }
    check_finite_flow(flow)?;
    let dims = volume.dims;
    let c = volume.channels;
    let mut vgrad = FeatureVolume::zeros(dims, c);
    let mut fgrad = vec![[T::zero(); 3]; flow.dims.cells()];
    let scale = [
        index_scale::<T>(dims.w),
        index_scale::<T>(dims.h),
        index_scale::<T>(dims.d),
    ];
    for (p, coord) in flow.coords.iter().enumerate() {
        let g = &output_grad.data[p * c..(p + 1) * c];
        let sx = AxisSample::new(coord[0], dims.w);
        let sy = AxisSample::new(coord[1], dims.h);
        let sz = AxisSample::new(coord[2], dims.d);
        let mut d = [T::zero(); 3];
        for bz in 0..2 {
            let Some((z, wz)) = sz.corner(bz, dims.d) else { continue };
            for by in 0..2 {
                let Some((y, wy)) = sy.corner(by, dims.h) else { continue };
                for bx in 0..2 {
                    let Some((x, wx)) = sx.corner(bx, dims.w) else { continue };
                    let w = wz * wy * wx;
                    let base = dims.index(z, y, x) * c;
                    let mut gv = T::zero();
                    for ch in 0..c {
                        vgrad.data[base + ch] += w * g[ch];
                        gv += g[ch] * volume.data[base + ch];
                    }
                    d[0] += AxisSample::<T>::dweight(bx) * wy * wz * gv;
                    d[1] += AxisSample::<T>::dweight(by) * wx * wz * gv;
                    d[2] += AxisSample::<T>::dweight(bz) * wx * wy * gv;
                }
            }
        }
        fgrad[p] = [d[0] * scale[0], d[1] * scale[1], d[2] * scale[2]];
    }
    Ok(ResampleGrads {
        volume: vgrad,
        flow: fgrad,
    })
}

/// Cell-wise mean of equally shaped volumes.
pub fn aggregate<T: Real>(volumes: &[FeatureVolume<T>]) -> Result<FeatureVolume<T>> {
    let first = volumes
        .first()
        .ok_or_else(|| TbnError::InvalidArgument("aggregate needs at least one volume".into()))?;
    let mut sum = first.clone();
    for v in &volumes[1..] {
        if !v.same_shape(first) {
            return Err(shape_err!(
                "cannot aggregate {:?}x{} with {:?}x{}",
                v.dims,
                v.channels,
                first.dims,
                first.channels
            ));
        }
        for (s, &x) in sum.data.iter_mut().zip(&v.data) {
            *s += x;
        }
    }
    if volumes.len() > 1 {
        let inv = T::one() / T::from_usize_lossy(volumes.len());
        sum.data.iter_mut().for_each(|s| *s *= inv);
    }
    Ok(sum)
}

/// Euclidean norm of each cell's feature vector.
pub fn cellwise_norm<T: Real>(volume: &FeatureVolume<T>) -> FeatureVolume<T> {
    let data = volume
        .data
        .chunks_exact(volume.channels)
        .map(|f| f.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    FeatureVolume {
        dims: volume.dims,
        channels: 1,
        data,
    }
}
