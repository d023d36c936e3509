//! Channel-first image planes.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Result, TbnError};
use crate::scalar::Real;

/// `channels x height x width` image, row 0 at the top. RGB images have 3
/// channels, decoder outputs 4 (RGB plus mask), masks 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImagePlane<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(shape_err!("empty image {channels}x{height}x{width}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// A new image holding channels `range`.
    pub fn select(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.channels {
            return Err(shape_err!(
                "channel range {range:?} outside {} channels",
                self.channels
            ));
        }
        let n = self.plane_len();
        Self::new(
            self.height,
            self.width,
            range.len(),
            self.data[range.start * n..range.end * n].to_vec(),
        )
    }

    /// First three channels.
    pub fn rgb(&self) -> Result<Self> {
        self.select(0..3)
    }

    /// Channel 3 of a decoder output, or the only channel of a mask.
    pub fn mask(&self) -> Result<Self> {
        match self.channels {
            1 => Ok(self.clone()),
            4 => self.select(3..4),
            c => Err(shape_err!("no mask channel in a {c}-channel image")),
        }
    }

    /// Stacks the channels of `self` then `other`.
    pub fn stack(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err!(
                "cannot stack {}x{} with {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.height, self.width, self.channels + other.channels, data)
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape.as_slice() {
            &[c, h, w] => Self::new(h, w, c, t.data.clone()),
            s => Err(shape_err!("tensor {s:?} is not [C, H, W]")),
        }
    }

    pub fn cast<U: Real>(&self) -> ImagePlane<U> {
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Blends the RGB of a 4-channel image over `background` using its mask.
    pub fn composite_over(&self, background: &Self) -> Result<Self> {
        if self.channels != 4 || background.channels < 3 || !self.same_size(background) {
            return Err(TbnError::Shape(format!(
                "composite needs a 4-channel image over a same-size RGB background, got {}x{}x{} over {}x{}x{}",
                self.channels, self.height, self.width, background.channels, background.height, background.width
            )));
        }
        let n = self.plane_len();
        let alpha = self.channel(3);
        let mut data = Vec::with_capacity(3 * n);
        for c in 0..3 {
            let fg = self.channel(c);
            let bg = background.channel(c);
            data.extend((0..n).map(|i| alpha[i] * fg[i] + (T::one() - alpha[i]) * bg[i]));
        }
        Self::new(self.height, self.width, 3, data)
    }

    /// Interleaved 8-bit samples of the first `k` channels, row-major.
    pub fn to_bytes(&self, k: usize) -> Vec<u8> {
        let n = self.plane_len();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            for c in 0..k.min(self.channels) {
                let v = self.data[c * n + i].to_f64_lossy().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    /// Inverse of [`ImagePlane::to_bytes`].
    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let n = height * width;
        if bytes.len() != n * channels {
            return Err(shape_err!(
                "{} bytes for a {channels}x{height}x{width} image",
                bytes.len()
            ));
        }
        let mut data = vec![T::zero(); n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = T::lit(f64::from(bytes[i * channels + c]) / 255.0);
            }
        }
        Self::new(height, width, channels, data)
    }
}
