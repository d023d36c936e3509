//! Training objectives.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{invalid, shape_err, Result, TbnError};
use crate::image::ImagePlane;
use crate::net::TbnModel;
use crate::scalar::Real;
use crate::volume::{FeatureVolume, FlowField};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const BCE_EPS: f64 = 1e-6;

/// Weights of the total objective. The perceptual and adversarial terms are
/// not implemented, their weights are carried for completeness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub ssim: f64,
    pub adversarial: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 5.0,
            ssim: 10.0,
            adversarial: 0.05,
            mask: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.ssim, self.adversarial, self.mask];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(invalid!("loss weights must be finite and non-negative: {self:?}"))
        }
    }

    /// Only the reconstruction term.
    pub fn reconstruction_only() -> Self {
        Self {
            perceptual: 0.0,
            ssim: 0.0,
            adversarial: 0.0,
            mask: 0.0,
        }
    }
}

/// Loss components of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(rename = "L_R")]
    pub reconstruction: f64,
    #[serde(rename = "L_S")]
    pub ssim: f64,
    #[serde(rename = "L_M")]
    pub mask: f64,
}

/// `L_R + λ1·L_P + λ2·L_S + λ3·L_A + λ4·L_M` with `L_P = L_A = 0`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    let vals = [parts.reconstruction, parts.ssim, parts.mask];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(TbnError::NonFinite(format!("loss parts {parts:?}")));
    }
    let (perceptual, adversarial) = (0.0, 0.0);
    Ok(parts.reconstruction
        + weights.perceptual * perceptual
        + weights.ssim * parts.ssim
        + weights.adversarial * adversarial
        + weights.mask * parts.mask)
}

fn color_channels<T: Real>(pred: &ImagePlane<T>, target: &ImagePlane<T>) -> Result<usize> {
    if !pred.same_size(target) {
        return Err(shape_err!(
            "image sizes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width()
        ));
    }
    Ok(pred.channels().min(target.channels()).min(3))
}

fn leading<T: Real>(im: &ImagePlane<T>, k: usize) -> &[T] {
    &im.data()[..k * im.plane_len()]
}

/// Mean absolute difference over the color channels.
pub fn l1_loss<T: Real>(pred: &ImagePlane<T>, target: &ImagePlane<T>) -> Result<T> {
    let k = color_channels(pred, target)?;
    Ok(kernels::l1(leading(pred, k), leading(target, k)))
}

/// `1 - mean SSIM` over the color channels, 7x7 uniform windows.
pub fn ssim_loss<T: Real>(pred: &ImagePlane<T>, target: &ImagePlane<T>) -> Result<T> {
    let k = color_channels(pred, target)?;
    let (h, w) = (pred.height(), pred.width());
    Ok(kernels::ssim(leading(pred, k), leading(target, k), k, h, w, false).0)
}

/// Pixel-summed binary cross entropy of single-channel masks.
pub fn bce_loss<T: Real>(pred: &ImagePlane<T>, target: &ImagePlane<T>) -> Result<T> {
    if !pred.same_size(target) || pred.channels() != 1 || target.channels() != 1 {
        return Err(shape_err!("bce needs two same-size single-channel masks"));
    }
    Ok(kernels::bce_sum(pred.data(), target.data()))
}

/// Segmentation loss of an aggregated target-view bottleneck: the decoded
/// mask of its occupancy against `target_mask`, plus for each input view the
/// mask of the occupancy moved by `view_flows[k]` against `view_masks[k]`.
pub fn mask_loss<T: Real>(
    model: &TbnModel<T>,
    aggregated_volume: &FeatureVolume<T>,
    view_flows: &[FlowField<T>],
    view_masks: &[ImagePlane<T>],
    target_mask: &ImagePlane<T>,
) -> Result<T> {
    if view_flows.len() != view_masks.len() {
        return Err(invalid!(
            "{} flows for {} masks",
            view_flows.len(),
            view_masks.len()
        ));
    }
    model.check_volume(aggregated_volume)?;
    let s = model.arch().image_size;
    for m in view_masks.iter().chain(std::iter::once(target_mask)) {
        if m.height() != s || m.width() != s || m.channels() != 1 {
            return Err(shape_err!("masks must be 1x{s}x{s}"));
        }
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let vol = tape.constant(volume_tensor(aggregated_volume));
    let occ = p.decode_occupancy(&mut tape, vol);
    let flows: Vec<Arc<FlowField<T>>> = view_flows.iter().cloned().map(Arc::new).collect();
    let masks: Vec<Arc<Tensor<T>>> = view_masks.iter().map(|m| Arc::new(m.to_tensor())).collect();
    let loss = p.mask_loss(&mut tape, occ, &flows, &masks, Arc::new(target_mask.to_tensor()));
    Ok(tape.scalar(loss))
}

pub(crate) fn volume_tensor<T: Real>(v: &FeatureVolume<T>) -> Tensor<T> {
    let d = v.dims();
    Tensor::new(vec![d.d, d.h, d.w, v.channels()], v.data().to_vec())
}

/// Slice-level loss kernels shared by the image API and the tape.
pub(crate) mod kernels {
    use super::{BCE_EPS, SSIM_C1, SSIM_C2, SSIM_WINDOW};
    use crate::scalar::Real;

    pub fn l1<T: Real>(p: &[T], t: &[T]) -> T {
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum();
        s / T::from_usize_lossy(p.len())
    }

    pub fn l1_grad<T: Real>(p: &[T], t: &[T]) -> Vec<T> {
        let inv = T::one() / T::from_usize_lossy(p.len());
        p.iter()
            .zip(t)
            .map(|(&a, &b)| {
                if a > b {
                    inv
                } else if a < b {
                    -inv
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    fn clamp_prob<T: Real>(p: T) -> (T, bool) {
        let lo = T::lit(BCE_EPS);
        let hi = T::one() - lo;
        if p < lo {
            (lo, true)
        } else if p > hi {
            (hi, true)
        } else {
            (p, false)
        }
    }

    pub fn bce_sum<T: Real>(p: &[T], t: &[T]) -> T {
        p.iter()
            .zip(t)
            .map(|(&a, &y)| {
                let (q, _) = clamp_prob(a);
                -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum()
    }

    /// Zero where the prediction was clamped.
    pub fn bce_sum_grad<T: Real>(p: &[T], t: &[T]) -> Vec<T> {
        p.iter()
            .zip(t)
            .map(|(&a, &y)| {
                let (q, clamped) = clamp_prob(a);
                if clamped {
                    T::zero()
                } else {
                    (q - y) / (q * (T::one() - q))
                }
            })
            .collect()
    }

    /// `1 - mean SSIM` over `c` channels of `h x w` planes, with the
    /// gradient with respect to `p` when requested.
    pub fn ssim<T: Real>(p: &[T], t: &[T], c: usize, h: usize, w: usize, want_grad: bool) -> (T, Option<Vec<T>>) {
        let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
        let (ny, nx) = (h - wh + 1, w - ww + 1);
        let inv_n = T::one() / T::from_usize_lossy(wh * ww);
        let c1 = T::lit(SSIM_C1);
        let c2 = T::lit(SSIM_C2);
        let n_windows = T::from_usize_lossy(c * ny * nx);
        let mut total = T::zero();
        let mut grad = want_grad.then(|| vec![T::zero(); p.len()]);
        // per-window coefficients of dS/dp_i = a + b·p_i + g·t_i
        let mut coef = vec![[T::zero(); 3]; ny * nx];
        for ch in 0..c {
            let pp = &p[ch * h * w..(ch + 1) * h * w];
            let tt = &t[ch * h * w..(ch + 1) * h * w];
            for wy in 0..ny {
                for wx in 0..nx {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) =
                        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
                    for y in wy..wy + wh {
                        for x in wx..wx + ww {
                            let (a, b) = (pp[y * w + x], tt[y * w + x]);
                            sx += a;
                            sy += b;
                            sxx += a * a;
                            syy += b * b;
                            sxy += a * b;
                        }
                    }
                    let (mx, my) = (sx * inv_n, sy * inv_n);
                    let vx = sxx * inv_n - mx * mx;
                    let vy = syy * inv_n - my * my;
                    let cxy = sxy * inv_n - mx * my;
                    let two = T::lit(2.0);
                    let a1 = two * mx * my + c1;
                    let a2 = two * cxy + c2;
                    let b1 = mx * mx + my * my + c1;
                    let b2 = vx + vy + c2;
                    let s = (a1 * a2) / (b1 * b2);
                    total += s;
                    if want_grad {
                        let d_mx = s * (two * my / a1 - two * my / a2 - two * mx / b1 + two * mx / b2);
                        let d_exx = -s / b2;
                        let d_exy = two * s / a2;
                        coef[wy * nx + wx] = [d_mx * inv_n, two * d_exx * inv_n, d_exy * inv_n];
                    }
                }
            }
            if let Some(g) = grad.as_mut() {
                let gg = &mut g[ch * h * w..(ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (y_lo, y_hi) = (y.saturating_sub(wh - 1), y.min(ny - 1));
                        let (x_lo, x_hi) = (x.saturating_sub(ww - 1), x.min(nx - 1));
                        let mut acc = [T::zero(); 3];
                        for wy in y_lo..=y_hi {
                            for wx in x_lo..=x_hi {
                                let k = coef[wy * nx + wx];
                                acc[0] += k[0];
                                acc[1] += k[1];
                                acc[2] += k[2];
                            }
                        }
                        let i = y * w + x;
                        gg[i] = -(acc[0] + acc[1] * pp[i] + acc[2] * tt[i]) / n_windows;
                    }
                }
            }
        }
        (T::one() - total / n_windows, grad)
    }
}
