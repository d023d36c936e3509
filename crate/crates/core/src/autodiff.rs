//! A small reverse-mode differentiation tape.
//!
//! Only the operations the bottleneck network needs are provided. 2D feature
//! maps are laid out `[C, H, W]`; volumes use the channel-last `[D, H, W, C]`
//! layout of [`FeatureVolume`].
//!
//! Each recorded node keeps its forward value; `backward` walks the nodes in
//! reverse and accumulates gradients only into nodes that depend on a
//! parameter or variable leaf.

use std::ops::Range;
use std::sync::Arc;

use crate::losses::kernels;
use crate::scalar::Real;
use crate::volume::{resample, resample_backward, Dims, FeatureVolume, FlowField};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// `[C, H, W]`, statistics over `H x W`.
    ChannelFirst,
    /// `[D, H, W, C]`, statistics over the cells.
    ChannelLast,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    MapToVolume {
        x: Var,
    },
    VolumeToMap {
        x: Var,
    },
    Resample {
        x: Var,
        flow: Arc<FlowField<T>>,
    },
    Mean {
        xs: Vec<Var>,
    },
    SoftmaxDepth {
        x: Var,
    },
    DepthConv {
        x: Var,
        w: Var,
        b: Var,
    },
    Bilinear {
        x: Var,
    },
    L1 {
        x: Var,
        target: Arc<Tensor<T>>,
        channels: Range<usize>,
    },
    Ssim {
        x: Var,
        target: Arc<Tensor<T>>,
        channels: Range<usize>,
    },
    BceSum {
        x: Var,
        target: Arc<Tensor<T>>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    Dot {
        x: Var,
        weights: Arc<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros shaped like `v` when it did not participate.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (parameters, or inputs under test).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `x: [Ci, H, W]`, `w: [Co, Ci, K, K]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, K, K]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let g = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], stride, pad);
        let mut out = vec![T::zero(); g.co * g.ho * g.wo];
        conv2d_forward(
            &g,
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            &mut out,
        );
        let ng = self.ng(&[x, w, b]);
        self.push(
            Tensor::new(vec![g.co, g.ho, g.wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Same-size 3x3x3 convolution on `x: [D, H, W, Ci]` with
    /// `w: [3, 3, 3, Ci, Co]`, `b: [Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv3d input must be [D, H, W, C]");
        assert_eq!(&ws[..3], &[3, 3, 3], "conv3d kernel must be 3x3x3");
        assert_eq!(xs[3], ws[3], "conv3d channel mismatch");
        let dims = Dims::new(xs[0], xs[1], xs[2]);
        let (ci, co) = (ws[3], ws[4]);
        let mut out = vec![T::zero(); dims.cells() * co];
        conv3d_forward(
            dims,
            ci,
            co,
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            &mut out,
        );
        let ng = self.ng(&[x, w, b]);
        self.push(
            Tensor::new(vec![dims.d, dims.h, dims.w, co], out),
            Op::Conv3d { x, w, b },
            ng,
        )
    }

    /// Per-sample, per-channel normalization followed by a learned affine.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, layout: NormLayout) -> Var {
        let xv = self.value(x);
        let (c, m) = norm_extent(&xv.shape, layout);
        let eps = T::lit(1e-5);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); xv.len()];
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let inv_m = T::one() / T::from_usize_lossy(m);
        for ch in 0..c {
            let idx = |k: usize| norm_index(layout, c, m, ch, k);
            let mean = (0..m).map(|k| xv.data[idx(k)]).sum::<T>() * inv_m;
            let var = (0..m)
                .map(|k| {
                    let d = xv.data[idx(k)] - mean;
                    d * d
                })
                .sum::<T>()
                * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for k in 0..m {
                let i = idx(k);
                let h = (xv.data[i] - mean) * is;
                xhat[i] = h;
                out[i] = gv[ch] * h + bv[ch];
            }
        }
        let shape = xv.shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x);
        let data = v
            .data
            .iter()
            .map(|&a| if a > T::zero() { a } else { a * slope })
            .collect();
        let shape = v.shape.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::LeakyRelu { x, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let shape = v.shape.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::Sigmoid { x }, ng)
    }

    /// Nearest-neighbor 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = v.data[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![c, 2 * h, 2 * w], out),
            Op::Upsample2x { x },
            ng,
        )
    }

    /// `[C·D, H, W]` feature map to a `[D, H, W, C]` volume. Map rows run
    /// top to bottom, so row `r` becomes volume row `H - 1 - r`.
    pub fn map_to_volume(&mut self, x: Var, depth: usize) -> Var {
        let v = self.value(x);
        let (cd, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        assert_eq!(cd % depth, 0, "map channels not divisible by depth");
        let c = cd / depth;
        let mut out = vec![T::zero(); cd * h * w];
        for (src, dst) in map_volume_pairs(c, depth, h, w) {
            out[dst] = v.data[src];
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![depth, h, w, c], out),
            Op::MapToVolume { x },
            ng,
        )
    }

    /// Inverse of [`Tape::map_to_volume`].
    pub fn volume_to_map(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (d, h, w, c) = (v.shape[0], v.shape[1], v.shape[2], v.shape[3]);
        let mut out = vec![T::zero(); v.len()];
        for (src, dst) in map_volume_pairs(c, d, h, w) {
            out[src] = v.data[dst];
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![c * d, h, w], out),
            Op::VolumeToMap { x },
            ng,
        )
    }

    pub fn resample(&mut self, x: Var, flow: Arc<FlowField<T>>) -> Var {
        let vol = self.volume(x);
        let out = resample(&vol, &flow).expect("flow coordinates are finite");
        let fd = flow.dims();
        let c = vol.channels();
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![fd.d, fd.h, fd.w, c], out.into_data()),
            Op::Resample { x, flow },
            ng,
        )
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean of nothing");
        let first = self.value(xs[0]);
        let shape = first.shape.clone();
        let mut acc = first.data.clone();
        for v in &xs[1..] {
            let t = self.value(*v);
            assert_eq!(t.shape, shape, "mean of differently shaped tensors");
            acc.iter_mut().zip(&t.data).for_each(|(a, &b)| *a += b);
        }
        if xs.len() > 1 {
            let inv = T::one() / T::from_usize_lossy(xs.len());
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let ng = self.ng(xs);
        self.push(Tensor::new(shape, acc), Op::Mean { xs: xs.to_vec() }, ng)
    }

    /// Softmax along depth of a single-channel `[D, H, W, 1]` volume.
    pub fn softmax_depth(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (d, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        assert_eq!(v.shape[3], 1, "softmax_depth needs one channel");
        let mut out = vec![T::zero(); v.len()];
        let plane = h * w;
        for col in 0..plane {
            let mx = (0..d)
                .map(|z| v.data[z * plane + col])
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for z in 0..d {
                let e = (v.data[z * plane + col] - mx).exp();
                out[z * plane + col] = e;
                s += e;
            }
            for z in 0..d {
                out[z * plane + col] /= s;
            }
        }
        let shape = v.shape.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, out), Op::SoftmaxDepth { x }, ng)
    }

    /// Full-depth 1D convolution along z of `[D, H, W, 1]` with `w: [D]`,
    /// `b: [1]`, giving a `[1, H, W]` map whose row `r` is volume row
    /// `H - 1 - r`.
    pub fn depth_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = self.value(x);
        let (d, h, wd) = (v.shape[0], v.shape[1], v.shape[2]);
        let (wv, bv) = (&self.value(w).data, self.value(b).data[0]);
        assert_eq!(wv.len(), d, "depth kernel length must equal depth");
        let plane = h * wd;
        let mut out = vec![bv; plane];
        for y in 0..h {
            let r = h - 1 - y;
            for xx in 0..wd {
                let mut s = bv;
                for z in 0..d {
                    s += wv[z] * v.data[z * plane + y * wd + xx];
                }
                out[r * wd + xx] = s;
            }
        }
        let ng = self.ng(&[x, w, b]);
        self.push(
            Tensor::new(vec![1, h, wd], out),
            Op::DepthConv { x, w, b },
            ng,
        )
    }

    /// Bilinear resize of `[C, h, w]` to `[C, out_h, out_w]` using
    /// pixel-center alignment and edge clamping.
    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let v = self.value(x);
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        let rows = bilinear_taps::<T>(h, out_h);
        let cols = bilinear_taps::<T>(w, out_w);
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let src = &v.data[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out[(ch * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![c, out_h, out_w], out),
            Op::Bilinear { x },
            ng,
        )
    }

    /// Mean absolute difference over `channels` of `[C, H, W]` inputs.
    pub fn l1(&mut self, x: Var, target: Arc<Tensor<T>>, channels: Range<usize>) -> Var {
        let v = self.value(x);
        let (p, t) = channel_span(&v.shape, &channels, &v.data, &target.data);
        let loss = kernels::l1(p, t);
        let ng = self.ng(&[x]);
        self.push(
            Tensor::scalar(loss),
            Op::L1 {
                x,
                target,
                channels,
            },
            ng,
        )
    }

    /// One minus mean SSIM over `channels` of `[C, H, W]` inputs.
    pub fn ssim(&mut self, x: Var, target: Arc<Tensor<T>>, channels: Range<usize>) -> Var {
        let v = self.value(x);
        let (h, w) = (v.shape[1], v.shape[2]);
        let (p, t) = channel_span(&v.shape, &channels, &v.data, &target.data);
        let (loss, _) = kernels::ssim(p, t, channels.len(), h, w, false);
        let ng = self.ng(&[x]);
        self.push(
            Tensor::scalar(loss),
            Op::Ssim {
                x,
                target,
                channels,
            },
            ng,
        )
    }

    /// Binary cross entropy summed over pixels.
    pub fn bce_sum(&mut self, x: Var, target: Arc<Tensor<T>>) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), target.len(), "bce size mismatch");
        let loss = kernels::bce_sum(&v.data, &target.data);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(loss), Op::BceSum { x, target }, ng)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let s = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            ng,
        )
    }

    /// `Σ x ⊙ weights`, a scalar probe for gradient checks.
    pub fn dot(&mut self, x: Var, weights: Arc<Vec<T>>) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), weights.len(), "dot size mismatch");
        let s = v.data.iter().zip(weights.iter()).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Dot { x, weights }, ng)
    }

    /// Copies a `[D, H, W, C]` node out as a [`FeatureVolume`].
    pub fn volume(&self, x: Var) -> FeatureVolume<T> {
        let v = self.value(x);
        assert_eq!(v.shape.len(), 4, "node is not a volume");
        FeatureVolume::from_data(
            Dims::new(v.shape[0], v.shape[1], v.shape[2]),
            v.shape[3],
            v.data.clone(),
        )
        .expect("volume node shape")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], *stride, *pad);
                let (gx, gw, gb) = conv2d_backward(
                    &geom,
                    &self.value(*x).data,
                    &self.value(*w).data,
                    g,
                    self.wants(*x),
                );
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
                add_into(&mut grads[w.0], gw);
                add_into(&mut grads[b.0], gb);
            }
            Op::Conv3d { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let dims = Dims::new(xs[0], xs[1], xs[2]);
                let (gx, gw, gb) = conv3d_backward(
                    dims,
                    ws[3],
                    ws[4],
                    &self.value(*x).data,
                    &self.value(*w).data,
                    g,
                    self.wants(*x),
                );
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
                add_into(&mut grads[w.0], gw);
                add_into(&mut grads[b.0], gb);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            } => {
                let (c, m) = norm_extent(self.shape(*x), *layout);
                let gv = &self.value(*gamma).data;
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let fm = T::from_usize_lossy(m);
                for ch in 0..c {
                    let idx = |k: usize| norm_index(*layout, c, m, ch, k);
                    let mut s_dh = T::zero();
                    let mut s_dh_h = T::zero();
                    for k in 0..m {
                        let i = idx(k);
                        gg[ch] += g[i] * xhat[i];
                        gbeta[ch] += g[i];
                        let dh = g[i] * gv[ch];
                        s_dh += dh;
                        s_dh_h += dh * xhat[i];
                    }
                    let scale = inv_std[ch] / fm;
                    for k in 0..m {
                        let i = idx(k);
                        let dh = g[i] * gv[ch];
                        gx[i] = scale * (fm * dh - s_dh - xhat[i] * s_dh_h);
                    }
                }
                add_into(&mut grads[x.0], gx);
                add_into(&mut grads[gamma.0], gg);
                add_into(&mut grads[beta.0], gbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.value(*x).data;
                let gx = xv
                    .iter()
                    .zip(g)
                    .map(|(&a, &d)| if a > T::zero() { d } else { d * *slope })
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::Sigmoid { x } => {
                let gx = node
                    .value
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| d * y * (T::one() - y))
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::Upsample2x { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::MapToVolume { x } => {
                let s = &node.value.shape;
                let mut gx = vec![T::zero(); g.len()];
                for (src, dst) in map_volume_pairs(s[3], s[0], s[1], s[2]) {
                    gx[src] = g[dst];
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::VolumeToMap { x } => {
                let s = self.shape(*x);
                let mut gx = vec![T::zero(); g.len()];
                for (src, dst) in map_volume_pairs(s[3], s[0], s[1], s[2]) {
                    gx[dst] = g[src];
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Resample { x, flow } => {
                let vol = self.volume(*x);
                let fd = flow.dims();
                let og = FeatureVolume::from_data(fd, vol.channels(), g.to_vec())
                    .expect("resample gradient shape");
                let r = resample_backward(&vol, flow, &og).expect("resample backward");
                add_into(&mut grads[x.0], r.volume.into_data());
            }
            Op::Mean { xs } => {
                let inv = T::one() / T::from_usize_lossy(xs.len());
                for v in xs {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g.iter().map(|&d| d * inv).collect());
                    }
                }
            }
            Op::SoftmaxDepth { x } => {
                let s = &node.value.shape;
                let (d, plane) = (s[0], s[1] * s[2]);
                let y = &node.value.data;
                let mut gx = vec![T::zero(); g.len()];
                for col in 0..plane {
                    let dotp: T = (0..d).map(|z| g[z * plane + col] * y[z * plane + col]).sum();
                    for z in 0..d {
                        let i = z * plane + col;
                        gx[i] = y[i] * (g[i] - dotp);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::DepthConv { x, w, b } => {
                let s = self.shape(*x);
                let (d, h, wd) = (s[0], s[1], s[2]);
                let plane = h * wd;
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                let mut gx = vec![T::zero(); xv.len()];
                let mut gw = vec![T::zero(); d];
                let mut gb = T::zero();
                for y in 0..h {
                    let r = h - 1 - y;
                    for xx in 0..wd {
                        let go = g[r * wd + xx];
                        gb += go;
                        for z in 0..d {
                            let i = z * plane + y * wd + xx;
                            gx[i] = wv[z] * go;
                            gw[z] += xv[i] * go;
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
                add_into(&mut grads[w.0], gw);
                add_into(&mut grads[b.0], vec![gb]);
            }
            Op::Bilinear { x } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (node.value.shape[1], node.value.shape[2]);
                let rows = bilinear_taps::<T>(h, oh);
                let cols = bilinear_taps::<T>(w, ow);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                            let go = g[(ch * oh + oy) * ow + ox];
                            let (top, bot) = (go * (T::one() - fy), go * fy);
                            dst[y0 * w + x0] += top * (T::one() - fx);
                            dst[y0 * w + x1] += top * fx;
                            dst[y1 * w + x0] += bot * (T::one() - fx);
                            dst[y1 * w + x1] += bot * fx;
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::L1 {
                x,
                target,
                channels,
            } => {
                let v = self.value(*x);
                let (p, t) = channel_span(&v.shape, channels, &v.data, &target.data);
                let gspan = kernels::l1_grad(p, t);
                add_into(
                    &mut grads[x.0],
                    embed_span(&v.shape, channels, gspan, g[0]),
                );
            }
            Op::Ssim {
                x,
                target,
                channels,
            } => {
                let v = self.value(*x);
                let (h, w) = (v.shape[1], v.shape[2]);
                let (p, t) = channel_span(&v.shape, channels, &v.data, &target.data);
                let (_, gspan) = kernels::ssim(p, t, channels.len(), h, w, true);
                add_into(
                    &mut grads[x.0],
                    embed_span(&v.shape, channels, gspan.expect("ssim gradient"), g[0]),
                );
            }
            Op::BceSum { x, target } => {
                let gx = kernels::bce_sum_grad(&self.value(*x).data, &target.data)
                    .into_iter()
                    .map(|d| d * g[0])
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        add_into(&mut grads[v.0], vec![w * g[0]]);
                    }
                }
            }
            Op::Dot { x, weights } => {
                add_into(
                    &mut grads[x.0],
                    weights.iter().map(|&w| w * g[0]).collect(),
                );
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn norm_extent(shape: &[usize], layout: NormLayout) -> (usize, usize) {
    match layout {
        NormLayout::ChannelFirst => (shape[0], shape[1..].iter().product()),
        NormLayout::ChannelLast => {
            let c = *shape.last().expect("non-empty shape");
            (c, shape[..shape.len() - 1].iter().product())
        }
    }
}

#[inline]
fn norm_index(layout: NormLayout, c: usize, m: usize, ch: usize, k: usize) -> usize {
    match layout {
        NormLayout::ChannelFirst => ch * m + k,
        NormLayout::ChannelLast => k * c + ch,
    }
}

/// `(map index, volume index)` pairs of the map/volume reshape.
fn map_volume_pairs(c: usize, d: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..c).flat_map(move |ch| {
        (0..d).flat_map(move |z| {
            (0..h).flat_map(move |r| {
                (0..w).map(move |x| {
                    let src = ((ch * d + z) * h + r) * w + x;
                    let y = h - 1 - r;
                    let dst = ((z * h + y) * w + x) * c + ch;
                    (src, dst)
                })
            })
        })
    })
}

/// Per output position, the two source indices and the upper weight.
fn bilinear_taps<T: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let u = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::lit(u - i0 as f64))
        })
        .collect()
}

fn channel_span<'a, T>(
    shape: &[usize],
    channels: &Range<usize>,
    pred: &'a [T],
    target: &'a [T],
) -> (&'a [T], &'a [T]) {
    let plane = shape[1] * shape[2];
    assert!(channels.end <= shape[0], "channel range outside prediction");
    assert_eq!(target.len(), channels.len() * plane, "target does not match channel range");
    (&pred[channels.start * plane..channels.end * plane], target)
}

fn embed_span<T: Real>(shape: &[usize], channels: &Range<usize>, span: Vec<T>, scale: T) -> Vec<T> {
    let plane = shape[1] * shape[2];
    let mut out = vec![T::zero(); shape.iter().product()];
    for (o, s) in out[channels.start * plane..channels.end * plane]
        .iter_mut()
        .zip(span)
    {
        *o = s * scale;
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(ci: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Output columns `[lo, hi)` whose input column `ox·s + kx - p` is valid.
    #[inline]
    fn out_range(&self, kx: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((n_in as isize - 1 - off).div_euclid(s) + 1).clamp(0, n_out as isize);
        (lo.max(0) as usize, hi.max(lo) as usize)
    }
}

fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (k, s) = (g.k, g.stride);
    let plane_out = g.ho * g.wo;
    for o in 0..g.co {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        out_o.fill(b[o]);
        for i in 0..g.ci {
            let x_i = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.out_range(ky, g.h, g.ho);
                for kx in 0..k {
                    let wv = w[((o * g.ci + i) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = g.out_range(kx, g.w, g.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - g.pad;
                        let row_in = &x_i[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_o[oy * g.wo..(oy + 1) * g.wo];
                        if s == 1 {
                            let base = kx as isize - g.pad as isize;
                            let src = &row_in[(ox_lo as isize + base) as usize..(ox_hi as isize + base) as usize];
                            for (o_v, &i_v) in row_out[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o_v += wv * i_v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * s + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

type ConvGrads<T> = (Option<Vec<T>>, Vec<T>, Vec<T>);

fn conv2d_backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T], want_x: bool) -> ConvGrads<T> {
    let (k, s) = (g.k, g.stride);
    let plane_out = g.ho * g.wo;
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.co];
    for o in 0..g.co {
        let g_o = &gout[o * plane_out..(o + 1) * plane_out];
        gb[o] = g_o.iter().copied().sum();
        for i in 0..g.ci {
            let x_i = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.out_range(ky, g.h, g.ho);
                for kx in 0..k {
                    let wi = ((o * g.ci + i) * k + ky) * k + kx;
                    let wv = w[wi];
                    let (ox_lo, ox_hi) = g.out_range(kx, g.w, g.wo);
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - g.pad;
                        let row_g = &g_o[oy * g.wo..(oy + 1) * g.wo];
                        let row_in = &x_i[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let base = (ox_lo + kx) - g.pad;
                            let src = &row_in[base..base + (ox_hi - ox_lo)];
                            for (&gv, &iv) in row_g[ox_lo..ox_hi].iter().zip(src) {
                                acc += gv * iv;
                            }
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx[i * g.h * g.w + iy * g.w + base..][..ox_hi - ox_lo];
                                for (d, &gv) in dst.iter_mut().zip(&row_g[ox_lo..ox_hi]) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - g.pad;
                                acc += row_g[ox] * row_in[ix];
                                if let Some(gx) = gx.as_mut() {
                                    gx[i * g.h * g.w + iy * g.w + ix] += wv * row_g[ox];
                                }
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

const NEIGHBORS: [(isize, isize, isize); 27] = {
    let mut n = [(0, 0, 0); 27];
    let mut i = 0;
    while i < 27 {
        n[i] = ((i / 9) as isize - 1, ((i / 3) % 3) as isize - 1, (i % 3) as isize - 1);
        i += 1;
    }
    n
};

#[inline]
fn shifted(dims: Dims, z: usize, y: usize, x: usize, off: (isize, isize, isize)) -> Option<usize> {
    let (zz, yy, xx) = (z as isize + off.0, y as isize + off.1, x as isize + off.2);
    if zz < 0 || yy < 0 || xx < 0 || zz >= dims.d as isize || yy >= dims.h as isize || xx >= dims.w as isize {
        None
    } else {
        Some(dims.index(zz as usize, yy as usize, xx as usize))
    }
}

fn conv3d_forward<T: Real>(dims: Dims, ci: usize, co: usize, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    for cell in 0..dims.cells() {
        let (z, y, xx) = dims.unindex(cell);
        let o = &mut out[cell * co..(cell + 1) * co];
        o.copy_from_slice(b);
        for (kidx, off) in NEIGHBORS.iter().enumerate() {
            let Some(src) = shifted(dims, z, y, xx, *off) else { continue };
            let xin = &x[src * ci..(src + 1) * ci];
            let wk = &w[kidx * ci * co..(kidx + 1) * ci * co];
            for (i, &xv) in xin.iter().enumerate() {
                let wrow = &wk[i * co..(i + 1) * co];
                for (ov, &wv) in o.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
    }
}

fn conv3d_backward<T: Real>(
    dims: Dims,
    ci: usize,
    co: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    want_x: bool,
) -> ConvGrads<T> {
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); co];
    for cell in 0..dims.cells() {
        let (z, y, xx) = dims.unindex(cell);
        let go = &gout[cell * co..(cell + 1) * co];
        gb.iter_mut().zip(go).for_each(|(a, &b)| *a += b);
        for (kidx, off) in NEIGHBORS.iter().enumerate() {
            let Some(src) = shifted(dims, z, y, xx, *off) else { continue };
            let xin = &x[src * ci..(src + 1) * ci];
            let base = kidx * ci * co;
            for i in 0..ci {
                let wrow = &w[base + i * co..base + (i + 1) * co];
                let gwrow = &mut gw[base + i * co..base + (i + 1) * co];
                let xv = xin[i];
                let mut acc = T::zero();
                for ((gwv, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(go) {
                    *gwv += xv * gv;
                    acc += wv * gv;
                }
                if let Some(gx) = gx.as_mut() {
                    gx[src * ci + i] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(probe)/d(leaf) for every leaf element.
    fn check<F>(leaves: Vec<Tensor<f64>>, build: F, tol: f64)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let eval = |ls: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ls.iter().map(|l| t.variable(l.clone())).collect();
            let out = build(&mut t, &vs);
            (t.scalar(out), t, vs, out)
        };
        let (_, tape, vars, out) = eval(&leaves);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(&tape, vars[li]);
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data[k] += h;
                let mut minus = leaves.clone();
                minus[li].data[k] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
                assert!(err < tol, "leaf {li}[{k}]: fd {fd} vs analytic {}", analytic[k]);
            }
        }
    }

    fn probe(t: &mut Tape<f64>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t.value(v).len();
        let w = Arc::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        t.dot(v, w)
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, h) in [(1, 5), (2, 6), (2, 5)] {
            let leaves = vec![
                rand_tensor(vec![2, h, h], &mut rng),
                rand_tensor(vec![3, 2, 3, 3], &mut rng),
                rand_tensor(vec![3], &mut rng),
            ];
            check(
                leaves,
                |t, v| {
                    let c = t.conv2d(v[0], v[1], v[2], stride, 1);
                    probe(t, c, 2)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(vec![2, 7, 6], &mut rng);
        let w = rand_tensor(vec![3, 2, 3, 3], &mut rng);
        let b = rand_tensor(vec![3], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let out = t.conv2d(xv, wv, bv, 2, 1);
        let got = t.value(out);
        assert_eq!(got.shape, vec![3, 4, 3]);
        for o in 0..3 {
            for oy in 0..4 {
                for ox in 0..3 {
                    let mut s = b.data[o];
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                    s += w.data[((o * 2 + i) * 3 + ky) * 3 + kx]
                                        * x.data[(i * 7 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((got.data[(o * 4 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(vec![3, 4, 2, 2], &mut rng),
            rand_tensor(vec![3, 3, 3, 2, 3], &mut rng),
            rand_tensor(vec![3], &mut rng),
        ];
        check(
            leaves,
            |t, v| {
                let c = t.conv3d(v[0], v[1], v[2]);
                probe(t, c, 4)
            },
            1e-6,
        );
    }

    #[test]
    fn norm_gradients_both_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (layout, shape) in [
            (NormLayout::ChannelFirst, vec![3, 3, 4]),
            (NormLayout::ChannelLast, vec![2, 3, 2, 3]),
        ] {
            let leaves = vec![
                rand_tensor(shape, &mut rng),
                rand_tensor(vec![3], &mut rng),
                rand_tensor(vec![3], &mut rng),
            ];
            check(
                leaves,
                |t, v| {
                    let n = t.norm(v[0], v[1], v[2], layout);
                    probe(t, n, 6)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn elementwise_and_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let leaves = vec![rand_tensor(vec![4, 2, 3], &mut rng)];
        check(
            leaves,
            |t, v| {
                let a = t.leaky_relu(v[0], 0.01);
                let b = t.upsample2x(a);
                let vol = t.map_to_volume(b, 2);
                let m = t.volume_to_map(vol);
                let s = t.sigmoid(m);
                let r = t.bilinear(s, 5, 3);
                probe(t, r, 8)
            },
            1e-6,
        );
    }

    #[test]
    fn map_volume_round_trip_and_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(vec![6, 3, 4], &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let vol = t.map_to_volume(v, 3);
        assert_eq!(t.shape(vol), &[3, 3, 4, 2]);
        // channel 1, depth 2, map row 0 (top) is volume row 2
        let fv = t.volume(vol);
        assert_eq!(fv.get(2, 2, 1, 1), x.data[((1 * 3 + 2) * 3) * 4 + 1]);
        let back = t.volume_to_map(vol);
        assert_eq!(t.value(back), &x);
    }

    #[test]
    fn softmax_depth_and_depth_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![
            rand_tensor(vec![4, 2, 3, 1], &mut rng),
            rand_tensor(vec![4], &mut rng),
            rand_tensor(vec![1], &mut rng),
        ];
        check(
            leaves,
            |t, v| {
                let s = t.softmax_depth(v[0]);
                let d = t.depth_conv(s, v[1], v[2]);
                probe(t, d, 12)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut t = Tape::new();
        let v = t.constant(rand_tensor(vec![5, 2, 2, 1], &mut rng));
        let s = t.softmax_depth(v);
        let d = &t.value(s).data;
        for col in 0..4 {
            let sum: f64 = (0..5).map(|z| d[z * 4 + col]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_mean_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dims = Dims::cube(3);
        let flow = Arc::new(FlowField::from_fn(dims, |p: [f64; 3]| [0.8 * p[2] + 0.05, p[1] * 0.9, -p[0]]));
        let leaves = vec![
            rand_tensor(vec![3, 3, 3, 2], &mut rng),
            rand_tensor(vec![3, 3, 3, 2], &mut rng),
        ];
        check(
            leaves,
            move |t, v| {
                let a = t.resample(v[0], flow.clone());
                let m = t.mean(&[a, v[1]]);
                probe(t, m, 15)
            },
            1e-6,
        );
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (h, w) = (9, 8);
        let target = Arc::new(Tensor::new(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.gen::<f64>()).collect(),
        ));
        let mask = Arc::new(Tensor::new(
            vec![1, h, w],
            (0..h * w).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect(),
        ));
        let mut full_data = target.data.clone();
        full_data.extend_from_slice(&mask.data);
        let full = Arc::new(Tensor::new(vec![4, h, w], full_data));
        let leaves = vec![rand_tensor(vec![4, h, w], &mut rng)];
        check(
            leaves,
            move |t, v| {
                let s = t.sigmoid(v[0]);
                let l1 = t.l1(s, target.clone(), 0..3);
                let ss = t.ssim(s, target.clone(), 0..3);
                let mask_ch = t.l1(s, mask.clone(), 3..4);
                let b = t.bce_sum(s, full.clone());
                t.weighted_sum(&[(l1, 1.0), (ss, 10.0), (mask_ch, 0.5), (b, 0.01)])
            },
            1e-5,
        );
    }
}
