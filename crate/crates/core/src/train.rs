//! Optimizer, per-sample objective and the training loop.

use std::sync::Arc;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Result, TbnError};
use crate::flow::relative_flow;
use crate::losses::{l1_loss, LossParts, LossWeights};
use crate::net::{Param, TbnModel};
use crate::scalar::Real;
use crate::scenes::MultiViewSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Upper bound of the per-sample input count, drawn from `1..=max_inputs`.
    pub max_inputs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 disables evaluation.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping early.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            max_inputs: 4,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 0,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid!("adam epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if self.max_inputs == 0 {
            return Err(invalid!("inputs per sample must be at least 1"));
        }
        self.weights.validate()
    }

    /// Weight of the pixel-summed mask term for `image_size` images.
    pub fn effective_mask_weight(&self, image_size: usize) -> f64 {
        self.weights.mask / (image_size * image_size) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. A non-finite gradient leaves parameters and
/// state untouched.
pub fn adam_step<T: Real>(params: &mut [Param<T>], grads: &[Vec<T>], state: &mut AdamState<T>, config: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(invalid!("gradient list does not match parameters"));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.tensor.len() {
            return Err(invalid!("gradient of {} has {} values, expected {}", p.name, g.len(), p.tensor.len()));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(TbnError::NonFinite(format!("gradient of {}[{i}] is {}", p.name, g[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::one() - T::lit(config.beta1.powi(t));
    let c2 = T::one() - T::lit(config.beta2.powi(t));
    let (lr, eps) = (T::lit(config.lr), T::lit(config.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.tensor.data[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Input views, target view and scene of one training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub scene: usize,
    pub inputs: Vec<usize>,
    pub target: usize,
}

/// Draws `K ~ U{1..=max_inputs}` distinct input views and a target among
/// the remaining views.
pub fn draw_sample(rng: &mut ChaCha8Rng, scene: usize, n_views: usize, max_inputs: usize) -> SampleSpec {
    let k = rng.gen_range(1..=max_inputs.min(n_views - 1));
    let picked = sample(rng, n_views, k + 1).into_vec();
    SampleSpec {
        scene,
        inputs: picked[..k].to_vec(),
        target: picked[k],
    }
}

/// Total objective of one example plus its gradient per parameter.
pub struct SampleResult<T> {
    pub parts: LossParts,
    pub total: T,
    pub grads: Option<Vec<Vec<T>>>,
}

/// Builds the objective of one example on a fresh tape.
pub fn sample_objective<T: Real>(
    model: &TbnModel<T>,
    scene: &MultiViewSample<T>,
    inputs: &[usize],
    target: usize,
    config: &TrainConfig,
    with_grads: bool,
) -> Result<SampleResult<T>> {
    if inputs.is_empty() {
        return Err(invalid!("a training example needs at least one input view"));
    }
    let arch = model.arch();
    let dims = arch.dims();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, with_grads);
    let tv = &scene.views[target];
    let moved: Vec<Var> = inputs
        .iter()
        .map(|&k| {
            let v = &scene.views[k];
            let x = tape.constant(v.image.to_tensor());
            let e = p.encode(&mut tape, x);
            p.transform(&mut tape, e, relative_flow(dims, &v.pose, &tv.pose))
        })
        .collect();
    let agg = tape.mean(&moved);
    let out = p.decode_image(&mut tape, agg);
    let rgb = Arc::new(tv.image.to_tensor());
    let mask = Arc::new(tv.mask.to_tensor());
    let l1_rgb = tape.l1(out, rgb.clone(), 0..3);
    let l1_mask = tape.l1(out, mask.clone(), 3..4);
    let ssim = tape.ssim(out, rgb, 0..3);
    let w = &config.weights;
    let mut terms = vec![(l1_rgb, T::one()), (l1_mask, T::one())];
    if w.ssim > 0.0 {
        terms.push((ssim, T::lit(w.ssim)));
    }
    let mut l_m = None;
    if w.mask > 0.0 {
        let occ = p.decode_occupancy(&mut tape, agg);
        let flows: Vec<_> = inputs
            .iter()
            .map(|&k| Arc::new(relative_flow(dims, &tv.pose, &scene.views[k].pose)))
            .collect();
        let masks: Vec<Arc<Tensor<T>>> = inputs.iter().map(|&k| Arc::new(scene.views[k].mask.to_tensor())).collect();
        let lm = p.mask_loss(&mut tape, occ, &flows, &masks, mask);
        terms.push((lm, T::lit(config.effective_mask_weight(arch.image_size))));
        l_m = Some(lm);
    }
    let total = tape.weighted_sum(&terms);
    let parts = LossParts {
        reconstruction: (tape.scalar(l1_rgb) + tape.scalar(l1_mask)).to_f64_lossy(),
        ssim: tape.scalar(ssim).to_f64_lossy(),
        mask: l_m.map_or(0.0, |v| tape.scalar(v).to_f64_lossy()),
    };
    let grads = with_grads.then(|| {
        let g = tape.backward(total);
        p.vars().iter().map(|&v| g.get_or_zeros(&tape, v)).collect()
    });
    Ok(SampleResult {
        parts,
        total: tape.scalar(total),
        grads,
    })
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
    pub total: f64,
}

impl LogEntry {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogEntry>,
    pub steps: usize,
    pub stopped_early: bool,
    /// Held-out single-view L1 of the returned parameters, when evaluated.
    pub best_eval: Option<f64>,
}

/// Mean single-input L1 on `scenes`: input view `id mod n`, target the next
/// view.
pub fn heldout_l1<T: Real>(model: &TbnModel<T>, scenes: &[MultiViewSample<T>]) -> Result<f64> {
    let losses = scenes
        .par_iter()
        .map(|s| {
            let n = s.views.len();
            let (i, t) = (s.id % n, (s.id + 1) % n);
            let v = &s.views[i];
            let (out, _) = model.synthesize(&[(v.image.clone(), v.pose)], &s.views[t].pose)?;
            Ok(l1_loss(&out, &s.views[t].image)?.to_f64_lossy())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean objective and gradient over a batch, reduced in batch order.
pub fn batch_gradient<T: Real>(
    model: &TbnModel<T>,
    scenes: &[MultiViewSample<T>],
    batch: &[SampleSpec],
    config: &TrainConfig,
) -> Result<(LogEntry, Vec<Vec<T>>)> {
    let results = batch
        .par_iter()
        .map(|s| sample_objective(model, &scenes[s.scene], &s.inputs, s.target, config, true))
        .collect::<Result<Vec<_>>>()?;
    let inv = T::one() / T::from_usize_lossy(batch.len());
    let mut grads: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
    let mut entry = LogEntry {
        step: 0,
        l_r: 0.0,
        l_s: 0.0,
        l_m: 0.0,
        total: 0.0,
    };
    let n = batch.len() as f64;
    for r in results {
        entry.l_r += r.parts.reconstruction / n;
        entry.l_s += r.parts.ssim / n;
        entry.l_m += r.parts.mask / n;
        entry.total += r.total.to_f64_lossy() / n;
        for (acc, g) in grads.iter_mut().zip(r.grads.expect("requested")) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
        }
    }
    if !entry.total.is_finite() {
        return Err(TbnError::NonFinite(format!("batch loss {entry:?}")));
    }
    Ok((entry, grads))
}

/// Trains in place. With `validation` and `eval_every > 0` the parameters
/// with the best held-out L1 are kept and training stops after `patience`
/// evaluations without improvement.
pub fn train<T: Real>(
    model: &mut TbnModel<T>,
    scenes: &[MultiViewSample<T>],
    validation: Option<&[MultiViewSample<T>]>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if let Some(s) = scenes.iter().find(|s| s.views.len() < 2) {
        return Err(invalid!("scene {} has fewer than two views", s.id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params());
    let per_epoch = scenes.len().div_ceil(config.batch_size);
    let total_steps = config.max_steps.unwrap_or(usize::MAX).min(per_epoch * config.epochs);
    let mut log = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = Vec::new();
    let evaluating = validation.is_some() && config.eval_every > 0;
    let mut best: Option<(f64, Vec<Param<T>>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut step = 0;
    while step < total_steps {
        if order.is_empty() {
            order = (0..scenes.len()).collect();
            order.shuffle(&mut rng);
        }
        let take = config.batch_size.min(order.len());
        let batch: Vec<SampleSpec> = order
            .drain(..take)
            .map(|s| draw_sample(&mut rng, s, scenes[s].views.len(), config.max_inputs))
            .collect();
        let (mut entry, grads) = batch_gradient(model, scenes, &batch, config)?;
        adam_step(model.params_mut(), &grads, &mut adam, config)?;
        step += 1;
        entry.step = step;
        on_step(&entry);
        log.push(entry);
        if evaluating && step % config.eval_every == 0 {
            let l1 = heldout_l1(model, validation.expect("checked"))?;
            if best.as_ref().map_or(true, |(b, _)| l1 < *b) {
                best = Some((l1, model.params().to_vec()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let mut best_eval = None;
    if evaluating {
        let current = heldout_l1(model, validation.expect("checked"))?;
        match best {
            Some((b, params)) if b < current => {
                model.params_mut().clone_from_slice(&params);
                best_eval = Some(b);
            }
            _ => best_eval = Some(current),
        }
    }
    if !model.is_finite() {
        return Err(TbnError::NonFinite("parameters after training".into()));
    }
    Ok(TrainOutcome {
        log,
        steps: step,
        stopped_early,
        best_eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    pub step: f64,
}

pub const GRADCHECK_STEP: f64 = 1e-6;
/// Multiple of the difference quotient's rounding noise used as the floor
/// of the relative error.
pub const GRADCHECK_NOISE_FACTOR: f64 = 1e3;

/// Compares the analytic gradient of one example's total objective with
/// central differences of step `h` for every `stride`-th parameter value.
pub fn gradcheck(
    model: &TbnModel<f64>,
    scene: &MultiViewSample<f64>,
    inputs: &[usize],
    target: usize,
    config: &TrainConfig,
    h: f64,
    stride: usize,
) -> Result<GradcheckReport> {
    let base = sample_objective(model, scene, inputs, target, config, true)?;
    let analytic = base.grads.expect("requested");
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        step: h,
    };
    let eval = |m: &TbnModel<f64>| sample_objective(m, scene, inputs, target, config, false).map(|r| r.total);
    let mut flat = 0usize;
    for pi in 0..model.params().len() {
        for k in 0..model.params()[pi].tensor.len() {
            flat += 1;
            if (flat - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = model.params()[pi].tensor.data[k];
            probe.params_mut()[pi].tensor.data[k] = orig + h;
            let plus = eval(&probe)?;
            probe.params_mut()[pi].tensor.data[k] = orig - h;
            let minus = eval(&probe)?;
            probe.params_mut()[pi].tensor.data[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[pi][k];
            // gradients this close to the rounding noise of the quotient
            // are compared absolutely
            let noise = f64::EPSILON * plus.abs().max(minus.abs()) / h;
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(GRADCHECK_NOISE_FACTOR * noise).max(1e-6);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{k}]", model.params()[pi].name);
            }
        }
    }
    Ok(report)
}
