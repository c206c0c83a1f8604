//! Toy-scale Siamese trainer: a shared MLP encoder applied to both views,
//! optional momentum (target) encoder with predictor, SGD with momentum and
//! weight decay, warmup + cosine learning rate, gradient accumulation.

mod checkpoint;
mod mlp;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, read_sidecar, save_checkpoint,
    sidecar_path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use mlp::{ForwardCache, Layer, Mlp, MlpSpec, BN_EPS};

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{
    build_gram_set, normalize_backward, normalize_with_cache, EmbeddingBatch, DEFAULT_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::loss::{mmi_loss_from_gram, LossBreakdown, LossVariant, RescaleConfig, RescaleStates};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// SGD momentum coefficient.
    pub sgd_momentum: f64,
    /// Target EMA coefficient of the momentum-encoder variant.
    pub tau: f64,
    pub grad_accum_steps: usize,
    /// Adds a target encoder and a predictor on the online branch.
    pub momentum_encoder: bool,
    pub variant: LossVariant,
    pub rescale: RescaleConfig,
    /// Epsilon of the per-batch embedding standardization before the loss.
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            epochs: 50,
            base_lr: 0.05,
            warmup_epochs: 5,
            weight_decay: 1e-5,
            sgd_momentum: 0.9,
            tau: 0.996,
            grad_accum_steps: 1,
            momentum_encoder: false,
            variant: LossVariant::Full,
            rescale: RescaleConfig::default(),
            norm_eps: DEFAULT_NORM_EPS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.rescale.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size = {} must be >= 2",
                self.batch_size
            )));
        }
        if self.grad_accum_steps < 1 {
            return Err(Error::InvalidConfig("grad_accum_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau = {} must lie in [0, 1]",
                self.tau
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::InvalidConfig(format!(
                "sgd_momentum = {} must lie in [0, 1)",
                self.sgd_momentum
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("norm_eps", self.norm_eps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Schedule for a run with `batches_per_epoch` batches per epoch; the
    /// accumulation counter runs across epoch boundaries.
    pub fn schedule(&self, batches_per_epoch: usize) -> LrSchedule {
        let steps = |epochs: usize| (epochs * batches_per_epoch / self.grad_accum_steps) as u64;
        LrSchedule {
            base: self.base_lr,
            warmup_steps: steps(self.warmup_epochs),
            total_steps: steps(self.epochs),
        }
    }
}

/// Linear warmup then cosine decay, in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    /// The step at which the rate reaches zero.
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            warmup_steps: 0,
            total_steps: u64::MAX,
        }
    }
}

pub fn cosine_lr(step: u64, sched: &LrSchedule) -> f64 {
    if step < sched.warmup_steps {
        return sched.base * step as f64 / sched.warmup_steps as f64;
    }
    if step >= sched.total_steps {
        return 0.0;
    }
    if sched.total_steps == u64::MAX {
        return sched.base;
    }
    let span = (sched.total_steps - sched.warmup_steps) as f64;
    let progress = (step - sched.warmup_steps) as f64 / span;
    0.5 * sched.base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gradients (or any buffer) shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub online: Mlp,
    pub predictor: Option<Mlp>,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        Self {
            online: self.online.zeros_like(),
            predictor: self.predictor.as_ref().map(Mlp::zeros_like),
        }
    }

    fn nets(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(&self.online).chain(self.predictor.as_ref())
    }

    fn nets_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        std::iter::once(&mut self.online).chain(self.predictor.as_mut())
    }

    pub fn squared_norm(&self) -> f64 {
        self.nets().map(Mlp::squared_norm).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.nets().flat_map(Mlp::flat).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for net in self.nets_mut() {
            let n = net.num_params();
            let chunk = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::dims(offset + n, values.len()))?;
            net.set_flat(chunk)?;
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::dims(offset, values.len()));
        }
        Ok(())
    }

    pub fn scaled_add(&mut self, c: f64, other: &Trainable) {
        for (a, b) in self.nets_mut().zip(other.nets()) {
            a.scaled_add(c, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.nets_mut().for_each(|n| n.scale(c));
    }

    pub fn fill_zero(&mut self) {
        self.nets_mut().for_each(Mlp::fill_zero);
    }

    pub fn is_finite(&self) -> bool {
        self.nets().all(Mlp::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub params: Trainable,
    pub target: Option<Mlp>,
    pub velocity: Trainable,
    pub accum: Trainable,
    /// Batches accumulated since the last optimizer application.
    pub accum_count: usize,
    /// Optimizer applications so far.
    pub step: u64,
}

impl EncoderState {
    /// Fresh parameters; the momentum variant adds a target copy of the
    /// online network and a predictor of widths `[out, 2·out, out]`.
    pub fn init<R: Rng + ?Sized>(
        spec: &MlpSpec,
        momentum_encoder: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let online = Mlp::init(spec, rng)?;
        let (target, predictor) = if momentum_encoder {
            let out = spec.output_dim();
            let pspec = MlpSpec::new(vec![out, 2 * out, out], spec.batch_norm)?;
            (Some(online.clone()), Some(Mlp::init(&pspec, rng)?))
        } else {
            (None, None)
        };
        Ok(Self::from_parts(online, target, predictor))
    }

    pub fn from_parts(online: Mlp, target: Option<Mlp>, predictor: Option<Mlp>) -> Self {
        let params = Trainable { online, predictor };
        Self {
            velocity: params.zeros_like(),
            accum: params.zeros_like(),
            params,
            target,
            accum_count: 0,
            step: 0,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        self.params.online.spec()
    }

    pub fn online(&self) -> &Mlp {
        &self.params.online
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite()
            && self.target.as_ref().is_none_or(Mlp::is_finite)
            && self.velocity.is_finite()
    }
}

/// Raw (pre-standardization) embeddings of a `features × batch` input from
/// the online or the target encoder.
pub fn encode(
    state: &EncoderState,
    x: ArrayView2<'_, f64>,
    use_target: bool,
) -> Result<EmbeddingBatch> {
    let net = if use_target {
        state.target.as_ref().ok_or(Error::NoTarget)?
    } else {
        state.online()
    };
    Ok(EmbeddingBatch::new(net.forward(x)?))
}

/// Loss and parameter gradients for one pair of views, with the rescale
/// states held fixed.
pub fn batch_gradients(
    state: &EncoderState,
    x: ArrayView2<'_, f64>,
    xp: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
    states: &RescaleStates,
) -> Result<(LossBreakdown, Trainable)> {
    let mut fixed = *states;
    forward_backward(state, x, xp, cfg, &mut fixed, false)
}

fn forward_backward(
    state: &EncoderState,
    x: ArrayView2<'_, f64>,
    xp: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
    states: &mut RescaleStates,
    track: bool,
) -> Result<(LossBreakdown, Trainable)> {
    if x.dim() != xp.dim() {
        return Err(Error::ShapeMismatch(format!(
            "views differ in shape: {:?} vs {:?}",
            x.dim(),
            xp.dim()
        )));
    }
    let online = &state.params.online;
    let (h, cache_h) = online.forward_cached(x)?;
    let mut pred_cache = None;
    let z_raw = match &state.params.predictor {
        Some(pred) => {
            let (z, c) = pred.forward_cached(h.view())?;
            pred_cache = Some(c);
            z
        }
        None => h,
    };
    let mut cache_hp = None;
    let zp_raw = match &state.target {
        Some(target) => target.forward(xp)?,
        None => {
            let (zp, c) = online.forward_cached(xp)?;
            cache_hp = Some(c);
            zp
        }
    };

    let (z, norm_z) = normalize_with_cache(z_raw.view(), cfg.norm_eps)?;
    let (zp, norm_zp) = normalize_with_cache(zp_raw.view(), cfg.norm_eps)?;
    let gram = build_gram_set(&z, &zp)?;
    if track {
        states.update(&gram, &cfg.rescale)?;
    }
    let loss = mmi_loss_from_gram(&z, &zp, &gram, states, &cfg.rescale, cfg.variant)?;
    loss.check_finite()?;

    let mut grads = state.params.zeros_like();
    let g_z = normalize_backward(&norm_z, loss.grad_z.view());
    let g_h = match (&state.params.predictor, &pred_cache) {
        (Some(pred), Some(c)) => pred.backward(
            c,
            g_z.view(),
            grads.predictor.as_mut().expect("mirrors params"),
        ),
        _ => g_z,
    };
    online.backward(&cache_h, g_h.view(), &mut grads.online);
    if let Some(c) = &cache_hp {
        let g_zp = normalize_backward(&norm_zp, loss.grad_zprime.view());
        online.backward(c, g_zp.view(), &mut grads.online);
    }
    Ok((loss, grads))
}

/// What one call of [`train_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Rate of the current optimizer step.
    pub lr: f64,
    /// Norm of the applied (averaged) gradient when an update happened.
    pub applied_grad_norm: Option<f64>,
}

/// Forward both views, update tracking, evaluate the loss, backpropagate and
/// accumulate; every `grad_accum_steps` calls apply one SGD step on the mean
/// gradient (and the target EMA in the momentum variant).
pub fn train_step(
    state: &mut EncoderState,
    x: ArrayView2<'_, f64>,
    xp: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
    sched: &LrSchedule,
    states: &mut RescaleStates,
) -> Result<StepOutcome> {
    let (loss, grads) = forward_backward(state, x, xp, cfg, states, true)?;
    state.accum.scaled_add(1.0, &grads);
    state.accum_count += 1;
    let lr = cosine_lr(state.step, sched);
    if state.accum_count < cfg.grad_accum_steps {
        return Ok(StepOutcome {
            loss,
            lr,
            applied_grad_norm: None,
        });
    }

    state.accum.scale(1.0 / cfg.grad_accum_steps as f64);
    let grad_norm = state.accum.squared_norm().sqrt();
    sgd_update(state, lr, cfg.sgd_momentum, cfg.weight_decay);
    state.accum.fill_zero();
    state.accum_count = 0;
    state.step += 1;
    if state.target.is_some() {
        momentum_update(state, cfg.tau)?;
    }
    if !state.is_finite() {
        return Err(Error::NonFiniteParameter(format!(
            "after optimizer step {}",
            state.step
        )));
    }
    Ok(StepOutcome {
        loss,
        lr,
        applied_grad_norm: Some(grad_norm),
    })
}

/// `v ← μ·v + g + wd·w` (decay on weight matrices only), `w ← w − lr·v`,
/// using the accumulated gradient in `state.accum`.
fn sgd_update(state: &mut EncoderState, lr: f64, mu: f64, wd: f64) {
    let EncoderState {
        params,
        velocity,
        accum,
        ..
    } = state;
    for ((p, v), g) in params.nets_mut().zip(velocity.nets_mut()).zip(accum.nets()) {
        for (((ps, decay), (vs, _)), (gs, _)) in p
            .slices_mut()
            .into_iter()
            .zip(v.slices_mut())
            .zip(g.slices())
        {
            let wd_here = if decay { wd } else { 0.0 };
            for ((w, vel), &grad) in ps.iter_mut().zip(vs.iter_mut()).zip(gs) {
                *vel = mu * *vel + grad + wd_here * *w;
                *w -= lr * *vel;
            }
        }
    }
}

/// `target ← τ·target + (1−τ)·online`, elementwise.
pub fn momentum_update(state: &mut EncoderState, tau: f64) -> Result<()> {
    let target = state.target.as_mut().ok_or(Error::NoTarget)?;
    for ((t, _), (o, _)) in target
        .slices_mut()
        .into_iter()
        .zip(state.params.online.slices())
    {
        for (tv, &ov) in t.iter_mut().zip(o) {
            *tv = tau * *tv + (1.0 - tau) * ov;
        }
    }
    Ok(())
}
