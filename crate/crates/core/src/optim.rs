//! Adaptive-moment optimizer with per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrad};
use crate::scene::{RowOrigin, Tier};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment buffers of one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Reorders row-structured moments after the owning set was rebuilt; new
    /// rows start at zero.
    pub fn remap_rows(&mut self, origin: &RowOrigin, width: usize) {
        let remap = |src: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; origin.len() * width];
            for (row, o) in origin.iter().enumerate() {
                if let Some(o) = o {
                    out[row * width..(row + 1) * width].copy_from_slice(&src[o * width..(o + 1) * width]);
                }
            }
            out
        };
        self.m = remap(&self.m);
        self.v = remap(&self.v);
    }
}

/// One bias-corrected update. `step` is the 1-based step number and
/// `lr(k)` the learning rate of element `k`.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    step: u64,
    cfg: &AdamConfig,
    lr: impl Fn(usize) -> f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), moments.len());
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for (k, ((p, g), (m, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
        .enumerate()
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr(k) * mhat / (vhat.sqrt() + cfg.eps);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub tables: f64,
    pub mlp: f64,
    pub decoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
            tables: 2e-3,
            mlp: 1e-3,
            decoder: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.position_init,
            self.position_final,
            self.opacity,
            self.scale,
            self.rotation,
            self.tables,
            self.mlp,
            self.decoder,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadConfig("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Log-linear interpolation from `position_init` to `position_final`.
    pub fn position_at(&self, iteration: usize, total: usize) -> f64 {
        if total == 0 || self.position_init <= 0.0 || self.position_final <= 0.0 {
            return self.position_init;
        }
        let t = (iteration as f64 / total as f64).clamp(0.0, 1.0);
        (self.position_init.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }
}

/// Learning rates of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub position: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub tables: f64,
    pub mlp: f64,
    pub decoder: f64,
    /// Multiplier for coarse-tier Gaussians.
    pub coarse_scale: f64,
    /// Multiplier for the field and decoder.
    pub network_scale: f64,
}

impl StepRates {
    pub fn new(lrs: &LearningRates, position: f64) -> Self {
        Self {
            position,
            opacity: lrs.opacity,
            scale: lrs.scale,
            rotation: lrs.rotation,
            tables: lrs.tables,
            mlp: lrs.mlp,
            decoder: lrs.decoder,
            coarse_scale: 1.0,
            network_scale: 1.0,
        }
    }
}

/// Moment buffers for every trainable group plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub step: u64,
    pub positions: Moments,
    pub log_scales: Moments,
    pub rotations: Moments,
    pub opacity_logits: Moments,
    pub tables: Moments,
    pub mlp: Moments,
    pub decoder: Moments,
    /// Scratch buffer for scattering sparse table gradients; not state.
    pub(crate) dense_tables: Vec<f64>,
}

impl PartialEq for OptimState {
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step
            && self.positions == o.positions
            && self.log_scales == o.log_scales
            && self.rotations == o.rotations
            && self.opacity_logits == o.opacity_logits
            && self.tables == o.tables
            && self.mlp == o.mlp
            && self.decoder == o.decoder
    }
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        let n = model.gaussians.len();
        Self {
            step: 0,
            positions: Moments::zeros(n * 3),
            log_scales: Moments::zeros(n * 3),
            rotations: Moments::zeros(n * 4),
            opacity_logits: Moments::zeros(n),
            tables: Moments::zeros(model.field.tables.len()),
            mlp: Moments::zeros(model.field.mlp.params.len()),
            decoder: Moments::zeros(model.decoder.params.len()),
            dense_tables: Vec::new(),
        }
    }

    /// Follows a rebuild of the Gaussian set.
    pub fn remap_gaussians(&mut self, origin: &RowOrigin) {
        self.positions.remap_rows(origin, 3);
        self.log_scales.remap_rows(origin, 3);
        self.rotations.remap_rows(origin, 4);
        self.opacity_logits.remap_rows(origin, 1);
    }

    pub fn matches(&self, model: &Model) -> bool {
        let n = model.gaussians.len();
        self.positions.len() == n * 3
            && self.log_scales.len() == n * 3
            && self.rotations.len() == n * 4
            && self.opacity_logits.len() == n
            && self.tables.len() == model.field.tables.len()
            && self.mlp.len() == model.field.mlp.params.len()
            && self.decoder.len() == model.decoder.params.len()
    }
}

/// Applies one update to every parameter of `model`; rotations are
/// renormalized afterwards.
pub fn optimizer_step(model: &mut Model, grad: &ModelGrad, state: &mut OptimState, rates: &StepRates, cfg: &AdamConfig) {
    assert!(state.matches(model), "optimizer state does not match the model");
    state.step += 1;
    let step = state.step;
    let g = &mut model.gaussians;
    let tier_scale: Vec<f64> = g
        .tiers
        .iter()
        .map(|t| if *t == Tier::Coarse { rates.coarse_scale } else { 1.0 })
        .collect();

    adam_update(
        g.positions.as_flattened_mut(),
        grad.positions.as_flattened(),
        &mut state.positions,
        step,
        cfg,
        |k| rates.position * tier_scale[k / 3],
    );
    adam_update(
        g.log_scales.as_flattened_mut(),
        grad.log_scales.as_flattened(),
        &mut state.log_scales,
        step,
        cfg,
        |k| rates.scale * tier_scale[k / 3],
    );
    adam_update(
        g.rotations.as_flattened_mut(),
        grad.rotations.as_flattened(),
        &mut state.rotations,
        step,
        cfg,
        |k| rates.rotation * tier_scale[k / 4],
    );
    adam_update(
        &mut g.opacity_logits,
        &grad.opacity_logits,
        &mut state.opacity_logits,
        step,
        cfg,
        |k| rates.opacity * tier_scale[k],
    );
    g.normalize_rotations();

    let net = rates.network_scale;
    let dense = &mut state.dense_tables;
    dense.resize(model.field.tables.len(), 0.0);
    for (k, v) in &grad.field.tables {
        dense[*k] = *v;
    }
    adam_update(&mut model.field.tables, dense, &mut state.tables, step, cfg, |_| rates.tables * net);
    for k in grad.field.tables.keys() {
        dense[*k] = 0.0;
    }
    adam_update(
        &mut model.field.mlp.params,
        &grad.field.mlp,
        &mut state.mlp,
        step,
        cfg,
        |_| rates.mlp * net,
    );
    adam_update(
        &mut model.decoder.params,
        &grad.decoder,
        &mut state.decoder,
        step,
        cfg,
        |_| rates.decoder * net,
    );
}
