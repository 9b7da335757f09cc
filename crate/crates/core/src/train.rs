//! Coarse (LR) and fine (HR) training stages.

use log::{debug, info};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gss::{densify_fine, densify_tier, run_gss, DensifyCounts, GssConfig, GssCounts, GssState};
use crate::image::ImageBuffer;
use crate::loss::{loss_hr_with_grad, total_loss_with_grad, LossConfig};
use crate::model::Model;
use crate::optim::{optimizer_step, AdamConfig, LearningRates, OptimState, StepRates};
use crate::scene::{Camera, Tier};

/// One training view: the LR camera, its LR ground truth and the HR pseudo label.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Camera,
    pub gt_lr: ImageBuffer,
    pub pseudo_hr: ImageBuffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CoarseLr,
    FineHr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub iterations: usize,
    pub gss_interval: usize,
    /// Learning-rate multiplier for coarse Gaussians, the field and the
    /// decoder during the fine stage.
    pub coarse_finetune_lr_scale: f64,
    /// Densification runs while `iteration < densify_until * iterations`.
    pub densify_until: f64,
    pub densify: bool,
}

impl StagePlan {
    pub fn coarse(iterations: usize) -> Self {
        Self {
            stage: Stage::CoarseLr,
            iterations,
            gss_interval: 100,
            coarse_finetune_lr_scale: 1.0,
            densify_until: 0.6,
            densify: true,
        }
    }

    pub fn fine(iterations: usize) -> Self {
        Self {
            stage: Stage::FineHr,
            coarse_finetune_lr_scale: 0.1,
            ..Self::coarse(iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gss_interval == 0 {
            return Err(Error::BadConfig("gss_interval must be positive".into()));
        }
        if !(self.coarse_finetune_lr_scale >= 0.0) {
            return Err(Error::BadConfig("coarse_finetune_lr_scale must be non-negative".into()));
        }
        Ok(())
    }

    fn densifies_at(&self, iteration: usize) -> bool {
        self.densify
            && iteration % self.gss_interval == 0
            && (iteration as f64) < self.densify_until * self.iterations as f64
    }
}

/// Settings shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub loss: LossConfig,
    pub lrs: LearningRates,
    pub adam: AdamConfig,
    pub gss: GssConfig,
    pub sr_factor: usize,
    /// Multiplies the position learning rate.
    pub spatial_scale: f64,
}

/// One densification event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub stage: Stage,
    pub iteration: usize,
    pub candidates: usize,
    pub created: usize,
    pub cloned: usize,
    pub densify_split: usize,
    pub pruned: usize,
    pub coarse: usize,
    pub fine: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub events: Vec<SplitEvent>,
}

/// 1.1 times the largest camera distance from the mean camera center.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(Camera::center).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

fn check_views(views: &[TrainView], factor: usize) -> Result<()> {
    if views.is_empty() {
        return Err(Error::BadConfig("no training views".into()));
    }
    for v in views {
        let (h, w) = (v.camera.height, v.camera.width);
        if v.gt_lr.shape() != (h, w, 3) {
            return Err(Error::ShapeMismatch(format!(
                "LR image {:?} does not match camera {h}x{w}",
                v.gt_lr.shape()
            )));
        }
        if v.pseudo_hr.shape() != (h * factor, w * factor, 3) {
            return Err(Error::ShapeMismatch(format!(
                "pseudo-HR image {:?} is not {factor}x the LR size",
                v.pseudo_hr.shape()
            )));
        }
    }
    Ok(())
}

/// Trains the coarse model at LR. Densification acts on the coarse tier.
pub fn train_stage1(
    model: &mut Model,
    state: &mut OptimState,
    views: &[TrainView],
    plan: &StagePlan,
    settings: &TrainSettings,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    run_stage(model, state, views, plan, settings, rng)
}

/// Refines a coarse model at HR with the pseudo-label loss, the LR
/// consistency term and selective splitting.
pub fn train_stage2(
    model: &mut Model,
    state: &mut OptimState,
    views: &[TrainView],
    plan: &StagePlan,
    settings: &TrainSettings,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    run_stage(model, state, views, plan, settings, rng)
}

fn run_stage(
    model: &mut Model,
    state: &mut OptimState,
    views: &[TrainView],
    plan: &StagePlan,
    settings: &TrainSettings,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    plan.validate()?;
    settings.gss.validate()?;
    settings.loss.validate()?;
    let factor = settings.sr_factor;
    check_views(views, factor)?;
    if !state.matches(model) {
        *state = OptimState::new(model);
    }
    let mut acc = GssState::new(model.gaussians.len());
    let mut out = TrainOutcome::default();
    let fine = plan.stage == Stage::FineHr;

    for it in 0..plan.iterations {
        let view = &views[rng.random_range(0..views.len())];
        let (loss, grad) = if fine {
            let cam = view.camera.scaled(factor);
            let (render, rec) = model.forward(&cam)?;
            let (loss, dimg) = total_loss_with_grad(&render, &view.pseudo_hr, &view.gt_lr, factor, &settings.loss)?;
            (loss, model.backward(&rec, &dimg))
        } else {
            let (render, rec) = model.forward(&view.camera)?;
            let (loss, dimg) = loss_hr_with_grad(&render, &view.gt_lr, &settings.loss)?;
            (loss, model.backward(&rec, &dimg))
        };
        out.losses.push(loss);
        acc.accumulate_grad(&grad, &model.gaussians)?;

        let mut rates = StepRates::new(
            &settings.lrs,
            settings.lrs.position_at(it, plan.iterations) * settings.spatial_scale,
        );
        if fine {
            rates.coarse_scale = plan.coarse_finetune_lr_scale;
            rates.network_scale = plan.coarse_finetune_lr_scale;
        }
        optimizer_step(model, &grad, state, &rates, &settings.adam);

        let done = it + 1;
        if plan.densifies_at(done) {
            let event = if fine {
                let (d, origin) = densify_fine(&mut model.gaussians, &mut acc, &settings.gss, rng);
                state.remap_gaussians(&origin);
                let (g, origin) = run_gss(&mut model.gaussians, &mut acc, &settings.gss, rng);
                state.remap_gaussians(&origin);
                make_event(plan.stage, done, g, d, model)
            } else {
                let (d, origin) = densify_tier(&mut model.gaussians, &mut acc, &settings.gss, Tier::Coarse, rng);
                state.remap_gaussians(&origin);
                acc.reset(model.gaussians.len());
                make_event(plan.stage, done, GssCounts::default(), d, model)
            };
            info!(
                "iter {done}: gss split {} created {}, densify cloned {} split {} pruned {} -> coarse {} fine {}",
                event.candidates,
                event.created,
                event.cloned,
                event.densify_split,
                event.pruned,
                event.coarse,
                event.fine
            );
            out.events.push(event);
        }
        if done % 100 == 0 || done == plan.iterations {
            debug!("iter {done}: loss {loss:.6} gaussians {}", model.gaussians.len());
        }
    }
    Ok(out)
}

fn make_event(stage: Stage, iteration: usize, g: GssCounts, d: DensifyCounts, model: &Model) -> SplitEvent {
    SplitEvent {
        stage,
        iteration,
        candidates: g.split,
        created: g.created,
        cloned: d.cloned,
        densify_split: d.split,
        pruned: d.pruned,
        coarse: model.gaussians.count_tier(Tier::Coarse),
        fine: model.gaussians.count_tier(Tier::Fine),
    }
}
