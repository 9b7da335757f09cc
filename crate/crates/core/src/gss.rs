//! Gradient-guided selective splitting of coarse Gaussians and the
//! clone/split/prune densification of a tier.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGrad;
use crate::scene::{quat_to_rotmat, Gaussian, GaussianSet, RowOrigin, Tier};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleNorm {
    /// Euclidean norm of the three world-space scales.
    Euclidean,
    /// Largest scale component.
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GssConfig {
    /// Average view-space gradient threshold, pixel units.
    pub tau_p: f64,
    /// World-space scale threshold.
    pub tau_s: f64,
    /// Children per split coarse Gaussian.
    pub n_split: usize,
    pub interval: usize,
    /// Gaussians below this opacity are pruned; 0 disables pruning.
    pub prune_opacity: f64,
    /// Children are shrunk by `split_shrink * n_split`.
    pub split_shrink: f64,
    /// Scale divisor of the two halves of a densification split.
    pub densify_split_divisor: f64,
    pub scale_norm: ScaleNorm,
}

impl Default for GssConfig {
    fn default() -> Self {
        Self {
            tau_p: 2e-4,
            tau_s: 0.01,
            n_split: 5,
            interval: 100,
            prune_opacity: 0.005,
            split_shrink: 0.8,
            densify_split_divisor: 1.6,
            scale_norm: ScaleNorm::Euclidean,
        }
    }
}

impl GssConfig {
    /// `N_s = 5` at x2 and `7` at x4, linear in between.
    pub fn for_factor(factor: usize) -> Self {
        Self {
            n_split: if factor >= 4 { 7 } else { 5 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p > 0.0 && self.tau_s > 0.0) {
            return Err(Error::BadConfig("tau_p and tau_s must be positive".into()));
        }
        if self.n_split < 2 {
            return Err(Error::BadConfig("n_split must be at least 2".into()));
        }
        if self.interval == 0 {
            return Err(Error::BadConfig("gss interval must be positive".into()));
        }
        if self.split_shrink <= 0.0 || self.densify_split_divisor <= 0.0 {
            return Err(Error::BadConfig("split divisors must be positive".into()));
        }
        Ok(())
    }

    pub fn child_scale_divisor(&self) -> f64 {
        self.split_shrink * self.n_split as f64
    }

    pub fn scale_norm_of(&self, g: &GaussianSet, i: usize) -> f64 {
        let s = g.scale(i);
        match self.scale_norm {
            ScaleNorm::Euclidean => s.norm(),
            ScaleNorm::Max => s.max(),
        }
    }
}

/// Per-Gaussian statistics accumulated between densification events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GssState {
    pub grad_norm_sum: Vec<f64>,
    pub view_count: Vec<u32>,
    pub max_opacity_seen: Vec<f64>,
    /// Sum of world-space position gradients, used to orient clones.
    pub position_grad_sum: Vec<[f64; 3]>,
}

impl GssState {
    pub fn new(n: usize) -> Self {
        Self {
            grad_norm_sum: vec![0.0; n],
            view_count: vec![0; n],
            max_opacity_seen: vec![0.0; n],
            position_grad_sum: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_norm_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_norm_sum.is_empty()
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }

    /// `M`-weighted mean of the accumulated view-space gradient norms.
    pub fn average(&self, i: usize) -> f64 {
        if self.view_count[i] == 0 {
            0.0
        } else {
            self.grad_norm_sum[i] / self.view_count[i] as f64
        }
    }

    pub fn accumulate(&mut self, dmean2d: &[Vector2<f64>], covered: &[bool]) -> Result<()> {
        for len in [dmean2d.len(), covered.len()] {
            if len != self.len() {
                return Err(Error::LengthMismatch {
                    expected: self.len(),
                    got: len,
                });
            }
        }
        for (i, (d, c)) in dmean2d.iter().zip(covered).enumerate() {
            if *c {
                self.grad_norm_sum[i] += d.norm();
                self.view_count[i] += 1;
            }
        }
        Ok(())
    }

    /// Accumulates one iteration's gradients together with current opacities.
    pub fn accumulate_grad(&mut self, grad: &ModelGrad, gaussians: &GaussianSet) -> Result<()> {
        self.accumulate(&grad.mean2d, &grad.covered)?;
        for i in 0..self.len() {
            if grad.covered[i] {
                for a in 0..3 {
                    self.position_grad_sum[i][a] += grad.positions[i][a];
                }
                self.max_opacity_seen[i] = self.max_opacity_seen[i].max(gaussians.opacity(i));
            }
        }
        Ok(())
    }

    pub fn remap(&mut self, origin: &RowOrigin) {
        let mut next = Self::new(origin.len());
        for (row, o) in origin.iter().enumerate() {
            if let Some(o) = *o {
                next.grad_norm_sum[row] = self.grad_norm_sum[o];
                next.view_count[row] = self.view_count[o];
                next.max_opacity_seen[row] = self.max_opacity_seen[o];
                next.position_grad_sum[row] = self.position_grad_sum[o];
            }
        }
        *self = next;
    }
}

fn exceeds(g: &GaussianSet, state: &GssState, cfg: &GssConfig, i: usize) -> bool {
    state.view_count[i] > 0 && state.average(i) > cfg.tau_p && cfg.scale_norm_of(g, i) > cfg.tau_s
}

/// Coarse Gaussians whose average gradient and scale both exceed their thresholds.
pub fn select_candidates(g: &GaussianSet, state: &GssState, cfg: &GssConfig) -> Vec<usize> {
    assert_eq!(g.len(), state.len());
    (0..g.len())
        .filter(|&i| g.tiers[i] == Tier::Coarse && exceeds(g, state, cfg, i))
        .collect()
}

/// Draws `count` Gaussians from the density of Gaussian `i`, shrunk by
/// `divisor`, with the given tier.
fn sample_children(
    g: &GaussianSet,
    i: usize,
    count: usize,
    divisor: f64,
    tier: Tier,
    rng: &mut impl Rng,
) -> Vec<Gaussian> {
    let parent = g.get(i);
    let r = quat_to_rotmat(parent.rotation);
    let s = g.scale(i);
    let p = g.position(i);
    let shrink = divisor.ln();
    (0..count)
        .map(|_| {
            let z = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let x = p + r * s.component_mul(&z);
            Gaussian {
                position: [x.x, x.y, x.z],
                log_scale: parent.log_scale.map(|v| v - shrink),
                tier,
                ..parent
            }
        })
        .collect()
}

/// Children of coarse Gaussian `index`. Positions follow the parent density;
/// scales shrink by `0.8 N_s`; rotation and opacity are inherited. The caller
/// removes the parent.
pub fn split_coarse(g: &GaussianSet, index: usize, cfg: &GssConfig, rng: &mut impl Rng) -> Vec<Gaussian> {
    debug_assert_eq!(g.tiers[index], Tier::Coarse);
    sample_children(g, index, cfg.n_split, cfg.child_scale_divisor(), Tier::Fine, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GssCounts {
    pub split: usize,
    pub created: usize,
}

/// Splits every candidate, removes the parents and resets `state`.
pub fn run_gss(g: &mut GaussianSet, state: &mut GssState, cfg: &GssConfig, rng: &mut impl Rng) -> (GssCounts, RowOrigin) {
    let candidates = select_candidates(g, state, cfg);
    let mut keep = vec![true; g.len()];
    let mut added = Vec::with_capacity(candidates.len() * cfg.n_split);
    for &i in &candidates {
        added.extend(split_coarse(g, i, cfg, rng));
        keep[i] = false;
    }
    let counts = GssCounts {
        split: candidates.len(),
        created: added.len(),
    };
    let origin = g.rebuild(&keep, added);
    state.reset(g.len());
    (counts, origin)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyCounts {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clone/split/prune restricted to `tier`. Small high-gradient Gaussians are
/// cloned with a half-scale nudge down the accumulated position gradient;
/// large ones are replaced by two samples shrunk by `densify_split_divisor`;
/// Gaussians of the tier with opacity below `prune_opacity` are dropped.
/// `state` is remapped, not reset.
pub fn densify_tier(
    g: &mut GaussianSet,
    state: &mut GssState,
    cfg: &GssConfig,
    tier: Tier,
    rng: &mut impl Rng,
) -> (DensifyCounts, RowOrigin) {
    assert_eq!(g.len(), state.len());
    let n = g.len();
    let mut keep = vec![true; n];
    let mut added = Vec::new();
    let mut counts = DensifyCounts::default();
    for i in 0..n {
        if g.tiers[i] != tier || !(state.view_count[i] > 0 && state.average(i) > cfg.tau_p) {
            continue;
        }
        if cfg.scale_norm_of(g, i) <= cfg.tau_s {
            let mut clone = g.get(i);
            let dir = Vector3::from(state.position_grad_sum[i]);
            if dir.norm() > 0.0 {
                let step = 0.5 * g.scale(i).mean();
                let p = g.position(i) - dir.normalize() * step;
                clone.position = [p.x, p.y, p.z];
            }
            added.push(clone);
            counts.cloned += 1;
        } else {
            added.extend(sample_children(g, i, 2, cfg.densify_split_divisor, tier, rng));
            keep[i] = false;
            counts.split += 1;
        }
    }
    for i in 0..n {
        if keep[i] && g.tiers[i] == tier && g.opacity(i) < cfg.prune_opacity {
            keep[i] = false;
            counts.pruned += 1;
        }
    }
    let mut pruned_added = 0;
    added.retain(|c| {
        let ok = crate::scene::sigmoid(c.opacity_logit) >= cfg.prune_opacity;
        pruned_added += usize::from(!ok);
        ok
    });
    counts.pruned += pruned_added;
    let origin = g.rebuild(&keep, added);
    state.remap(&origin);
    (counts, origin)
}

/// Densification of the fine tier.
pub fn densify_fine(g: &mut GaussianSet, state: &mut GssState, cfg: &GssConfig, rng: &mut impl Rng) -> (DensifyCounts, RowOrigin) {
    densify_tier(g, state, cfg, Tier::Fine, rng)
}
