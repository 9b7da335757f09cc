//! Synthetic multi-view scene: colored Gaussians rendered by the same
//! rasterizer, with HR ground truth and average-pooled LR ground truth.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FixtureConfig;
use crate::dataset::{Manifest, ManifestView};
use crate::error::Result;
use crate::image::{avg_pool_downsample, ImageBuffer};
use crate::scene::{logit, Camera, Gaussian, GaussianSet, Tier};
use crate::splat::{rasterize, SplatList};

/// Background color of every fixture view.
pub const BACKGROUND: [f64; 3] = [0.2, 0.2, 0.2];
/// Camera distance from the origin.
pub const RIG_RADIUS: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct Fixture {
    pub gaussians: GaussianSet,
    pub colors: Vec<[f64; 3]>,
    /// LR cameras; HR cameras are these scaled by `sr_factor`.
    pub cameras: Vec<Camera>,
    pub sr_factor: usize,
    pub hr: Vec<ImageBuffer>,
    pub lr: Vec<ImageBuffer>,
}

/// Cameras on an arc (or full ring) around the origin, looking at it, with
/// alternating elevation.
pub fn camera_rig(views: usize, arc_degrees: f64, width: usize, height: usize) -> Vec<Camera> {
    let f = 1.2 * width.max(height) as f64;
    let arc = arc_degrees.to_radians();
    (0..views)
        .map(|k| {
            let az = if arc_degrees >= 360.0 {
                arc * k as f64 / views as f64
            } else if views == 1 {
                0.0
            } else {
                arc * (k as f64 / (views - 1) as f64 - 0.5)
            };
            let el: f64 = if k % 2 == 0 { 0.25 } else { -0.15 };
            let eye = Vector3::new(az.sin() * el.cos(), el.sin(), -az.cos() * el.cos()) * RIG_RADIUS;
            Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), f, f, width, height)
        })
        .collect()
}

/// Renders RGB-colored Gaussians over [`BACKGROUND`].
pub fn render_colored(gaussians: &GaussianSet, colors: &[[f64; 3]], camera: &Camera) -> ImageBuffer {
    let list = SplatList::build(gaussians, camera);
    let feats: Vec<f64> = list.splats.iter().flat_map(|s| colors[s.index]).collect();
    let map = rasterize(&list, &feats, 3);
    let mut img = map.image;
    for (p, a) in img.data.chunks_exact_mut(3).zip(&map.alpha) {
        for c in 0..3 {
            p[c] += (1.0 - a) * BACKGROUND[c];
        }
    }
    img
}

/// Random well-conditioned Gaussians inside a radius-0.7 ball, rendered from
/// `cfg.views` cameras at HR and pooled to LR.
pub fn make_synthetic_scene(seed: u64, cfg: &FixtureConfig) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = GaussianSet::default();
    let mut colors = Vec::with_capacity(cfg.gaussians);
    for _ in 0..cfg.gaussians {
        let p = loop {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if p.norm() <= 1.0 {
                break p * 0.7;
            }
        };
        let q = UnitQuaternion::from_euler_angles(
            rng.random_range(-3.1..3.1),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.1..3.1),
        );
        let log_scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02f64.ln()..0.25f64.ln()));
        gaussians.push(Gaussian {
            position: [p.x, p.y, p.z],
            log_scale,
            rotation: [q.w, q.i, q.j, q.k],
            opacity_logit: logit(rng.random_range(0.6..0.95)),
            tier: Tier::Coarse,
        });
        colors.push(std::array::from_fn(|_| rng.random_range(0.05..0.95)));
    }
    let cameras = camera_rig(cfg.views, cfg.arc_degrees, cfg.lr_width, cfg.lr_height);
    let mut hr = Vec::with_capacity(cameras.len());
    let mut lr = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let h = render_colored(&gaussians, &colors, &cam.scaled(cfg.sr_factor));
        lr.push(avg_pool_downsample(&h, cfg.sr_factor)?);
        hr.push(h);
    }
    Ok(Fixture {
        gaussians,
        colors,
        cameras,
        sr_factor: cfg.sr_factor,
        hr,
        lr,
    })
}

impl Fixture {
    /// Writes `lr/`, `hr/` and `manifest.toml` under `dir`. No pseudo-HR
    /// images are written, so training uses the bicubic fallback.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("lr"))?;
        std::fs::create_dir_all(dir.join("hr"))?;
        let mut views = Vec::with_capacity(self.cameras.len());
        for (k, cam) in self.cameras.iter().enumerate() {
            let name = format!("view_{k:03}");
            let lr_rel = format!("lr/{name}.png");
            let hr_rel = format!("hr/{name}.png");
            self.lr[k].save_png(&dir.join(&lr_rel))?;
            self.hr[k].save_png(&dir.join(&hr_rel))?;
            views.push(ManifestView {
                name,
                camera: cam.clone(),
                lr_image: lr_rel.into(),
                pseudo_hr_image: None,
                hr_image: Some(hr_rel.into()),
            });
        }
        let manifest = Manifest {
            sr_factor: self.sr_factor,
            views,
        };
        std::fs::write(dir.join("manifest.toml"), manifest.to_toml())?;
        Ok(())
    }
}
