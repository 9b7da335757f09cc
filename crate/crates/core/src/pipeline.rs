//! Glue between configuration, datasets and the training stages.

use rand::Rng;

use crate::config::Config;
use crate::dataset::Dataset;
use crate::decoder::Decoder;
use crate::error::Result;
use crate::field::FeatureField;
use crate::image::ImageBuffer;
use crate::model::Model;
use crate::optim::AdamConfig;
use crate::scene::{logit, Camera, Gaussian, GaussianSet, Tier};
use crate::train::{scene_extent, TrainSettings};

/// Fresh coarse model: random isotropic Gaussians, initialized field and decoder.
pub fn init_model(cfg: &Config, rng: &mut impl Rng) -> Result<Model> {
    let field = FeatureField::init(cfg.field.clone(), rng)?;
    let decoder = Decoder::init(cfg.decoder.clone(), rng)?;
    let mut gaussians = GaussianSet::default();
    let e = cfg.init.extent;
    for _ in 0..cfg.init.count {
        gaussians.push(Gaussian {
            position: std::array::from_fn(|_| rng.random_range(-e..=e)),
            log_scale: [cfg.init.scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(cfg.init.opacity),
            tier: Tier::Coarse,
        });
    }
    Ok(Model {
        gaussians,
        field,
        decoder,
    })
}

pub fn train_settings(cfg: &Config, dataset: &Dataset) -> TrainSettings {
    let cams: Vec<Camera> = dataset.views.iter().map(|v| v.camera.clone()).collect();
    TrainSettings {
        loss: cfg.loss,
        lrs: cfg.lr.clone(),
        adam: AdamConfig::default(),
        gss: cfg.gss.clone(),
        sr_factor: dataset.sr_factor,
        spatial_scale: scene_extent(&cams),
    }
}

/// Renders `camera` with intrinsics and image size multiplied by `scale`.
pub fn render_view(model: &Model, camera: &Camera, scale: usize) -> Result<ImageBuffer> {
    model.render(&camera.scaled(scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::field::FieldConfig;
    use crate::decoder::DecoderConfig;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> Config {
        Config {
            field: FieldConfig {
                levels: 4,
                log2_table_size: 10,
                base_resolution: 4,
                max_resolution: 32,
                hidden: 16,
                ..FieldConfig::default()
            },
            decoder: DecoderConfig {
                width: 8,
                bottleneck: 4,
                ..DecoderConfig::default()
            },
            ..Config::default()
        }
    }

    #[test]
    fn render_scale_sets_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = init_model(&small_config(), &mut rng).unwrap();
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 12.0, 12.0, 10, 6);
        assert_eq!(render_view(&m, &cam, 1).unwrap().shape(), (6, 10, 3));
        assert_eq!(render_view(&m, &cam, 2).unwrap().shape(), (12, 20, 3));
    }

    #[test]
    fn centroid_scales_with_render_scale() {
        // One opaque, off-center Gaussian; the decoder is bypassed by looking
        // at the blended alpha through the feature renderer's splat list.
        let mut g = GaussianSet::default();
        g.push(Gaussian {
            position: [0.4, -0.3, 0.0],
            log_scale: [0.15f64.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(0.95),
            tier: Tier::Coarse,
        });
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 20.0, 20.0, 24, 24);
        let centroid = |scale: usize| {
            let c = cam.scaled(scale);
            let list = crate::splat::SplatList::build(&g, &c);
            let feats = vec![1.0; list.len()];
            let map = crate::splat::rasterize(&list, &feats, 1);
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for y in 0..c.height {
                for x in 0..c.width {
                    let w = map.alpha[y * c.width + x];
                    sx += w * (x as f64 + 0.5);
                    sy += w * (y as f64 + 0.5);
                    sw += w;
                }
            }
            (sx / sw - c.cx, sy / sw - c.cy)
        };
        let (x1, y1) = centroid(1);
        let (x2, y2) = centroid(2);
        assert!(x1.abs() > 1.0 && y1.abs() > 1.0);
        assert!((x2 - 2.0 * x1).abs() < 0.05 && (y2 - 2.0 * y1).abs() < 0.05, "{x1},{y1} -> {x2},{y2}");
    }
}
