//! The full differentiable pipeline: project, query the field, splat, decode.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::decoder::{Decoder, DecoderRecord};
use crate::error::Result;
use crate::field::{FeatureField, FieldGrad, FieldRecord, FEATURE_DIM};
use crate::image::ImageBuffer;
use crate::scene::{project_backward, view_direction, view_direction_backward, Camera, GaussianSet};
use crate::splat::{rasterize, rasterize_backward, SplatList};

/// Splats per work unit in the backward reduction. Fixed so the summation
/// order does not depend on the thread count.
const REDUCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gaussians: GaussianSet,
    pub field: FeatureField,
    pub decoder: Decoder,
}

/// Intermediate values of one rendered view.
#[derive(Clone, Debug)]
pub struct RenderRecord {
    pub camera: Camera,
    pub list: SplatList,
    pub features: Vec<f64>,
    field_records: Vec<FieldRecord>,
    decoder: DecoderRecord,
    /// The 16-channel blended feature map.
    pub feature_map: ImageBuffer,
}

/// Gradients of a scalar loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub field: FieldGrad,
    pub decoder: Vec<f64>,
    /// Pixel-space mean gradients, used by densification.
    pub mean2d: Vec<Vector2<f64>>,
    /// Whether the Gaussian contributed to any pixel of the view.
    pub covered: Vec<bool>,
}

impl ModelGrad {
    pub fn zeros(model: &Model) -> Self {
        let n = model.gaussians.len();
        Self {
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            field: FieldGrad::new(&model.field),
            decoder: vec![0.0; model.decoder.params.len()],
            mean2d: vec![Vector2::zeros(); n],
            covered: vec![false; n],
        }
    }
}

struct SplatChunkGrad {
    field: FieldGrad,
    rows: Vec<(usize, [f64; 3], [f64; 3], [f64; 4], f64)>,
}

impl Model {
    pub fn render(&self, camera: &Camera) -> Result<ImageBuffer> {
        Ok(self.forward(camera)?.0)
    }

    pub fn forward(&self, camera: &Camera) -> Result<(ImageBuffer, RenderRecord)> {
        camera.validate()?;
        let list = SplatList::build(&self.gaussians, camera);
        let queried: Vec<([f64; FEATURE_DIM], FieldRecord)> = list
            .splats
            .par_iter()
            .map(|s| {
                let p = self.gaussians.position(s.index);
                let d = view_direction(&p, camera)?;
                self.field.feature_with_record(&p, &d)
            })
            .collect::<Result<_>>()?;
        let mut features = Vec::with_capacity(queried.len() * FEATURE_DIM);
        let mut field_records = Vec::with_capacity(queried.len());
        for (f, r) in queried {
            features.extend_from_slice(&f);
            field_records.push(r);
        }
        let fmap = rasterize(&list, &features, FEATURE_DIM);
        let (image, decoder) = self.decoder.decode(&fmap.image)?;
        Ok((
            image,
            RenderRecord {
                camera: camera.clone(),
                list,
                features,
                field_records,
                decoder,
                feature_map: fmap.image,
            },
        ))
    }

    /// Back-propagates `dimage` (gradient of the loss w.r.t. the decoded RGB
    /// image) into a fresh [`ModelGrad`].
    pub fn backward(&self, rec: &RenderRecord, dimage: &ImageBuffer) -> ModelGrad {
        let mut out = ModelGrad::zeros(self);
        self.backward_into(rec, dimage, &mut out);
        out
    }

    /// Same as [`Model::backward`], accumulating into `out`.
    pub fn backward_into(&self, rec: &RenderRecord, dimage: &ImageBuffer, out: &mut ModelGrad) {
        let (ddec, dfeat) = self.decoder.backward(&rec.decoder, dimage);
        for (a, b) in out.decoder.iter_mut().zip(&ddec) {
            *a += b;
        }
        let sg = rasterize_backward(&rec.list, &rec.features, FEATURE_DIM, &dfeat);
        let cam = &rec.camera;
        let g = &self.gaussians;

        let chunks: Vec<SplatChunkGrad> = (0..rec.list.len())
            .collect::<Vec<_>>()
            .par_chunks(REDUCE_CHUNK)
            .map(|range| {
                let mut field = FieldGrad::new(&self.field);
                let mut rows = Vec::with_capacity(range.len());
                for &k in range {
                    let s = &rec.list.splats[k];
                    let i = s.index;
                    let pg = project_backward(
                        g.positions[i],
                        g.log_scales[i],
                        g.rotations[i],
                        cam,
                        sg.mean2d[k],
                        sg.cov2d[k],
                    );
                    let upstream: [f64; FEATURE_DIM] =
                        std::array::from_fn(|c| sg.features[k * FEATURE_DIM + c]);
                    let qg = self.field.backward(&rec.field_records[k], &upstream, &mut field);
                    let p: Vector3<f64> = g.position(i);
                    let dpos = Vector3::from(pg.position)
                        + qg.position
                        + view_direction_backward(&p, cam, &qg.direction);
                    let o = s.opacity;
                    rows.push((
                        k,
                        [dpos.x, dpos.y, dpos.z],
                        pg.log_scale,
                        pg.rotation,
                        sg.opacity[k] * o * (1.0 - o),
                    ));
                }
                SplatChunkGrad { field, rows }
            })
            .collect();

        for chunk in chunks {
            out.field.add(&chunk.field);
            for (k, dp, dls, dq, dop) in chunk.rows {
                let i = rec.list.splats[k].index;
                for a in 0..3 {
                    out.positions[i][a] += dp[a];
                    out.log_scales[i][a] += dls[a];
                }
                for a in 0..4 {
                    out.rotations[i][a] += dq[a];
                }
                out.opacity_logits[i] += dop;
                out.mean2d[i] += sg.mean2d[k];
                out.covered[i] |= sg.covered[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::field::FieldConfig;
    use crate::scene::{logit, Gaussian, Tier};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> (Model, Camera) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = FeatureField::init(
            FieldConfig {
                levels: 4,
                log2_table_size: 10,
                base_resolution: 4,
                max_resolution: 32,
                hidden: 16,
                init_scale: 0.3,
                ..FieldConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let decoder = Decoder::init(
            DecoderConfig {
                width: 8,
                bottleneck: 4,
                ..DecoderConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let mut gaussians = GaussianSet::default();
        for _ in 0..3 {
            gaussians.push(Gaussian {
                position: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2)],
                log_scale: [rng.random_range(-1.6..-1.0), rng.random_range(-1.6..-1.0), rng.random_range(-1.6..-1.0)],
                rotation: [1.0, 0.1, -0.2, 0.05],
                opacity_logit: logit(rng.random_range(0.3..0.7)),
                tier: Tier::Coarse,
            });
        }
        gaussians.normalize_rotations();
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), 10.0, 10.0, 8, 8);
        (
            Model {
                gaussians,
                field,
                decoder,
            },
            cam,
        )
    }

    #[test]
    fn forward_shapes() {
        let (m, cam) = toy_model();
        let (img, rec) = m.forward(&cam).unwrap();
        assert_eq!(img.shape(), (8, 8, 3));
        assert_eq!(rec.feature_map.shape(), (8, 8, FEATURE_DIM));
        assert_eq!(rec.list.len(), 3);
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let (m, cam) = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up = ImageBuffer::from_fn(8, 8, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let obj = |m: &Model| -> f64 { m.render(&cam).unwrap().data.iter().zip(&up.data).map(|(a, b)| a * b).sum() };
        let (_, rec) = m.forward(&cam).unwrap();
        let g = m.backward(&rec, &up);
        let h = 1e-5;
        for i in 0..3 {
            for a in 0..3 {
                let mut p = m.clone();
                p.gaussians.positions[i][a] += h;
                let mut q = m.clone();
                q.gaussians.positions[i][a] -= h;
                let fd = (obj(&p) - obj(&q)) / (2.0 * h);
                let an = g.positions[i][a];
                assert!((fd - an).abs() < 1e-3 * fd.abs().max(an.abs()).max(1e-6), "{i},{a}: {fd} vs {an}");
            }
        }
    }
}
