//! Tile-based differentiable rasterizer for multi-channel features.
//!
//! Visible Gaussians are projected, globally sorted front to back (ties broken
//! by Gaussian index) and binned into 16x16 pixel tiles. Each pixel blends
//! `F = sum_i f_i a_i prod_{j<i} (1 - a_j)` over its tile's list.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::field::{FeatureField, FEATURE_DIM};
use crate::image::ImageBuffer;
use crate::scene::{footprint_radius, project_gaussian, view_direction, Camera, GaussianSet};

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Blending stops once transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    /// Index into the source [`GaussianSet`].
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same `(a, b, c)` layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub radius: f64,
}

impl Splat {
    pub fn new(
        index: usize,
        mean2d: Vector2<f64>,
        cov2d: [f64; 3],
        depth: f64,
        opacity: f64,
    ) -> Self {
        let [a, b, c] = cov2d;
        let det = a * c - b * b;
        Self {
            index,
            mean2d,
            cov2d,
            conic: [c / det, -b / det, a / det],
            depth,
            opacity,
            radius: footprint_radius(cov2d, opacity),
        }
    }

    #[inline]
    fn gaussian(&self, pixel: Vector2<f64>) -> f64 {
        let d = pixel - self.mean2d;
        let [qa, qb, qc] = self.conic;
        (-0.5 * (qa * d.x * d.x + 2.0 * qb * d.x * d.y + qc * d.y * d.y)).exp()
    }
}

/// `opacity * exp(-0.5 d^T Sigma^-1 d)`, clamped to `ALPHA_MAX`.
pub fn evaluate_alpha(splat: &Splat, pixel: Vector2<f64>) -> f64 {
    (splat.opacity * splat.gaussian(pixel)).min(ALPHA_MAX)
}

#[inline]
fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Depth-sorted visible splats and their tile bins.
#[derive(Clone, Debug)]
pub struct SplatList {
    pub width: usize,
    pub height: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Sorted by `(depth, index)`.
    pub splats: Vec<Splat>,
    /// Per tile, positions into `splats`, ascending (front to back).
    pub tiles: Vec<Vec<u32>>,
}

impl SplatList {
    /// Bins already-projected splats. Splats are sorted here.
    pub fn from_splats(mut splats: Vec<Splat>, width: usize, height: usize) -> Self {
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let Some((x0, x1, y0, y1)) = pixel_bounds(s, width, height) else {
                continue;
            };
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    tiles[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Self {
            width,
            height,
            tiles_x,
            tiles_y,
            splats,
            tiles,
        }
    }

    /// Projects every Gaussian in front of the near plane.
    pub fn build(gaussians: &GaussianSet, camera: &Camera) -> Self {
        let splats: Vec<Splat> = (0..gaussians.len())
            .into_par_iter()
            .filter_map(|i| {
                let p = project_gaussian(gaussians, i, camera).ok()?;
                Some(Splat::new(i, p.mean2d, p.cov2d, p.depth, gaussians.opacity(i)))
            })
            .collect();
        Self::from_splats(splats, camera.width, camera.height)
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(self.width);
        let y1 = (y0 + TILE_SIZE).min(self.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Inclusive pixel index range whose centers lie within the footprint.
fn pixel_bounds(s: &Splat, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    if s.radius <= 0.0 {
        return None;
    }
    let lo_x = (s.mean2d.x - s.radius - 0.5).ceil();
    let hi_x = (s.mean2d.x + s.radius - 0.5).floor();
    let lo_y = (s.mean2d.y - s.radius - 0.5).ceil();
    let hi_y = (s.mean2d.y + s.radius - 0.5).floor();
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > (width - 1) as f64 || lo_y > (height - 1) as f64 {
        return None;
    }
    if lo_x > hi_x || lo_y > hi_y {
        return None;
    }
    Some((
        lo_x.max(0.0) as usize,
        hi_x.min((width - 1) as f64) as usize,
        lo_y.max(0.0) as usize,
        hi_y.min((height - 1) as f64) as usize,
    ))
}

/// Blended features plus per-pixel accumulated opacity `1 - T_final`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub image: ImageBuffer,
    pub alpha: Vec<f64>,
}

/// Front-to-back blend of one pixel. `features` holds `channels` values per
/// splat position. `min_transmittance = 0` disables early termination.
fn blend_pixel(
    list: &SplatList,
    order: impl Iterator<Item = usize>,
    features: &[f64],
    channels: usize,
    pixel: Vector2<f64>,
    min_transmittance: f64,
    out: &mut [f64],
) -> f64 {
    let mut t = 1.0;
    for pos in order {
        let s = &list.splats[pos];
        let alpha = evaluate_alpha(s, pixel);
        if alpha < ALPHA_MIN {
            continue;
        }
        let w = alpha * t;
        let f = &features[pos * channels..(pos + 1) * channels];
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
        t *= 1.0 - alpha;
        if t < min_transmittance {
            break;
        }
    }
    1.0 - t
}

/// Tiled forward pass.
pub fn rasterize(list: &SplatList, features: &[f64], channels: usize) -> FeatureMap {
    assert_eq!(features.len(), list.len() * channels);
    let (w, h) = (list.width, list.height);
    let tiles: Vec<Vec<(usize, usize, Vec<f64>, f64)>> = (0..list.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let order = &list.tiles[tile];
            list.tile_pixels(tile)
                .map(|(x, y)| {
                    let mut px = vec![0.0; channels];
                    let a = blend_pixel(
                        list,
                        order.iter().map(|p| *p as usize),
                        features,
                        channels,
                        pixel_center(x, y),
                        TRANSMITTANCE_MIN,
                        &mut px,
                    );
                    (x, y, px, a)
                })
                .collect()
        })
        .collect();
    let mut image = ImageBuffer::zeros(h, w, channels);
    let mut alpha = vec![0.0; h * w];
    for (x, y, px, a) in tiles.into_iter().flatten() {
        let i = image.index(y, x, 0);
        image.data[i..i + channels].copy_from_slice(&px);
        alpha[y * w + x] = a;
    }
    FeatureMap { image, alpha }
}

/// Reference renderer: every pixel walks the full sorted list, no tiling,
/// no footprint culling, no early termination.
pub fn rasterize_bruteforce(list: &SplatList, features: &[f64], channels: usize) -> FeatureMap {
    let (w, h) = (list.width, list.height);
    let mut image = ImageBuffer::zeros(h, w, channels);
    let mut alpha = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = image.index(y, x, 0);
            alpha[y * w + x] = blend_pixel(
                list,
                0..list.len(),
                features,
                channels,
                pixel_center(x, y),
                0.0,
                &mut image.data[i..i + channels],
            );
        }
    }
    FeatureMap { image, alpha }
}

/// Per-splat gradients, indexed like [`SplatList::splats`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub features: Vec<f64>,
    pub opacity: Vec<f64>,
    pub mean2d: Vec<Vector2<f64>>,
    /// With respect to `(a, b, c)` of the covariance, `b` counted once.
    pub cov2d: Vec<[f64; 3]>,
    /// Whether the splat passed the alpha threshold at any pixel.
    pub covered: Vec<bool>,
}

impl SplatGrads {
    fn zeros(n: usize, channels: usize) -> Self {
        Self {
            features: vec![0.0; n * channels],
            opacity: vec![0.0; n],
            mean2d: vec![Vector2::zeros(); n],
            cov2d: vec![[0.0; 3]; n],
            covered: vec![false; n],
        }
    }
}

struct Contribution {
    pos: usize,
    alpha: f64,
    transmittance: f64,
    gauss: f64,
    clamped: bool,
}

/// Reverse pass of [`rasterize`]. Each tile accumulates into its own buffer;
/// buffers are reduced in tile order so the result does not depend on the
/// thread count.
pub fn rasterize_backward(
    list: &SplatList,
    features: &[f64],
    channels: usize,
    upstream: &ImageBuffer,
) -> SplatGrads {
    assert_eq!(upstream.shape(), (list.height, list.width, channels));
    let partials: Vec<(Vec<u32>, SplatGrads)> = (0..list.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let order = &list.tiles[tile];
            let mut local = SplatGrads::zeros(order.len(), channels);
            let mut contribs: Vec<(usize, Contribution)> = Vec::new();
            for (x, y) in list.tile_pixels(tile) {
                let pixel = pixel_center(x, y);
                contribs.clear();
                let mut t = 1.0;
                for (k, pos) in order.iter().enumerate() {
                    let s = &list.splats[*pos as usize];
                    let gauss = s.gaussian(pixel);
                    let raw = s.opacity * gauss;
                    let alpha = raw.min(ALPHA_MAX);
                    if alpha < ALPHA_MIN {
                        continue;
                    }
                    contribs.push((
                        k,
                        Contribution {
                            pos: *pos as usize,
                            alpha,
                            transmittance: t,
                            gauss,
                            clamped: raw > ALPHA_MAX,
                        },
                    ));
                    t *= 1.0 - alpha;
                    if t < TRANSMITTANCE_MIN {
                        break;
                    }
                }
                let g = upstream.pixel(y, x);
                let mut suffix = 0.0;
                for (k, c) in contribs.iter().rev() {
                    local.covered[*k] = true;
                    let f = &features[c.pos * channels..(c.pos + 1) * channels];
                    let fg: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
                    let w = c.alpha * c.transmittance;
                    for (d, gv) in local.features[k * channels..(k + 1) * channels]
                        .iter_mut()
                        .zip(g)
                    {
                        *d += w * gv;
                    }
                    let dalpha = c.transmittance * fg - suffix / (1.0 - c.alpha);
                    suffix += fg * w;
                    if c.clamped {
                        continue;
                    }
                    let s = &list.splats[c.pos];
                    local.opacity[*k] += c.gauss * dalpha;
                    let dpower = s.opacity * c.gauss * dalpha;
                    let d = pixel - s.mean2d;
                    let [qa, qb, qc] = s.conic;
                    local.mean2d[*k] += Vector2::new(qa * d.x + qb * d.y, qb * d.x + qc * d.y) * dpower;
                    // d power / d conic, off-diagonal counted once.
                    local.cov2d[*k][0] += -0.5 * d.x * d.x * dpower;
                    local.cov2d[*k][1] += -d.x * d.y * dpower;
                    local.cov2d[*k][2] += -0.5 * d.y * d.y * dpower;
                }
            }
            (order.clone(), local)
        })
        .collect();

    let mut out = SplatGrads::zeros(list.len(), channels);
    for (order, local) in partials {
        for (k, pos) in order.iter().enumerate() {
            let pos = *pos as usize;
            for c in 0..channels {
                out.features[pos * channels + c] += local.features[k * channels + c];
            }
            out.opacity[pos] += local.opacity[k];
            out.mean2d[pos] += local.mean2d[k];
            for j in 0..3 {
                out.cov2d[pos][j] += local.cov2d[k][j];
            }
            out.covered[pos] |= local.covered[k];
        }
    }
    // Conic gradients were accumulated in `cov2d`; convert through the inverse.
    for (s, d) in list.splats.iter().zip(out.cov2d.iter_mut()) {
        *d = conic_to_cov_grad(s.conic, *d);
    }
    out
}

/// Given `dL/dQ` for `Q = C^-1` (off-diagonal counted once), returns `dL/dC`
/// in the same layout.
pub fn conic_to_cov_grad(conic: [f64; 3], dconic: [f64; 3]) -> [f64; 3] {
    let q = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let g = Matrix2::new(dconic[0], 0.5 * dconic[1], 0.5 * dconic[1], dconic[2]);
    let dc = -(q * g * q);
    [dc[(0, 0)], 2.0 * dc[(0, 1)], dc[(1, 1)]]
}

/// Per-splat features from the field, `FEATURE_DIM` values per splat.
pub fn query_features(list: &SplatList, gaussians: &GaussianSet, field: &FeatureField, camera: &Camera) -> Result<Vec<f64>> {
    let per: Vec<[f64; FEATURE_DIM]> = list
        .splats
        .par_iter()
        .map(|s| {
            let p: Vector3<f64> = gaussians.position(s.index);
            let d = view_direction(&p, camera)?;
            field.feature(&p, &d)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Field features of every visible Gaussian blended into a 16-channel map.
pub fn render_features(gaussians: &GaussianSet, field: &FeatureField, camera: &Camera) -> Result<FeatureMap> {
    let list = SplatList::build(gaussians, camera);
    let features = query_features(&list, gaussians, field, camera)?;
    Ok(rasterize(&list, &features, FEATURE_DIM))
}

/// Same contract as [`render_features`] through the reference renderer.
pub fn render_features_bruteforce(
    gaussians: &GaussianSet,
    field: &FeatureField,
    camera: &Camera,
) -> Result<FeatureMap> {
    let list = SplatList::build(gaussians, camera);
    let features = query_features(&list, gaussians, field, camera)?;
    Ok(rasterize_bruteforce(&list, &features, FEATURE_DIM))
}
