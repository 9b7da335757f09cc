//! Gaussian primitive storage, the pinhole camera, and the projection math
//! shared by the rasterizer and the training loop.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-space depth below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic pixel-space variance added to every projected covariance.
pub const COV2D_BLUR: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    Coarse,
    Fine,
}

/// Structure-of-arrays Gaussian storage. Rotations are `(w, x, y, z)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub tiers: Vec<Tier>,
}

/// One Gaussian's parameters, used when building or editing a set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub tier: Tier,
}

/// Where each row of an edited [`GaussianSet`] came from. `None` marks a newly
/// created Gaussian; optimizer moments and accumulators start from zero there.
pub type RowOrigin = Vec<Option<usize>>;

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.positions.push(g.position);
        self.log_scales.push(g.log_scale);
        self.rotations.push(g.rotation);
        self.opacity_logits.push(g.opacity_logit);
        self.tiers.push(g.tier);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            tier: self.tiers[i],
        }
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    /// World-space scale vector `exp(log_scale)`.
    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scales[i]).map(f64::exp)
    }

    pub fn count_tier(&self, tier: Tier) -> usize {
        self.tiers.iter().filter(|t| **t == tier).count()
    }

    /// Keeps rows for which `keep` is true and appends `added`. Returns the
    /// origin of every row in the new set.
    pub fn rebuild(&mut self, keep: &[bool], added: Vec<Gaussian>) -> RowOrigin {
        assert_eq!(keep.len(), self.len());
        let mut next = GaussianSet::default();
        let mut origin = Vec::with_capacity(self.len() + added.len());
        for (i, k) in keep.iter().enumerate() {
            if *k {
                next.push(self.get(i));
                origin.push(Some(i));
            }
        }
        for g in added {
            next.push(g);
            origin.push(None);
        }
        *self = next;
        origin
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a quaternion `(w, x, y, z)`; exact for unit quaternions.
pub fn quat_to_rotmat(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn quat_backward(q: [f64; 4], dr: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let d = |r: usize, c: usize| dr[(r, c)];
    [
        2.0 * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1)),
        2.0 * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - 2.0 * x * d(1, 1) - w * d(1, 2)
            + z * d(2, 0)
            + w * d(2, 1)
            - 2.0 * x * d(2, 2)),
        2.0 * (-2.0 * y * d(0, 0) + x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2)
            - w * d(2, 0)
            + z * d(2, 1)
            - 2.0 * y * d(2, 2)),
        2.0 * (-2.0 * z * d(0, 0) - w * d(0, 1) + x * d(0, 2) + w * d(1, 0) - 2.0 * z * d(1, 1)
            + y * d(1, 2)
            + x * d(2, 0)
            + y * d(2, 1)),
    ]
}

/// `Sigma = R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn compute_cov3d(log_scale: [f64; 3], rotation: [f64; 4]) -> Matrix3<f64> {
    let r = quat_to_rotmat(rotation);
    let s = Matrix3::from_diagonal(&Vector3::from(log_scale).map(f64::exp));
    let m = r * s;
    m * m.transpose()
}

/// Chains `dL/dSigma` (full matrix, symmetric parts summed) back to the log
/// scales and the raw quaternion components.
pub fn cov3d_backward(
    log_scale: [f64; 3],
    rotation: [f64; 4],
    dcov: &Matrix3<f64>,
) -> ([f64; 3], [f64; 4]) {
    let r = quat_to_rotmat(rotation);
    let s = Vector3::from(log_scale).map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    let dm = (dcov + dcov.transpose()) * m;
    let mut dr = Matrix3::zeros();
    let mut dlog = [0.0; 3];
    for k in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            dr[(i, k)] = dm[(i, k)] * s[k];
            ds += dm[(i, k)] * r[(i, k)];
        }
        dlog[k] = ds * s[k];
    }
    (dlog, quat_backward(rotation, &dr))
}

/// Pinhole camera with a world-to-camera rigid transform. Camera looks down
/// +z, x to the right, y down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::BadManifest(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::BadManifest("camera has zero-sized image".into()));
        }
        let r = self.rotation_matrix();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::BadManifest(
                "camera rotation is not a proper rotation".into(),
            ));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vector()
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vector())
    }

    /// Camera at `eye` looking at `target`, `up` roughly opposite image y.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[(i, j)];
            }
        }
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    /// Same pose with intrinsics and image size multiplied by `scale`.
    pub fn scaled(&self, scale: usize) -> Self {
        let s = scale as f64;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: self.width * scale,
            height: self.height * scale,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    /// Symmetric 2D covariance `(a, b, c)` = `[[a, b], [b, c]]`.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

fn projection_jacobian(cam: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (pc.x, pc.y, pc.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

/// Pinhole projection of a Gaussian center and EWA projection of its
/// covariance, `J W Sigma W^T J^T + 0.3 I`.
pub fn project_gaussian(g: &GaussianSet, i: usize, cam: &Camera) -> Result<Projection> {
    project(g.positions[i], g.log_scales[i], g.rotations[i], cam)
}

pub fn project(
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    cam: &Camera,
) -> Result<Projection> {
    let pc = cam.world_to_camera(&Vector3::from(position));
    if pc.z <= NEAR_PLANE {
        return Err(Error::BehindCamera { z: pc.z });
    }
    let mean2d = Vector2::new(
        cam.fx * pc.x / pc.z + cam.cx,
        cam.fy * pc.y / pc.z + cam.cy,
    );
    let t = projection_jacobian(cam, &pc) * cam.rotation_matrix();
    let cov = t * compute_cov3d(log_scale, rotation) * t.transpose();
    Ok(Projection {
        mean2d,
        cov2d: [
            cov[(0, 0)] + COV2D_BLUR,
            cov[(0, 1)],
            cov[(1, 1)] + COV2D_BLUR,
        ],
        depth: pc.z,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrad {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
}

/// Reverse-mode derivative of [`project`]. `dcov2d` holds derivatives with
/// respect to `(a, b, c)`, the off-diagonal `b` counted once.
pub fn project_backward(
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    cam: &Camera,
    dmean2d: Vector2<f64>,
    dcov2d: [f64; 3],
) -> ProjectionGrad {
    let w = cam.rotation_matrix();
    let pc = cam.world_to_camera(&Vector3::from(position));
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let j = projection_jacobian(cam, &pc);
    let t = j * w;
    let sigma = compute_cov3d(log_scale, rotation);

    let g = nalgebra::Matrix2::new(dcov2d[0], 0.5 * dcov2d[1], 0.5 * dcov2d[1], dcov2d[2]);
    let dsigma = t.transpose() * g * t;
    let dt = 2.0 * g * t * sigma;
    let dj = dt * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dpc = Vector3::new(
        dmean2d.x * fx / z,
        dmean2d.y * fy / z,
        -dmean2d.x * fx * x / z2 - dmean2d.y * fy * y / z2,
    );
    dpc.x += dj[(0, 2)] * (-fx / z2);
    dpc.y += dj[(1, 2)] * (-fy / z2);
    dpc.z += dj[(0, 0)] * (-fx / z2)
        + dj[(0, 2)] * (2.0 * fx * x / z3)
        + dj[(1, 1)] * (-fy / z2)
        + dj[(1, 2)] * (2.0 * fy * y / z3);
    let dp = w.transpose() * dpc;
    let (dls, dq) = cov3d_backward(log_scale, rotation, &dsigma);
    ProjectionGrad {
        position: [dp.x, dp.y, dp.z],
        log_scale: dls,
        rotation: dq,
    }
}

/// Unit vector from the camera center to `position`.
pub fn view_direction(position: &Vector3<f64>, cam: &Camera) -> Result<Vector3<f64>> {
    let v = position - cam.center();
    let n = v.norm();
    if n <= f64::EPSILON * (1.0 + position.norm()) {
        return Err(Error::DegenerateDirection);
    }
    Ok(v / n)
}

/// Chains `dL/dd` back to the position.
pub fn view_direction_backward(
    position: &Vector3<f64>,
    cam: &Camera,
    ddir: &Vector3<f64>,
) -> Vector3<f64> {
    let v = position - cam.center();
    let n = v.norm();
    let d = v / n;
    (ddir - d * d.dot(ddir)) / n
}

/// Pixel-space footprint radius: beyond it a splat of opacity `opacity`
/// falls below the 1/255 blending threshold. Equals `3 sqrt(lambda_max)` at
/// opacity `e^4.5 / 255`, and never exceeds `3.33 sqrt(lambda_max)`.
pub fn footprint_radius(cov2d: [f64; 3], opacity: f64) -> f64 {
    let [a, b, c] = cov2d;
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let ratio = opacity * 255.0;
    if ratio <= 1.0 {
        return 0.0;
    }
    (2.0 * ratio.ln() * lambda_max).sqrt()
}
