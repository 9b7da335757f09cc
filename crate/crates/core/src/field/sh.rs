//! Real spherical harmonics up to degree 3 (16 basis values), in the sign
//! convention common to splatting renderers.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const SH_DIM: usize = 16;
/// Allowed deviation of `|d|` from 1.
pub const UNIT_TOLERANCE: f64 = 1e-6;

const C0: f64 = 0.28209479177387814;
const C1: f64 = 0.4886025119029199;
const C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub fn sh_encode(d: &Vector3<f64>) -> Result<[f64; SH_DIM]> {
    let norm = d.norm();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotUnit { norm });
    }
    Ok(sh_basis(d))
}

/// Basis values without the unit-length check.
pub fn sh_basis(d: &Vector3<f64>) -> [f64; SH_DIM] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        C0,
        -C1 * y,
        C1 * z,
        -C1 * x,
        C2[0] * x * y,
        C2[1] * y * z,
        C2[2] * (2.0 * zz - xx - yy),
        C2[3] * x * z,
        C2[4] * (xx - yy),
        C3[0] * y * (3.0 * xx - yy),
        C3[1] * x * y * z,
        C3[2] * y * (4.0 * zz - xx - yy),
        C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        C3[4] * x * (4.0 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// `sum_k upstream[k] * grad(Y_k)(d)`, treating the basis as polynomials in
/// `(x, y, z)`.
pub fn sh_backward(d: &Vector3<f64>, upstream: &[f64; SH_DIM]) -> Vector3<f64> {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let grads: [[f64; 3]; SH_DIM] = [
        [0.0, 0.0, 0.0],
        [0.0, -C1, 0.0],
        [0.0, 0.0, C1],
        [-C1, 0.0, 0.0],
        [C2[0] * y, C2[0] * x, 0.0],
        [0.0, C2[1] * z, C2[1] * y],
        [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z],
        [C2[3] * z, 0.0, C2[3] * x],
        [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0],
        [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y],
        [
            -2.0 * C3[2] * x * y,
            C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * C3[2] * y * z,
        ],
        [
            -6.0 * C3[3] * x * z,
            -6.0 * C3[3] * y * z,
            C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * C3[4] * x * y,
            8.0 * C3[4] * x * z,
        ],
        [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)],
        [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0],
    ];
    let mut out = Vector3::zeros();
    for (g, u) in grads.iter().zip(upstream) {
        out += Vector3::from(*g) * *u;
    }
    out
}
