//! Radial contraction of unbounded space into the open ball of radius 2.

use nalgebra::{Matrix3, Vector3};

/// Identity inside the unit ball, `(2 - 1/|p|) p/|p|` outside.
pub fn contract(p: &Vector3<f64>) -> Vector3<f64> {
    let r = p.norm();
    if r <= 1.0 {
        *p
    } else {
        p * ((2.0 - 1.0 / r) / r)
    }
}

/// Jacobian of [`contract`]. On the seam `|p| = 1` the inside branch is used.
pub fn contract_jacobian(p: &Vector3<f64>) -> Matrix3<f64> {
    let r = p.norm();
    if r <= 1.0 {
        return Matrix3::identity();
    }
    // contract(p) = s(r) p with s(r) = 2/r - 1/r^2.
    let s = 2.0 / r - 1.0 / (r * r);
    let ds_dr = -2.0 / (r * r) + 2.0 / (r * r * r);
    Matrix3::identity() * s + (p * p.transpose()) * (ds_dr / r)
}
