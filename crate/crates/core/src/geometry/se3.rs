//! Exponential and logarithm maps of SE(3).
//!
//! A tangent vector is `(ω, v)` with `ω` a rotation vector in radians. The
//! group element is returned as `(R, u)` meaning the homogeneous matrix
//! `[R | u]`.

use nalgebra::{Matrix3, Vector3};

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Taylor-safe coefficients `(sin θ/θ, (1−cos θ)/θ², (θ−sin θ)/θ³)`.
fn coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

pub fn exp(omega: &Vector3<f64>, v: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let theta = omega.norm();
    let (a, b, c) = coefficients(theta);
    let w = hat(omega);
    let w2 = w * w;
    let r = Matrix3::identity() + w * a + w2 * b;
    let jac = Matrix3::identity() + w * b + w2 * c;
    (r, jac * v)
}

/// Inverse of [`exp`] for rotation angles below π.
pub fn log(r: &Matrix3<f64>, u: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let omega = super::axis_angle(r);
    let theta = omega.norm();
    let w = hat(&omega);
    // V⁻¹ = I − ½ŵ + (1/θ²)(1 − (θ sin θ)/(2(1 − cos θ))) ŵ²
    let d = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    };
    let vinv = Matrix3::identity() - w * 0.5 + w * w * d;
    (omega, vinv * u)
}
