//! Axis-angle rotation helpers.
//!
//! Rotations are stored as unconstrained axis-angle 3-vectors (radians) so
//! first-order optimizers can update them directly. Conversion to matrices
//! uses Rodrigues' formula with a series expansion near zero angle, and the
//! per-component derivative matrices needed for analytic gradients are
//! available through [`rotation_jacobians`].

use nalgebra::{Matrix3, Vector3};

/// Below this angle the trigonometric coefficients are replaced by their
/// truncated series, which is exact to well under 1e-16 at the switch point.
const SERIES_ANGLE: f64 = 1e-4;

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn sinc_coeffs(theta2: f64) -> (f64, f64) {
    if theta2 < SERIES_ANGLE * SERIES_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2
        let c1 = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
        let c2 = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
        (c1, c2)
    } else {
        let theta = theta2.sqrt();
        ((theta.sin()) / theta, (1.0 - theta.cos()) / theta2)
    }
}

/// Rodrigues' formula: rotation matrix for an axis-angle vector.
pub fn rotation_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = axis_angle.norm_squared();
    let (c1, c2) = sinc_coeffs(theta2);
    let k = skew(axis_angle);
    Matrix3::identity() + k * c1 + k * k * c2
}

/// Derivatives of the rotation matrix w.r.t. each axis-angle component.
///
/// Returns `[dR/dw_x, dR/dw_y, dR/dw_z]`. At the origin these reduce to the
/// generators `[e_a]x`.
pub fn rotation_jacobians(axis_angle: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = axis_angle.norm_squared();
    let (c1, c2) = sinc_coeffs(theta2);
    // k1 = d(sin t / t)/dt / t, k2 = d((1-cos t)/t^2)/dt / t, so that
    // dc1/dw_a = w_a * k1 and dc2/dw_a = w_a * k2.
    let (k1, k2) = if theta2 < SERIES_ANGLE * SERIES_ANGLE {
        (
            -1.0 / 3.0 + theta2 / 30.0 - theta2 * theta2 / 840.0,
            -1.0 / 12.0 + theta2 / 180.0 - theta2 * theta2 / 6720.0,
        )
    } else {
        let theta = theta2.sqrt();
        let (s, c) = (theta.sin(), theta.cos());
        (
            (theta * c - s) / (theta2 * theta2.sqrt()),
            (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta2),
        )
    };
    let k = skew(axis_angle);
    let k2m = k * k;
    let mut out = [Matrix3::zeros(); 3];
    for (a, slot) in out.iter_mut().enumerate() {
        let mut e = Vector3::zeros();
        e[a] = 1.0;
        let ka = skew(&e);
        let w_a = axis_angle[a];
        *slot = k * (w_a * k1) + ka * c1 + k2m * (w_a * k2) + (ka * k + k * ka) * c2;
    }
    out
}

/// Inverse of [`rotation_matrix`]: recover an axis-angle vector from a
/// rotation matrix. The result has angle in `[0, pi]`.
pub fn log_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // vee((R - R^T)/2) = sin(theta) * axis
    let s_vec = Vector3::new(
        (r[(2, 1)] - r[(1, 2)]) * 0.5,
        (r[(0, 2)] - r[(2, 0)]) * 0.5,
        (r[(1, 0)] - r[(0, 1)]) * 0.5,
    );
    let sin_theta = s_vec.norm().min(1.0);
    // atan2 keeps precision where acos saturates.
    let theta = sin_theta.atan2(cos_theta);
    if theta < 1e-7 {
        return s_vec;
    }
    if theta < std::f64::consts::PI - 1e-4 {
        return s_vec * (theta / theta.sin());
    }
    // Near pi the skew part vanishes; recover the axis from R + I, whose
    // columns are all parallel to the axis, and the angle offset from the
    // still-accurate sine.
    let theta = std::f64::consts::PI - sin_theta.asin();
    let rp = r + Matrix3::identity();
    let mut best = 0;
    for i in 1..3 {
        if rp[(i, i)].abs() > rp[(best, best)].abs() {
            best = i;
        }
    }
    let mut axis = rp.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&s_vec) < 0.0 {
        axis = -axis;
    }
    axis * theta
}
