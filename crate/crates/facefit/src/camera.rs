//! Rigid transforms and single-focal-length pinhole projection.

use nalgebra::{Matrix3, Vector2, Vector3};
use crate::error::{Error, Result};
use crate::model::VertexSet;
use crate::rotation::{log_rotation, rotation_matrix};

/// A point closer than this to the image plane is treated as behind the
/// camera and flagged invalid instead of raising an error.
pub const DEPTH_EPS: f64 = 1e-6;

/// Rotation (axis-angle, radians) followed by translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Vector3::zeros(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    /// Build from an explicit rotation matrix (assumed orthonormal, det +1).
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation: log_rotation(rotation), translation }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation_matrix();
        RigidTransform {
            rotation: -self.rotation,
            translation: -(r.transpose() * self.translation),
        }
    }

    /// Composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let ra = self.rotation_matrix();
        let rb = other.rotation_matrix();
        RigidTransform::from_matrix(&(ra * rb), ra * other.translation + self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|x| x.is_finite()) && self.translation.iter().all(|x| x.is_finite())
    }
}

/// Apply a rigid transform to every point of a vertex set.
pub fn transform_points(t: &RigidTransform, pts: &VertexSet) -> VertexSet {
    let r = t.rotation_matrix();
    VertexSet::new(pts.positions.iter().map(|p| r * p + t.translation).collect())
}

/// Pinhole camera with a single focal length and fixed principal point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// World-to-camera transform.
    pub extrinsics: RigidTransform,
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point in pixels; defaults to the image center.
    pub principal_point: Vector2<f64>,
    /// Image width and height in pixels.
    pub image_size: [u32; 2],
}

impl Camera {
    /// Camera at the given extrinsics with the principal point centered.
    pub fn new(extrinsics: RigidTransform, focal: f64, image_size: [u32; 2]) -> Self {
        Camera {
            extrinsics,
            focal,
            principal_point: Vector2::new(image_size[0] as f64 / 2.0, image_size[1] as f64 / 2.0),
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::InvalidData(format!("focal length must be positive, got {}", self.focal)));
        }
        if !self.extrinsics.is_finite() {
            return Err(Error::InvalidData("non-finite camera extrinsics".into()));
        }
        let pp = self.principal_point;
        let inside = pp.x.is_finite()
            && pp.y.is_finite()
            && pp.x >= 0.0
            && pp.y >= 0.0
            && pp.x <= self.image_size[0] as f64
            && pp.y <= self.image_size[1] as f64;
        if !inside {
            return Err(Error::InvalidData(format!(
                "principal point {:?} outside image {:?}",
                (pp.x, pp.y),
                self.image_size
            )));
        }
        Ok(())
    }

    /// World-space position of the camera center.
    pub fn center(&self) -> Vector3<f64> {
        let r = self.extrinsics.rotation_matrix();
        -(r.transpose() * self.extrinsics.translation)
    }

    /// Unit vector of the optical axis in world space.
    pub fn forward(&self) -> Vector3<f64> {
        let r = self.extrinsics.rotation_matrix();
        r.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    /// Project a single camera-space point.
    pub fn project_camera_space(&self, p: &Vector3<f64>) -> Projection {
        if p.z <= DEPTH_EPS {
            return Projection { pixel: Vector2::zeros(), depth: p.z, valid: false };
        }
        let inv_z = 1.0 / p.z;
        Projection {
            pixel: Vector2::new(
                self.focal * p.x * inv_z + self.principal_point.x,
                self.focal * p.y * inv_z + self.principal_point.y,
            ),
            depth: p.z,
            valid: true,
        }
    }

    /// Project a single world-space point.
    pub fn project_point(&self, world: &Vector3<f64>) -> Projection {
        let p = self.extrinsics.apply(world);
        self.project_camera_space(&p)
    }
}

/// Result of projecting a point: pixel position plus the camera-space depth.
/// Points behind the camera are flagged rather than raising an error so
/// callers can down-weight them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

/// Project a world-space vertex set; one projection per point.
pub fn project(cam: &Camera, pts: &VertexSet) -> Vec<Projection> {
    let r = cam.extrinsics.rotation_matrix();
    let t = cam.extrinsics.translation;
    pts.positions
        .iter()
        .map(|p| cam.project_camera_space(&(r * p + t)))
        .collect()
}

/// Camera looking from `eye` toward `target`, with +y of the image roughly
/// aligned against the world `up`. Used by the synthetic generator.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    // Rows of the world->camera rotation are the camera axes.
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    RigidTransform::from_matrix(&r, -(r * eye))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_transform_is_noop() {
        let pts = VertexSet::new(vec![Vector3::new(1.0, -2.0, 3.0)]);
        let out = transform_points(&RigidTransform::identity(), &pts);
        assert_eq!(out.positions, pts.positions);
    }

    #[test]
    fn quarter_turn_about_z_moves_x_to_y() {
        let t = RigidTransform::new(
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        );
        let out = transform_points(&t, &VertexSet::new(vec![Vector3::new(1.0, 0.0, 0.0)]));
        assert_relative_eq!(out.positions[0], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn pure_translation() {
        let t = RigidTransform::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 5.0));
        let out = transform_points(&t, &VertexSet::new(vec![Vector3::zeros()]));
        assert_eq!(out.positions[0], Vector3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = Camera::new(RigidTransform::identity(), 500.0, [640, 480]);
        for z in [0.1, 1.0, 17.0] {
            let p = cam.project_point(&Vector3::new(0.0, 0.0, z));
            assert!(p.valid);
            assert_relative_eq!(p.pixel, cam.principal_point, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_checked_projection() {
        let mut cam = Camera::new(RigidTransform::identity(), 100.0, [640, 480]);
        cam.principal_point = Vector2::zeros();
        let p = cam.project_point(&Vector3::new(0.1, -0.2, 1.0));
        assert!(p.valid);
        assert_relative_eq!(p.pixel, Vector2::new(10.0, -20.0), epsilon = 1e-12);
        assert_relative_eq!(p.depth, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn doubling_depth_halves_offset_from_principal_point() {
        let cam = Camera::new(RigidTransform::identity(), 320.0, [640, 480]);
        let a = cam.project_point(&Vector3::new(0.05, 0.02, 1.0));
        let b = cam.project_point(&Vector3::new(0.05, 0.02, 2.0));
        let off_a = a.pixel - cam.principal_point;
        let off_b = b.pixel - cam.principal_point;
        assert_relative_eq!(off_a, off_b * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged_not_an_error() {
        let cam = Camera::new(RigidTransform::identity(), 320.0, [640, 480]);
        let p = cam.project_point(&Vector3::new(0.0, 0.0, -1.0));
        assert!(!p.valid);
        let q = cam.project_point(&Vector3::new(0.0, 0.0, 0.0));
        assert!(!q.valid);
    }

    #[test]
    fn projection_is_scale_consistent() {
        let cam = Camera::new(RigidTransform::identity(), 320.0, [640, 480]);
        let p = Vector3::new(0.2, -0.1, 0.8);
        let a = cam.project_camera_space(&p);
        for s in [0.5, 2.0, 13.0] {
            let b = cam.project_camera_space(&(p * s));
            assert_relative_eq!(a.pixel, b.pixel, epsilon = 1e-9);
        }
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let eye = Vector3::new(0.3, -0.2, -1.0);
        let target = Vector3::new(0.0, 0.05, 0.0);
        let t = look_at(eye, target, Vector3::new(0.0, 1.0, 0.0));
        let cam_space = t.apply(&target);
        assert_relative_eq!(cam_space.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(cam_space.y, 0.0, epsilon = 1e-12);
        assert!(cam_space.z > 0.0);
        let r = t.rotation_matrix();
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn inverse_round_trips(
            rx in -2.0f64..2.0, ry in -2.0f64..2.0, rz in -2.0f64..2.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            px in -3.0f64..3.0, py in -3.0f64..3.0, pz in -3.0f64..3.0,
        ) {
            let t = RigidTransform::new(Vector3::new(rx, ry, rz), Vector3::new(tx, ty, tz));
            let p = Vector3::new(px, py, pz);
            let back = t.inverse().apply(&t.apply(&p));
            prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
