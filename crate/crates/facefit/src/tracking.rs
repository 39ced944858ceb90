//! Sequence-level parameter and observation containers.

use nalgebra::{DVector, Vector2, Vector3};

use crate::camera::{Camera, RigidTransform};
use crate::error::{Error, Result};
use crate::model::{evaluate_model, BlendshapeModel, ModelParams, Region, VertexSet};

/// One probabilistic 2D alignment sample: vertex `vertex` seen by camera
/// `camera` in frame `frame` at expected pixel position `mu` with
/// uncertainty `sigma` (both in pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentObservation {
    pub vertex: u32,
    pub camera: u32,
    pub frame: u32,
    pub mu: Vector2<f64>,
    pub sigma: f64,
}

/// The full parameter vector of a tracking problem: shared identity and
/// deformations, per-frame expression and poses, per-camera calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingParams {
    pub beta: DVector<f64>,
    /// Expression coefficients, one vector per frame.
    pub phi: Vec<DVector<f64>>,
    /// Joint pose vectors, one per frame (`3K + 3` entries each).
    pub theta: Vec<DVector<f64>>,
    /// Static per-vertex deformations, shared over the sequence.
    pub delta_d: Vec<Vector3<f64>>,
    /// World transform of the head, one per frame.
    pub head_pose: Vec<RigidTransform>,
    /// Per-camera extrinsics and focal lengths (optimized unless frozen).
    pub cameras: Vec<Camera>,
}

impl TrackingParams {
    /// All-zero parameters with identity head poses and the given cameras.
    pub fn new_zeroed(model: &BlendshapeModel, n_frames: usize, cameras: Vec<Camera>) -> Self {
        TrackingParams {
            beta: DVector::zeros(model.b_id()),
            phi: vec![DVector::zeros(model.b_ex()); n_frames],
            theta: vec![DVector::zeros(model.theta_len()); n_frames],
            delta_d: vec![Vector3::zeros(); model.n_vertices()],
            head_pose: vec![RigidTransform::identity(); n_frames],
            cameras,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.head_pose.len()
    }

    pub fn validate(&self, model: &BlendshapeModel) -> Result<()> {
        let f = self.n_frames();
        if f == 0 {
            return Err(Error::InvalidData("tracking params cover no frames".into()));
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidData("tracking params have no cameras".into()));
        }
        if self.phi.len() != f || self.theta.len() != f {
            return Err(Error::DimensionMismatch(format!(
                "per-frame arrays disagree: phi={}, theta={}, head_pose={f}",
                self.phi.len(),
                self.theta.len()
            )));
        }
        if self.beta.len() != model.b_id() || self.delta_d.len() != model.n_vertices() {
            return Err(Error::DimensionMismatch(format!(
                "beta={} delta_d={} vs model b_id={} n_vertices={}",
                self.beta.len(),
                self.delta_d.len(),
                model.b_id(),
                model.n_vertices()
            )));
        }
        for t in 0..f {
            if self.phi[t].len() != model.b_ex() || self.theta[t].len() != model.theta_len() {
                return Err(Error::DimensionMismatch(format!(
                    "frame {t}: phi={} theta={} vs model b_ex={} theta_len={}",
                    self.phi[t].len(),
                    self.theta[t].len(),
                    model.b_ex(),
                    model.theta_len()
                )));
            }
        }
        let finite = self.beta.iter().all(|x| x.is_finite())
            && self.phi.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.theta.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.delta_d.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.head_pose.iter().all(|t| t.is_finite());
        if !finite {
            return Err(Error::InvalidData("non-finite tracking parameter".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    /// Per-frame model parameters (clones the shared pieces).
    pub fn model_params(&self, frame: usize) -> ModelParams {
        ModelParams {
            beta: self.beta.clone(),
            phi: self.phi[frame].clone(),
            theta: self.theta[frame].clone(),
            delta_d: self.delta_d.clone(),
        }
    }

    /// Local model vertices of one frame moved into world space.
    pub fn world_vertices(&self, model: &BlendshapeModel, frame: usize) -> Result<VertexSet> {
        let local = evaluate_model(model, &self.model_params(frame))?;
        Ok(crate::camera::transform_points(&self.head_pose[frame], &local))
    }
}

/// A per-frame mesh sequence with shared topology, used for ground-truth
/// input to the evaluation tools.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    pub vertices: Vec<Vec<Vector3<f64>>>,
    pub triangles: Vec<[u32; 3]>,
    pub region_labels: Option<Vec<Region>>,
}

impl MeshSequence {
    pub fn n_frames(&self) -> usize {
        self.vertices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = match self.vertices.first() {
            Some(v) => v.len(),
            None => return Err(Error::InvalidData("mesh sequence has no frames".into())),
        };
        for (t, frame) in self.vertices.iter().enumerate() {
            if frame.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "mesh sequence frame {t} has {} vertices, expected {n}",
                    frame.len()
                )));
            }
            if !frame.iter().all(|p| p.iter().all(|x| x.is_finite())) {
                return Err(Error::InvalidData(format!("non-finite vertex in mesh frame {t}")));
            }
        }
        for tri in &self.triangles {
            if tri.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidData("mesh triangle index out of range".into()));
            }
        }
        if let Some(labels) = &self.region_labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "region label count {} does not match vertex count {n}",
                    labels.len()
                )));
            }
        }
        Ok(())
    }
}

/// A tracking problem as loaded from disk: cameras (with calibration
/// status), observations in canonical order, and optional extras.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub cameras: Vec<Camera>,
    /// Whether each camera's calibration is trusted and must stay fixed.
    pub calibrated: Vec<bool>,
    pub n_frames: usize,
    /// Vertex count the observation indices refer to.
    pub n_vertices: usize,
    observations: Vec<AlignmentObservation>,
    /// Index ranges into `observations`, one per (frame, camera) pair.
    ranges: Vec<std::ops::Range<usize>>,
    pub mica_template: Option<VertexSet>,
    /// Ground-truth meshes for evaluation runs.
    pub gt_meshes: Option<MeshSequence>,
}

impl SequenceDataset {
    pub fn new(
        cameras: Vec<Camera>,
        calibrated: Vec<bool>,
        n_frames: usize,
        n_vertices: usize,
        mut observations: Vec<AlignmentObservation>,
        mica_template: Option<VertexSet>,
        gt_meshes: Option<MeshSequence>,
    ) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidData("dataset has no cameras".into()));
        }
        if n_frames == 0 {
            return Err(Error::InvalidData("dataset has no frames".into()));
        }
        if calibrated.len() != cameras.len() {
            return Err(Error::DimensionMismatch(format!(
                "calibrated flags ({}) vs cameras ({})",
                calibrated.len(),
                cameras.len()
            )));
        }
        for cam in &cameras {
            cam.validate()?;
        }
        for (idx, obs) in observations.iter().enumerate() {
            if obs.vertex as usize >= n_vertices
                || obs.camera as usize >= cameras.len()
                || obs.frame as usize >= n_frames
            {
                return Err(Error::InvalidData(format!(
                    "observation {idx} indices (v={}, c={}, t={}) out of range",
                    obs.vertex, obs.camera, obs.frame
                )));
            }
            if !(obs.sigma.is_finite() && obs.sigma > 0.0) {
                return Err(Error::InvalidData(format!(
                    "observation {idx} has non-positive sigma {}",
                    obs.sigma
                )));
            }
            if !(obs.mu.x.is_finite() && obs.mu.y.is_finite()) {
                return Err(Error::InvalidData(format!("observation {idx} has non-finite mu")));
            }
        }
        if let Some(template) = &mica_template {
            if !template.is_finite() {
                return Err(Error::InvalidData("non-finite neutral template".into()));
            }
        }
        if let Some(meshes) = &gt_meshes {
            meshes.validate()?;
            if meshes.n_frames() != n_frames {
                return Err(Error::DimensionMismatch(format!(
                    "ground-truth meshes cover {} frames, dataset has {n_frames}",
                    meshes.n_frames()
                )));
            }
        }
        // Canonical order makes every downstream sum independent of the
        // order observations arrived in.
        observations.sort_by_key(|o| (o.frame, o.camera, o.vertex));
        let n_cams = cameras.len();
        let mut ranges = vec![0..0; n_frames * n_cams];
        let mut start = 0;
        while start < observations.len() {
            let key = (observations[start].frame, observations[start].camera);
            let mut end = start + 1;
            while end < observations.len()
                && (observations[end].frame, observations[end].camera) == key
            {
                end += 1;
            }
            ranges[key.0 as usize * n_cams + key.1 as usize] = start..end;
            start = end;
        }
        Ok(SequenceDataset {
            cameras,
            calibrated,
            n_frames,
            n_vertices,
            observations,
            ranges,
            mica_template,
            gt_meshes,
        })
    }

    pub fn observations(&self) -> &[AlignmentObservation] {
        &self.observations
    }

    /// Observations of one (frame, camera) pair, sorted by vertex.
    pub fn frame_camera_observations(&self, frame: usize, camera: usize) -> &[AlignmentObservation] {
        let r = self.ranges[frame * self.cameras.len() + camera].clone();
        &self.observations[r]
    }

    pub fn n_cameras(&self) -> usize {
        self.cameras.len()
    }

    /// Initial tracking parameters taken from the dataset's cameras.
    pub fn initial_cameras(&self) -> Vec<Camera> {
        self.cameras.clone()
    }
}

/// Mean and RMS pixel distance between projected model vertices and their
/// observations, plus how many observations project behind a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionStats {
    pub mean_px: f64,
    pub rms_px: f64,
    pub n_valid: usize,
    pub n_behind: usize,
}

pub fn reprojection_stats(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
) -> Result<ReprojectionStats> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n_valid = 0usize;
    let mut n_behind = 0usize;
    for t in 0..dataset.n_frames {
        let world = params.world_vertices(model, t)?;
        for (j, cam) in params.cameras.iter().enumerate() {
            for obs in dataset.frame_camera_observations(t, j) {
                let proj = cam.project_point(&world.positions[obs.vertex as usize]);
                if proj.valid {
                    let d = (proj.pixel - obs.mu).norm();
                    sum += d;
                    sum_sq += d * d;
                    n_valid += 1;
                } else {
                    n_behind += 1;
                }
            }
        }
    }
    let denom = n_valid.max(1) as f64;
    Ok(ReprojectionStats {
        mean_px: sum / denom,
        rms_px: (sum_sq / denom).sqrt(),
        n_valid,
        n_behind,
    })
}

/// Mean world-space distance between the vertices produced by two parameter
/// sets over all frames.
pub fn mean_vertex_error(
    model: &BlendshapeModel,
    a: &TrackingParams,
    b: &TrackingParams,
) -> Result<f64> {
    if a.n_frames() != b.n_frames() {
        return Err(Error::DimensionMismatch(format!(
            "frame counts differ: {} vs {}",
            a.n_frames(),
            b.n_frames()
        )));
    }
    let mut total = 0.0;
    for t in 0..a.n_frames() {
        let va = a.world_vertices(model, t)?;
        let vb = b.world_vertices(model, t)?;
        total += va.mean_distance(&vb);
    }
    Ok(total / a.n_frames() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural::miniature_head;

    fn test_camera() -> Camera {
        Camera::new(RigidTransform::identity(), 800.0, [512, 512])
    }

    #[test]
    fn observations_are_canonically_sorted() {
        let obs = vec![
            AlignmentObservation { vertex: 5, camera: 1, frame: 1, mu: Vector2::zeros(), sigma: 1.0 },
            AlignmentObservation { vertex: 2, camera: 0, frame: 0, mu: Vector2::zeros(), sigma: 1.0 },
            AlignmentObservation { vertex: 9, camera: 0, frame: 0, mu: Vector2::zeros(), sigma: 1.0 },
            AlignmentObservation { vertex: 1, camera: 1, frame: 0, mu: Vector2::zeros(), sigma: 1.0 },
        ];
        let ds = SequenceDataset::new(
            vec![test_camera(), test_camera()],
            vec![true, true],
            2,
            20,
            obs,
            None,
            None,
        )
        .unwrap();
        let keys: Vec<_> = ds.observations().iter().map(|o| (o.frame, o.camera, o.vertex)).collect();
        assert_eq!(keys, vec![(0, 0, 2), (0, 0, 9), (0, 1, 1), (1, 1, 5)]);
        assert_eq!(ds.frame_camera_observations(0, 0).len(), 2);
        assert_eq!(ds.frame_camera_observations(1, 0).len(), 0);
        assert_eq!(ds.frame_camera_observations(1, 1).len(), 1);
    }

    #[test]
    fn bad_sigma_is_rejected() {
        let obs = vec![AlignmentObservation {
            vertex: 0,
            camera: 0,
            frame: 0,
            mu: Vector2::zeros(),
            sigma: 0.0,
        }];
        let err =
            SequenceDataset::new(vec![test_camera()], vec![true], 1, 1, obs, None, None).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)), "{err}");
    }

    #[test]
    fn out_of_range_indices_are_rejected() {
        let obs = vec![AlignmentObservation {
            vertex: 7,
            camera: 0,
            frame: 0,
            mu: Vector2::zeros(),
            sigma: 1.0,
        }];
        assert!(SequenceDataset::new(vec![test_camera()], vec![true], 1, 5, obs, None, None).is_err());
    }

    #[test]
    fn world_vertices_apply_head_pose() {
        let model = miniature_head();
        let mut params = TrackingParams::new_zeroed(&model, 1, vec![test_camera()]);
        params.head_pose[0].translation = Vector3::new(0.0, 0.0, 1.0);
        let world = params.world_vertices(&model, 0).unwrap();
        for (w, t) in world.positions.iter().zip(&model.template) {
            assert_eq!(*w, t + Vector3::new(0.0, 0.0, 1.0));
        }
    }
}
