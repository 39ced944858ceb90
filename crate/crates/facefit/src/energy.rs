//! The tracking energy: alignment, shape regularizers, temporal smoothness,
//! neutral prior, and deformation penalty.
//!
//! The scalar objective is
//!
//! ```text
//! E = E_align + E_flame + E_temp + E_mica + E_deform
//! ```
//!
//! with
//!
//! * `E_align  = sum_{i,j,t} lambda_i ||x2d - mu||^2 / (2 sigma^2)` over all
//!   observations, where `x2d` is the projection of vertex `i` into camera
//!   `j` at frame `t`;
//! * `E_flame  = lambda_flame (||beta||^2 + sum_t ||phi_t||^2)` (joint poses
//!   and head transforms are not penalized);
//! * `E_temp   = lambda_temp sum_{i, t} || x3d_{t-1} - 2 x3d_t + x3d_{t+1} ||^2`,
//!   a squared acceleration over world-space trajectories;
//! * `E_mica   = lambda_mica || neutral(beta, delta) - template ||^2`;
//! * `E_deform = lambda_deform ||delta_d||^2`.
//!
//! Projections behind a camera contribute zero to the alignment term and
//! are counted instead of raising errors, which keeps the objective
//! continuous while a pose swings through a degenerate configuration.
//!
//! Every public per-term function routes through the same internal code as
//! [`total_energy`], so the total is bit-exactly the sum of the terms.

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::config::EnergyConfig;
use crate::error::{Error, Result};
use crate::model::{blendshape_vertices, lbs_forward, BlendshapeModel, LbsForward};
use crate::tracking::{SequenceDataset, TrackingParams};

/// Per-term energies of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub alignment: f64,
    pub flame: f64,
    pub temporal: f64,
    pub mica: f64,
    pub deform: f64,
    /// Observations whose vertex projected behind a camera (zero-weighted).
    pub invalid_projections: usize,
    /// The neutral prior was requested (lambda_mica > 0) but no template is
    /// configured; the term is zero.
    pub mica_missing: bool,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.alignment + self.flame + self.temporal + self.mica + self.deform
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        for (name, v) in [
            ("alignment", self.alignment),
            ("flame", self.flame),
            ("temporal", self.temporal),
            ("mica", self.mica),
            ("deform", self.deform),
        ] {
            if !v.is_finite() {
                return Some(name);
            }
        }
        None
    }
}

/// Cached per-frame geometry shared between the energy terms and the
/// backward pass.
pub(crate) struct FrameState {
    /// Blendshaped vertices before skinning; kept when skinning state is kept.
    pub rest: Option<Vec<Vector3<f64>>>,
    /// Forward-kinematics state, kept when the backward pass needs it.
    pub lbs: Option<LbsForward>,
    /// Local model vertices (after skinning and static deformations).
    pub model_v: Vec<Vector3<f64>>,
    /// World-space vertices (head pose applied).
    pub world: Vec<Vector3<f64>>,
    pub head_rot: Matrix3<f64>,
}

pub(crate) fn check_problem(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
) -> Result<()> {
    params.validate(model)?;
    if dataset.n_vertices != model.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "dataset indexes {} vertices, model has {}",
            dataset.n_vertices,
            model.n_vertices()
        )));
    }
    if dataset.n_cameras() != params.cameras.len() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} cameras, params have {}",
            dataset.n_cameras(),
            params.cameras.len()
        )));
    }
    if dataset.n_frames != params.n_frames() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} frames, params have {}",
            dataset.n_frames,
            params.n_frames()
        )));
    }
    Ok(())
}

/// Evaluate the per-frame geometry. `keep_grad_state` retains what the
/// backward pass needs; `theta_free` additionally forces forward-kinematics
/// state even at exactly zero pose so pose gradients can be formed.
pub(crate) fn forward_frames(
    model: &BlendshapeModel,
    params: &TrackingParams,
    keep_grad_state: bool,
    theta_free: bool,
) -> Result<Vec<FrameState>> {
    let order = model.joint_order()?;
    (0..params.n_frames())
        .into_par_iter()
        .map(|t| {
            let rest = blendshape_vertices(model, &params.beta, &params.phi[t]);
            let theta = &params.theta[t];
            let theta_zero = theta.iter().all(|&x| x == 0.0);
            let need_state = keep_grad_state && (!theta_zero || theta_free);
            let (posed, lbs, rest_kept) = if theta_zero {
                if need_state {
                    let (_, fwd) = lbs_forward(model, &rest, theta, &order);
                    (rest.clone(), Some(fwd), Some(rest))
                } else {
                    (rest, None, None)
                }
            } else {
                let (posed, fwd) = lbs_forward(model, &rest, theta, &order);
                if need_state {
                    (posed, Some(fwd), Some(rest))
                } else {
                    (posed, None, None)
                }
            };
            let mut model_v = posed;
            for (v, d) in model_v.iter_mut().zip(&params.delta_d) {
                *v += d;
            }
            let head_rot = params.head_pose[t].rotation_matrix();
            let head_t = params.head_pose[t].translation;
            let world: Vec<Vector3<f64>> =
                model_v.iter().map(|p| head_rot * p + head_t).collect();
            Ok(FrameState { rest: rest_kept, lbs, model_v, world, head_rot })
        })
        .collect()
}

/// Alignment energy over all observations, plus the count of projections
/// that fell behind a camera.
pub(crate) fn alignment_term(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
    states: &[FrameState],
) -> (f64, usize) {
    let partials: Vec<(f64, usize)> = (0..dataset.n_frames)
        .into_par_iter()
        .map(|t| {
            let mut e = 0.0;
            let mut invalid = 0usize;
            for (j, cam) in params.cameras.iter().enumerate() {
                let r = cam.extrinsics.rotation_matrix();
                let tc = cam.extrinsics.translation;
                for obs in dataset.frame_camera_observations(t, j) {
                    let p = r * states[t].world[obs.vertex as usize] + tc;
                    if p.z <= crate::camera::DEPTH_EPS {
                        invalid += 1;
                        continue;
                    }
                    let inv_z = 1.0 / p.z;
                    let du = cam.focal * p.x * inv_z + cam.principal_point.x - obs.mu.x;
                    let dv = cam.focal * p.y * inv_z + cam.principal_point.y - obs.mu.y;
                    let weight = model.vertex_weights[obs.vertex as usize]
                        / (2.0 * obs.sigma * obs.sigma);
                    e += weight * (du * du + dv * dv);
                }
            }
            (e, invalid)
        })
        .collect();
    // Reduce in frame order so the sum is independent of thread scheduling.
    partials.into_iter().fold((0.0, 0), |(e, n), (pe, pn)| (e + pe, n + pn))
}

pub(crate) fn flame_term(params: &TrackingParams, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut sum = params.beta.norm_squared();
    for phi in &params.phi {
        sum += phi.norm_squared();
    }
    lambda * sum
}

pub(crate) fn temporal_term(states: &[FrameState], lambda: f64) -> f64 {
    let f = states.len();
    if lambda == 0.0 || f < 3 {
        return 0.0;
    }
    let partials: Vec<f64> = (1..f - 1)
        .into_par_iter()
        .map(|t| {
            let mut e = 0.0;
            let (prev, cur, next) = (&states[t - 1].world, &states[t].world, &states[t + 1].world);
            for i in 0..cur.len() {
                let acc = prev[i] - cur[i] * 2.0 + next[i];
                e += acc.norm_squared();
            }
            e
        })
        .collect();
    lambda * partials.into_iter().sum::<f64>()
}

/// Neutral-prior residuals: `neutral(beta, delta) - template`, or `None`
/// when no template is configured.
pub(crate) fn mica_residuals(
    model: &BlendshapeModel,
    params: &TrackingParams,
    config: &EnergyConfig,
) -> Result<Option<Vec<Vector3<f64>>>> {
    let template = match &config.mica_template {
        None => return Ok(None),
        Some(t) => t,
    };
    if template.len() != model.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "neutral template has {} vertices, model has {}",
            template.len(),
            model.n_vertices()
        )));
    }
    let n = model.n_vertices();
    let mut d = DVector::zeros(3 * n);
    d.gemv(1.0, &model.identity_basis, &params.beta, 0.0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let neutral = model.template[i]
            + Vector3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2])
            + params.delta_d[i];
        out.push(neutral - template.positions[i]);
    }
    Ok(Some(out))
}

pub(crate) fn mica_term(
    model: &BlendshapeModel,
    params: &TrackingParams,
    config: &EnergyConfig,
) -> Result<(f64, bool)> {
    if config.lambda_mica == 0.0 {
        return Ok((0.0, false));
    }
    match mica_residuals(model, params, config)? {
        None => Ok((0.0, true)),
        Some(res) => {
            let sum: f64 = res.iter().map(|r| r.norm_squared()).sum();
            Ok((config.lambda_mica * sum, false))
        }
    }
}

pub(crate) fn deform_term(params: &TrackingParams, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * params.delta_d.iter().map(|d| d.norm_squared()).sum::<f64>()
}

pub(crate) fn breakdown_from_states(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
    states: &[FrameState],
) -> Result<EnergyBreakdown> {
    let (alignment, invalid) = alignment_term(model, params, dataset, states);
    let (mica, mica_missing) = mica_term(model, params, config)?;
    Ok(EnergyBreakdown {
        alignment,
        flame: flame_term(params, config.lambda_flame),
        temporal: temporal_term(states, config.lambda_temp),
        mica,
        deform: deform_term(params, config.lambda_deform),
        invalid_projections: invalid,
        mica_missing,
    })
}

/// The full objective and its per-term breakdown.
pub fn total_energy(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
) -> Result<(f64, EnergyBreakdown)> {
    check_problem(model, params, dataset)?;
    let states = forward_frames(model, params, false, false)?;
    let breakdown = breakdown_from_states(model, params, dataset, config, &states)?;
    Ok((breakdown.total(), breakdown))
}

/// Alignment term alone (Gaussian negative-log-likelihood of the
/// observations, up to the constant log-sigma part).
pub fn energy_alignment(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
) -> Result<f64> {
    check_problem(model, params, dataset)?;
    let states = forward_frames(model, params, false, false)?;
    Ok(alignment_term(model, params, dataset, &states).0)
}

/// Identity/expression magnitude penalty.
pub fn energy_flame_reg(params: &TrackingParams, config: &EnergyConfig) -> f64 {
    flame_term(params, config.lambda_flame)
}

/// Squared second differences of world-space vertex trajectories. Zero for
/// sequences shorter than three frames.
pub fn energy_temporal(
    model: &BlendshapeModel,
    params: &TrackingParams,
    config: &EnergyConfig,
) -> Result<f64> {
    params.validate(model)?;
    let states = forward_frames(model, params, false, false)?;
    Ok(temporal_term(&states, config.lambda_temp))
}

/// Neutral-geometry prior. Zero (with a flag in the breakdown) when no
/// template is configured.
pub fn energy_mica(
    model: &BlendshapeModel,
    params: &TrackingParams,
    config: &EnergyConfig,
) -> Result<f64> {
    Ok(mica_term(model, params, config)?.0)
}

/// Static-deformation magnitude penalty.
pub fn energy_deform(params: &TrackingParams, config: &EnergyConfig) -> f64 {
    deform_term(params, config.lambda_deform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Camera, RigidTransform};
    use crate::model::{Region, VertexSet};
    use crate::procedural::miniature_head;
    use crate::synth::{generate_sequence, SynthSpec};
    use crate::tracking::AlignmentObservation;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Vector2};

    /// One vertex at the origin, one joint, weight 1: the smallest model on
    /// which every term is hand-computable.
    fn point_model() -> BlendshapeModel {
        let model = BlendshapeModel {
            template: vec![Vector3::zeros()],
            identity_basis: DMatrix::zeros(3, 1),
            expression_basis: DMatrix::zeros(3, 1),
            joint_regressor: DMatrix::from_element(1, 1, 1.0),
            skin_weights: DMatrix::from_element(1, 1, 1.0),
            joint_parents: vec![None],
            vertex_weights: vec![1.0],
            region_labels: vec![Region::Face],
            uv_coords: vec![[0.5, 0.5]],
            triangles: vec![],
        };
        model.validate().unwrap();
        model
    }

    fn pp_zero_camera(focal: f64) -> Camera {
        let mut cam = Camera::new(RigidTransform::identity(), focal, [512, 512]);
        cam.principal_point = Vector2::zeros();
        cam
    }

    fn single_obs_dataset(mu: Vector2<f64>, sigma: f64) -> SequenceDataset {
        SequenceDataset::new(
            vec![pp_zero_camera(100.0)],
            vec![true],
            1,
            1,
            vec![AlignmentObservation { vertex: 0, camera: 0, frame: 0, mu, sigma }],
            None,
            None,
        )
        .unwrap()
    }

    fn params_at(model: &BlendshapeModel, z: f64, cams: Vec<Camera>, frames: usize) -> TrackingParams {
        let mut p = TrackingParams::new_zeroed(model, frames, cams);
        for pose in p.head_pose.iter_mut() {
            pose.translation = Vector3::new(0.0, 0.0, z);
        }
        p
    }

    #[test]
    fn alignment_zero_when_projections_match() {
        let model = miniature_head();
        let (ds, gt) = generate_sequence(&model, &SynthSpec { frames: 3, ..Default::default() }).unwrap();
        assert_eq!(energy_alignment(&model, &gt, &ds).unwrap(), 0.0);
    }

    #[test]
    fn alignment_hand_values() {
        let model = point_model();
        // Vertex sits on the optical axis at depth 1; pixel = (0, 0).
        let params = params_at(&model, 1.0, vec![pp_zero_camera(100.0)], 1);
        // Offset (1, 0) px, sigma 1 -> 1/(2*1) = 0.5.
        let ds = single_obs_dataset(Vector2::new(1.0, 0.0), 1.0);
        assert_relative_eq!(energy_alignment(&model, &params, &ds).unwrap(), 0.5, epsilon = 1e-15);
        // Same offset, sigma 2 -> 1/(2*4) = 0.125.
        let ds = single_obs_dataset(Vector2::new(1.0, 0.0), 2.0);
        assert_relative_eq!(energy_alignment(&model, &params, &ds).unwrap(), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn alignment_counts_behind_camera_as_invalid() {
        let model = point_model();
        // Head placed behind the camera.
        let params = params_at(&model, -1.0, vec![pp_zero_camera(100.0)], 1);
        let ds = single_obs_dataset(Vector2::new(3.0, 4.0), 1.0);
        let config = EnergyConfig::default();
        let (total, breakdown) = total_energy(&model, &params, &ds, &config).unwrap();
        assert_eq!(breakdown.alignment, 0.0);
        assert_eq!(breakdown.invalid_projections, 1);
        assert!(total.is_finite());
    }

    #[test]
    fn flame_hand_values() {
        let model = point_model();
        let mut params = params_at(&model, 1.0, vec![pp_zero_camera(100.0)], 1);
        let mut config = EnergyConfig::default();

        config.lambda_flame = 1.0;
        assert_eq!(energy_flame_reg(&params, &config), 0.0);

        params.beta[0] = 1.0; // unit vector in the 1-dim basis
        assert_relative_eq!(energy_flame_reg(&params, &config), 1.0, epsilon = 1e-15);

        params.beta[0] = 0.0;
        params.phi[0][0] = 3.0_f64.sqrt(); // ||phi||^2 = 3
        config.lambda_flame = 2.0;
        assert_relative_eq!(energy_flame_reg(&params, &config), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn temporal_hand_values() {
        let model = point_model();
        let cams = vec![pp_zero_camera(100.0)];
        let mut config = EnergyConfig::default();
        config.lambda_temp = 1.0;

        // Positions 0, 0, 1 along x: second difference has norm 1.
        let mut params = params_at(&model, 0.0, cams.clone(), 3);
        params.head_pose[2].translation = Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(energy_temporal(&model, &params, &config).unwrap(), 1.0, epsilon = 1e-15);

        // Constant velocity: exactly zero.
        for (t, pose) in params.head_pose.iter_mut().enumerate() {
            pose.translation = Vector3::new(0.1 * t as f64, 0.0, 0.0);
        }
        assert_eq!(energy_temporal(&model, &params, &config).unwrap(), 0.0);

        // Fewer than three frames: no interior frame.
        let params = params_at(&model, 0.0, cams, 2);
        assert_eq!(energy_temporal(&model, &params, &config).unwrap(), 0.0);
    }

    #[test]
    fn mica_hand_values() {
        let model = point_model();
        let params = params_at(&model, 0.0, vec![pp_zero_camera(100.0)], 1);
        let mut config = EnergyConfig::default();
        config.lambda_mica = 1.0;

        // Template equal to the neutral model.
        config.mica_template = Some(VertexSet::new(vec![Vector3::zeros()]));
        assert_eq!(energy_mica(&model, &params, &config).unwrap(), 0.0);

        // One vertex offset by (0, 0, 0.01): squared distance 1e-4.
        config.mica_template = Some(VertexSet::new(vec![Vector3::new(0.0, 0.0, 0.01)]));
        assert_relative_eq!(energy_mica(&model, &params, &config).unwrap(), 1e-4, epsilon = 1e-18);

        // No template: zero with the flag set in the breakdown.
        config.mica_template = None;
        assert_eq!(energy_mica(&model, &params, &config).unwrap(), 0.0);
        let ds = single_obs_dataset(Vector2::zeros(), 1.0);
        let params1 = params_at(&model, 1.0, vec![pp_zero_camera(100.0)], 1);
        let (_, breakdown) = total_energy(&model, &params1, &ds, &config).unwrap();
        assert!(breakdown.mica_missing);

        // Wrong template size is an error.
        config.mica_template = Some(VertexSet::zeros(2));
        assert!(energy_mica(&model, &params, &config).is_err());
    }

    #[test]
    fn deform_hand_values() {
        let model = point_model();
        let mut params = params_at(&model, 0.0, vec![pp_zero_camera(100.0)], 1);
        let mut config = EnergyConfig::default();
        config.lambda_deform = 1.0;
        assert_eq!(energy_deform(&params, &config), 0.0);

        params.delta_d[0] = Vector3::new(3e-3, 0.0, 4e-3);
        assert_relative_eq!(energy_deform(&params, &config), 2.5e-5, epsilon = 1e-19);

        config.lambda_deform = 0.0;
        assert_eq!(energy_deform(&params, &config), 0.0);
    }

    #[test]
    fn total_is_bit_exact_sum_of_terms() {
        let model = miniature_head();
        let (ds, mut params) =
            generate_sequence(&model, &SynthSpec { frames: 4, sigma_obs: 1.0, seed: 3, ..Default::default() })
                .unwrap();
        // Make every term non-zero.
        params.delta_d[7] = Vector3::new(1e-3, -2e-3, 0.5e-3);
        let mut config = EnergyConfig::default();
        config.mica_template = ds.mica_template.clone();
        config.lambda_flame = 0.37;
        config.lambda_temp = 2.5;
        config.lambda_mica = 11.0;
        config.lambda_deform = 800.0;

        let (total, breakdown) = total_energy(&model, &params, &ds, &config).unwrap();
        let sum = energy_alignment(&model, &params, &ds).unwrap()
            + energy_flame_reg(&params, &config)
            + energy_temporal(&model, &params, &config).unwrap()
            + energy_mica(&model, &params, &config).unwrap()
            + energy_deform(&params, &config);
        assert_eq!(total, sum);
        assert_eq!(total, breakdown.total());
        for term in [breakdown.alignment, breakdown.flame, breakdown.temporal, breakdown.mica, breakdown.deform]
        {
            assert!(term >= 0.0);
        }
        assert!(total > 0.0);
    }

    #[test]
    fn observation_order_does_not_change_energy() {
        let model = miniature_head();
        let (ds, params) =
            generate_sequence(&model, &SynthSpec { frames: 3, sigma_obs: 2.0, seed: 9, ..Default::default() })
                .unwrap();
        let mut shuffled = ds.observations().to_vec();
        shuffled.reverse();
        let mid = shuffled.len() / 2;
        shuffled.swap(0, mid);
        let ds2 = SequenceDataset::new(
            ds.cameras.clone(),
            ds.calibrated.clone(),
            ds.n_frames,
            ds.n_vertices,
            shuffled,
            ds.mica_template.clone(),
            None,
        )
        .unwrap();
        let config = EnergyConfig::default();
        let (a, _) = total_energy(&model, &params, &ds, &config).unwrap();
        let (b, _) = total_energy(&model, &params, &ds2, &config).unwrap();
        assert_eq!(a, b);
    }

    /// Straightforward re-evaluation of the whole objective with independent
    /// rotation handling (nalgebra's quaternion-backed `Rotation3`), used as
    /// a brute-force oracle for a fixture exercising every term.
    #[test]
    fn total_matches_independent_reevaluation() {
        use nalgebra::Rotation3;

        let model = miniature_head();
        let (ds, mut params) =
            generate_sequence(&model, &SynthSpec { frames: 4, sigma_obs: 1.5, seed: 21, ..Default::default() })
                .unwrap();
        params.delta_d[11] = Vector3::new(-1e-3, 2e-3, 3e-3);
        params.delta_d[100] = Vector3::new(5e-4, 0.0, -5e-4);
        let mut config = EnergyConfig::default();
        config.mica_template = ds.mica_template.clone();
        config.lambda_flame = 0.01;
        config.lambda_temp = 5.0;
        config.lambda_mica = 40.0;
        config.lambda_deform = 100.0;

        let n = model.n_vertices();
        // Local vertices per frame: template + bases + delta (theta is 0).
        let mut world_frames: Vec<Vec<Vector3<f64>>> = Vec::new();
        for t in 0..ds.n_frames {
            let mut verts = Vec::with_capacity(n);
            for i in 0..n {
                let mut p = model.template[i];
                for b in 0..model.b_id() {
                    p += Vector3::new(
                        model.identity_basis[(3 * i, b)],
                        model.identity_basis[(3 * i + 1, b)],
                        model.identity_basis[(3 * i + 2, b)],
                    ) * params.beta[b];
                }
                for b in 0..model.b_ex() {
                    p += Vector3::new(
                        model.expression_basis[(3 * i, b)],
                        model.expression_basis[(3 * i + 1, b)],
                        model.expression_basis[(3 * i + 2, b)],
                    ) * params.phi[t][b];
                }
                p += params.delta_d[i];
                let rot = Rotation3::from_scaled_axis(params.head_pose[t].rotation);
                verts.push(rot * p + params.head_pose[t].translation);
            }
            world_frames.push(verts);
        }

        let mut e_align = 0.0;
        for obs in ds.observations() {
            let cam = &params.cameras[obs.camera as usize];
            let rot = Rotation3::from_scaled_axis(cam.extrinsics.rotation);
            let p = rot * world_frames[obs.frame as usize][obs.vertex as usize]
                + cam.extrinsics.translation;
            assert!(p.z > 0.0);
            let pix = Vector2::new(
                cam.focal * p.x / p.z + cam.principal_point.x,
                cam.focal * p.y / p.z + cam.principal_point.y,
            );
            let lambda = model.vertex_weights[obs.vertex as usize];
            e_align += lambda * (pix - obs.mu).norm_squared() / (2.0 * obs.sigma * obs.sigma);
        }

        let mut e_flame = params.beta.norm_squared();
        for phi in &params.phi {
            e_flame += phi.norm_squared();
        }
        e_flame *= config.lambda_flame;

        let mut e_temp = 0.0;
        for t in 1..ds.n_frames - 1 {
            for i in 0..n {
                e_temp += (world_frames[t - 1][i] - world_frames[t][i] * 2.0
                    + world_frames[t + 1][i])
                    .norm_squared();
            }
        }
        e_temp *= config.lambda_temp;

        let template = config.mica_template.as_ref().unwrap();
        let mut e_mica = 0.0;
        for i in 0..n {
            let mut neutral = model.template[i];
            for b in 0..model.b_id() {
                neutral += Vector3::new(
                    model.identity_basis[(3 * i, b)],
                    model.identity_basis[(3 * i + 1, b)],
                    model.identity_basis[(3 * i + 2, b)],
                ) * params.beta[b];
            }
            neutral += params.delta_d[i];
            e_mica += (neutral - template.positions[i]).norm_squared();
        }
        e_mica *= config.lambda_mica;

        let e_deform =
            config.lambda_deform * params.delta_d.iter().map(|d| d.norm_squared()).sum::<f64>();

        let expected = e_align + e_flame + e_temp + e_mica + e_deform;
        let (total, _) = total_energy(&model, &params, &ds, &config).unwrap();
        assert_relative_eq!(total, expected, max_relative = 1e-9);
    }
}
