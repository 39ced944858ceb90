//! Analytic gradient of the tracking energy over all free parameters.
//!
//! The energy is differentiated by hand, stage by stage, in reverse:
//! alignment residuals pull back through the pinhole projection, camera
//! extrinsics, head pose, static deformations, skinning, and finally the
//! blendshape bases; the regularizer terms contribute directly. Frozen
//! parameter groups are simply not part of the packed vector, so they can
//! never receive an update.
//!
//! [`finite_difference_gradient`] provides the independent slow path used
//! by `gradcheck` and the test suite.

use nalgebra::{DVector, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::DEPTH_EPS;
use crate::config::EnergyConfig;
use crate::energy::{
    breakdown_from_states, check_problem, forward_frames, total_energy, EnergyBreakdown,
};
use crate::error::{Error, Result};
use crate::model::{lbs_backward, BlendshapeModel};
use crate::rotation::rotation_jacobians;
use crate::tracking::{SequenceDataset, TrackingParams};

/// Describes which parameters are free and where each group lives in the
/// packed optimization vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub n_frames: usize,
    pub b_id: usize,
    pub b_ex: usize,
    pub theta_len: usize,
    pub free_beta: bool,
    pub free_phi: bool,
    pub free_theta: bool,
    pub free_head_pose: bool,
    /// Vertices whose static deformation is optimized.
    pub deform_free: Vec<usize>,
    /// Full per-vertex deformation mask (true = free).
    pub deform_mask: Vec<bool>,
    pub cam_ext_free: Vec<bool>,
    pub cam_focal_free: Vec<bool>,
    off_beta: usize,
    off_phi: usize,
    off_theta: usize,
    off_delta: usize,
    off_head: usize,
    cam_offsets: Vec<usize>,
    len: usize,
}

impl ParamLayout {
    pub fn new(
        model: &BlendshapeModel,
        dataset: &SequenceDataset,
        config: &EnergyConfig,
    ) -> Result<Self> {
        let deform_mask = config.resolve_deformable_mask(model)?;
        let deform_free: Vec<usize> =
            deform_mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        let cam_ext_free: Vec<bool> = dataset
            .calibrated
            .iter()
            .map(|&calibrated| !calibrated && !config.freeze_camera_extrinsics)
            .collect();
        let cam_focal_free: Vec<bool> = dataset
            .calibrated
            .iter()
            .map(|&calibrated| !calibrated && !config.freeze_camera_focal)
            .collect();

        let n_frames = dataset.n_frames;
        let mut cursor = 0;
        let off_beta = cursor;
        if !config.freeze_beta {
            cursor += model.b_id();
        }
        let off_phi = cursor;
        if !config.freeze_phi {
            cursor += n_frames * model.b_ex();
        }
        let off_theta = cursor;
        if !config.freeze_theta {
            cursor += n_frames * model.theta_len();
        }
        let off_delta = cursor;
        cursor += 3 * deform_free.len();
        let off_head = cursor;
        if !config.freeze_head_pose {
            cursor += 6 * n_frames;
        }
        let mut cam_offsets = Vec::with_capacity(dataset.n_cameras());
        for j in 0..dataset.n_cameras() {
            cam_offsets.push(cursor);
            if cam_ext_free[j] {
                cursor += 6;
            }
            if cam_focal_free[j] {
                cursor += 1;
            }
        }
        Ok(ParamLayout {
            n_frames,
            b_id: model.b_id(),
            b_ex: model.b_ex(),
            theta_len: model.theta_len(),
            free_beta: !config.freeze_beta,
            free_phi: !config.freeze_phi,
            free_theta: !config.freeze_theta,
            free_head_pose: !config.freeze_head_pose,
            deform_free,
            deform_mask,
            cam_ext_free,
            cam_focal_free,
            off_beta,
            off_phi,
            off_theta,
            off_delta,
            off_head,
            cam_offsets,
            len: cursor,
        })
    }

    /// Number of free scalar parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Flatten the free parameters into an optimization vector.
    pub fn pack(&self, params: &TrackingParams) -> DVector<f64> {
        let mut x = DVector::zeros(self.len);
        if self.free_beta {
            x.rows_mut(self.off_beta, self.b_id).copy_from(&params.beta);
        }
        if self.free_phi {
            for (t, phi) in params.phi.iter().enumerate() {
                x.rows_mut(self.off_phi + t * self.b_ex, self.b_ex).copy_from(phi);
            }
        }
        if self.free_theta {
            for (t, theta) in params.theta.iter().enumerate() {
                x.rows_mut(self.off_theta + t * self.theta_len, self.theta_len).copy_from(theta);
            }
        }
        for (slot, &vi) in self.deform_free.iter().enumerate() {
            let base = self.off_delta + 3 * slot;
            for a in 0..3 {
                x[base + a] = params.delta_d[vi][a];
            }
        }
        if self.free_head_pose {
            for (t, pose) in params.head_pose.iter().enumerate() {
                let base = self.off_head + 6 * t;
                for a in 0..3 {
                    x[base + a] = pose.rotation[a];
                    x[base + 3 + a] = pose.translation[a];
                }
            }
        }
        for (j, cam) in params.cameras.iter().enumerate() {
            let mut base = self.cam_offsets[j];
            if self.cam_ext_free[j] {
                for a in 0..3 {
                    x[base + a] = cam.extrinsics.rotation[a];
                    x[base + 3 + a] = cam.extrinsics.translation[a];
                }
                base += 6;
            }
            if self.cam_focal_free[j] {
                x[base] = cam.focal;
            }
        }
        x
    }

    /// Rebuild full tracking parameters from a packed vector; frozen groups
    /// keep the values they have in `base`.
    pub fn unpack(&self, x: &DVector<f64>, base: &TrackingParams) -> TrackingParams {
        let mut p = base.clone();
        if self.free_beta {
            p.beta.copy_from(&x.rows(self.off_beta, self.b_id));
        }
        if self.free_phi {
            for (t, phi) in p.phi.iter_mut().enumerate() {
                phi.copy_from(&x.rows(self.off_phi + t * self.b_ex, self.b_ex));
            }
        }
        if self.free_theta {
            for (t, theta) in p.theta.iter_mut().enumerate() {
                theta.copy_from(&x.rows(self.off_theta + t * self.theta_len, self.theta_len));
            }
        }
        for (slot, &vi) in self.deform_free.iter().enumerate() {
            let base_idx = self.off_delta + 3 * slot;
            p.delta_d[vi] = Vector3::new(x[base_idx], x[base_idx + 1], x[base_idx + 2]);
        }
        if self.free_head_pose {
            for (t, pose) in p.head_pose.iter_mut().enumerate() {
                let b = self.off_head + 6 * t;
                pose.rotation = Vector3::new(x[b], x[b + 1], x[b + 2]);
                pose.translation = Vector3::new(x[b + 3], x[b + 4], x[b + 5]);
            }
        }
        for (j, cam) in p.cameras.iter_mut().enumerate() {
            let mut b = self.cam_offsets[j];
            if self.cam_ext_free[j] {
                cam.extrinsics.rotation = Vector3::new(x[b], x[b + 1], x[b + 2]);
                cam.extrinsics.translation = Vector3::new(x[b + 3], x[b + 4], x[b + 5]);
                b += 6;
            }
            if self.cam_focal_free[j] {
                cam.focal = x[b];
            }
        }
        p
    }

    /// Zero out deformation entries outside the free mask (they are
    /// hard-clamped, not merely penalized).
    pub fn clamp_deformations(&self, params: &mut TrackingParams) {
        for (i, free) in self.deform_mask.iter().enumerate() {
            if !free {
                params.delta_d[i] = Vector3::zeros();
            }
        }
    }
}

struct CameraCache {
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
    focal: f64,
    pp: nalgebra::Vector2<f64>,
    jacs: Option<[Matrix3<f64>; 3]>,
}

/// Per-frame gradient contributions, reduced in frame order afterwards.
struct FrameGrads {
    beta: Option<DVector<f64>>,
    phi: Option<DVector<f64>>,
    theta: Option<DVector<f64>>,
    head_rot: Vector3<f64>,
    head_trans: Vector3<f64>,
    delta: Vec<Vector3<f64>>,
    cam_rot: Vec<Vector3<f64>>,
    cam_trans: Vec<Vector3<f64>>,
    cam_focal: Vec<f64>,
}

/// Energy breakdown and packed analytic gradient at `params`.
pub fn gradient(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
) -> Result<(EnergyBreakdown, DVector<f64>)> {
    let layout = ParamLayout::new(model, dataset, config)?;
    gradient_with_layout(model, params, dataset, config, &layout)
}

pub fn gradient_with_layout(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
    layout: &ParamLayout,
) -> Result<(EnergyBreakdown, DVector<f64>)> {
    check_problem(model, params, dataset)?;
    let states = forward_frames(model, params, true, layout.free_theta)?;
    let breakdown = breakdown_from_states(model, params, dataset, config, &states)?;

    let cams: Vec<CameraCache> = params
        .cameras
        .iter()
        .enumerate()
        .map(|(j, cam)| CameraCache {
            rot: cam.extrinsics.rotation_matrix(),
            trans: cam.extrinsics.translation,
            focal: cam.focal,
            pp: cam.principal_point,
            jacs: layout.cam_ext_free[j].then(|| rotation_jacobians(&cam.extrinsics.rotation)),
        })
        .collect();

    let n = model.n_vertices();
    let f = params.n_frames();
    let lambda_temp = config.lambda_temp;

    // Second difference of the world trajectory at interior frames.
    let second_diff = |t: i64, i: usize| -> Vector3<f64> {
        if t >= 1 && (t as usize) + 1 < f {
            let t = t as usize;
            states[t - 1].world[i] - states[t].world[i] * 2.0 + states[t + 1].world[i]
        } else {
            Vector3::zeros()
        }
    };

    let frame_grads: Vec<FrameGrads> = (0..f)
        .into_par_iter()
        .map(|t| {
            let state = &states[t];
            let mut g_world = vec![Vector3::zeros(); n];
            let mut cam_rot = vec![Vector3::zeros(); cams.len()];
            let mut cam_trans = vec![Vector3::zeros(); cams.len()];
            let mut cam_focal = vec![0.0; cams.len()];

            // Alignment term: pull residuals back through the projection.
            for (j, cam) in cams.iter().enumerate() {
                for obs in dataset.frame_camera_observations(t, j) {
                    let v = obs.vertex as usize;
                    let world_pt = state.world[v];
                    let p = cam.rot * world_pt + cam.trans;
                    if p.z <= DEPTH_EPS {
                        continue; // zero-weighted, matching the energy
                    }
                    let inv_z = 1.0 / p.z;
                    let du = cam.focal * p.x * inv_z + cam.pp.x - obs.mu.x;
                    let dv = cam.focal * p.y * inv_z + cam.pp.y - obs.mu.y;
                    let w = model.vertex_weights[v] / (obs.sigma * obs.sigma);
                    let gu = w * du;
                    let gv = w * dv;
                    // d pixel / d camera-space point.
                    let gp = Vector3::new(
                        gu * cam.focal * inv_z,
                        gv * cam.focal * inv_z,
                        -(gu * p.x + gv * p.y) * cam.focal * inv_z * inv_z,
                    );
                    g_world[v] += cam.rot.transpose() * gp;
                    if let Some(jacs) = &cam.jacs {
                        for a in 0..3 {
                            cam_rot[j][a] += gp.dot(&(jacs[a] * world_pt));
                        }
                        cam_trans[j] += gp;
                    }
                    if layout.cam_focal_free[j] {
                        cam_focal[j] += (gu * p.x + gv * p.y) * inv_z;
                    }
                }
            }

            // Temporal term: each world position appears in up to three
            // second differences.
            if lambda_temp > 0.0 && f >= 3 {
                let ti = t as i64;
                for i in 0..n {
                    let g = second_diff(ti - 1, i) - second_diff(ti, i) * 2.0
                        + second_diff(ti + 1, i);
                    g_world[i] += g * (2.0 * lambda_temp);
                }
            }

            // Head pose.
            let mut head_rot = Vector3::zeros();
            let mut head_trans = Vector3::zeros();
            if layout.free_head_pose {
                let jacs = rotation_jacobians(&params.head_pose[t].rotation);
                for i in 0..n {
                    head_trans += g_world[i];
                    for a in 0..3 {
                        head_rot[a] += g_world[i].dot(&(jacs[a] * state.model_v[i]));
                    }
                }
            }

            // Into local model space.
            let rt = state.head_rot.transpose();
            let g_model: Vec<Vector3<f64>> = g_world.iter().map(|g| rt * g).collect();

            let delta: Vec<Vector3<f64>> =
                layout.deform_free.iter().map(|&vi| g_model[vi]).collect();

            // Through skinning into the blendshaped rest vertices.
            let (g_rest, g_theta) = match (&state.lbs, &state.rest) {
                (Some(lbs), Some(rest)) => {
                    let grads = lbs_backward(
                        model,
                        lbs,
                        &params.theta[t],
                        rest,
                        &g_model,
                        layout.free_theta,
                    );
                    (grads.rest, layout.free_theta.then_some(grads.theta))
                }
                _ => (g_model, None),
            };

            let (beta, phi) = if layout.free_beta || layout.free_phi {
                let mut flat = DVector::zeros(3 * n);
                for (i, g) in g_rest.iter().enumerate() {
                    flat[3 * i] = g.x;
                    flat[3 * i + 1] = g.y;
                    flat[3 * i + 2] = g.z;
                }
                (
                    layout.free_beta.then(|| model.identity_basis.tr_mul(&flat)),
                    layout.free_phi.then(|| model.expression_basis.tr_mul(&flat)),
                )
            } else {
                (None, None)
            };

            FrameGrads {
                beta,
                phi,
                theta: g_theta,
                head_rot,
                head_trans,
                delta,
                cam_rot,
                cam_trans,
                cam_focal,
            }
        })
        .collect();

    // Assemble the packed gradient; shared groups reduce in frame order.
    let mut g = DVector::zeros(layout.len());
    if layout.free_beta {
        let mut acc = DVector::zeros(layout.b_id);
        for fg in &frame_grads {
            acc += fg.beta.as_ref().unwrap();
        }
        acc += &params.beta * (2.0 * config.lambda_flame);
        g.rows_mut(layout.off_beta, layout.b_id).copy_from(&acc);
    }
    if layout.free_phi {
        for (t, fg) in frame_grads.iter().enumerate() {
            let mut acc = fg.phi.clone().unwrap();
            acc += &params.phi[t] * (2.0 * config.lambda_flame);
            g.rows_mut(layout.off_phi + t * layout.b_ex, layout.b_ex).copy_from(&acc);
        }
    }
    if layout.free_theta {
        for (t, fg) in frame_grads.iter().enumerate() {
            g.rows_mut(layout.off_theta + t * layout.theta_len, layout.theta_len)
                .copy_from(fg.theta.as_ref().unwrap());
        }
    }
    if !layout.deform_free.is_empty() {
        let mut acc = vec![Vector3::zeros(); layout.deform_free.len()];
        for fg in &frame_grads {
            for (slot, d) in fg.delta.iter().enumerate() {
                acc[slot] += d;
            }
        }
        for (slot, &vi) in layout.deform_free.iter().enumerate() {
            acc[slot] += params.delta_d[vi] * (2.0 * config.lambda_deform);
        }
        if config.lambda_mica > 0.0 {
            if let Some(res) = crate::energy::mica_residuals(model, params, config)? {
                for (slot, &vi) in layout.deform_free.iter().enumerate() {
                    acc[slot] += res[vi] * (2.0 * config.lambda_mica);
                }
            }
        }
        for (slot, d) in acc.iter().enumerate() {
            let base = layout.off_delta + 3 * slot;
            for a in 0..3 {
                g[base + a] = d[a];
            }
        }
    }
    if layout.free_head_pose {
        for (t, fg) in frame_grads.iter().enumerate() {
            let base = layout.off_head + 6 * t;
            for a in 0..3 {
                g[base + a] = fg.head_rot[a];
                g[base + 3 + a] = fg.head_trans[a];
            }
        }
    }
    for j in 0..params.cameras.len() {
        let mut base = layout.cam_offsets[j];
        if layout.cam_ext_free[j] {
            let mut rot = Vector3::zeros();
            let mut trans = Vector3::zeros();
            for fg in &frame_grads {
                rot += fg.cam_rot[j];
                trans += fg.cam_trans[j];
            }
            for a in 0..3 {
                g[base + a] = rot[a];
                g[base + 3 + a] = trans[a];
            }
            base += 6;
        }
        if layout.cam_focal_free[j] {
            let mut focal = 0.0;
            for fg in &frame_grads {
                focal += fg.cam_focal[j];
            }
            g[base] = focal;
        }
    }

    // The neutral prior also pulls on beta.
    if layout.free_beta && config.lambda_mica > 0.0 {
        if let Some(res) = crate::energy::mica_residuals(model, params, config)? {
            let mut flat = DVector::zeros(3 * n);
            for (i, r) in res.iter().enumerate() {
                flat[3 * i] = r.x;
                flat[3 * i + 1] = r.y;
                flat[3 * i + 2] = r.z;
            }
            let mica_beta = model.identity_basis.tr_mul(&flat) * (2.0 * config.lambda_mica);
            let mut rows = g.rows_mut(layout.off_beta, layout.b_id);
            rows += mica_beta;
        }
    }

    Ok((breakdown, g))
}

/// Central finite differences of the total energy at the given packed
/// coordinates; the independent oracle for the analytic gradient.
pub fn finite_difference_gradient(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
    layout: &ParamLayout,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let x0 = layout.pack(params);
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        if c >= layout.len() {
            return Err(Error::InvalidData(format!(
                "coordinate {c} out of range for {} free parameters",
                layout.len()
            )));
        }
        let h = 1e-6 * x0[c].abs().max(1.0);
        let mut xp = x0.clone();
        xp[c] += h;
        let mut xm = x0.clone();
        xm[c] -= h;
        let (ep, _) = total_energy(model, &layout.unpack(&xp, params), dataset, config)?;
        let (em, _) = total_energy(model, &layout.unpack(&xm, params), dataset, config)?;
        out.push((ep - em) / (2.0 * h));
    }
    Ok(out)
}

/// Outcome of comparing the analytic gradient against finite differences on
/// a sample of coordinates.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_parameters: usize,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub fd: Vec<f64>,
}

pub fn relative_gradient_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

/// Compare the analytic gradient against central finite differences on up
/// to `max_coords` seeded-randomly chosen coordinates.
pub fn gradient_check(
    model: &BlendshapeModel,
    params: &TrackingParams,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let layout = ParamLayout::new(model, dataset, config)?;
    if layout.is_empty() {
        return Err(Error::InvalidConfig("no free parameters to check".into()));
    }
    let (_, g) = gradient_with_layout(model, params, dataset, config, &layout)?;

    let mut coords: Vec<usize> = (0..layout.len()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    let fd = finite_difference_gradient(model, params, dataset, config, &layout, &coords)?;

    let mut max_rel_error = 0.0;
    let mut worst_coordinate = coords[0];
    let analytic: Vec<f64> = coords.iter().map(|&c| g[c]).collect();
    for (k, &c) in coords.iter().enumerate() {
        let e = relative_gradient_error(analytic[k], fd[k]);
        if e > max_rel_error {
            max_rel_error = e;
            worst_coordinate = c;
        }
    }
    Ok(GradCheckReport {
        n_parameters: layout.len(),
        n_checked: coords.len(),
        max_rel_error,
        worst_coordinate,
        coords,
        analytic,
        fd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural::miniature_head;
    use crate::synth::{generate_sequence, perturb_params, SynthSpec};

    /// A problem with every parameter group free and observations with
    /// non-zero residuals.
    fn free_problem(
        seed: u64,
    ) -> (BlendshapeModel, SequenceDataset, TrackingParams, EnergyConfig) {
        let model = miniature_head();
        let spec = SynthSpec {
            frames: 4,
            cameras: 2,
            seed,
            sigma_obs: 1.0,
            calibrated_cameras: false,
            ..Default::default()
        };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let mut config = EnergyConfig::default();
        config.freeze_theta = false;
        config.enable_delta_d = true;
        config.deformable_regions = None;
        config.mica_template = ds.mica_template.clone();
        let layout = ParamLayout::new(&model, &ds, &config).unwrap();
        let params = perturb_params(&gt, 0.05, seed ^ 0xabcd, &layout);
        (model, ds, params, config)
    }

    fn assert_grad_matches(
        model: &BlendshapeModel,
        ds: &SequenceDataset,
        params: &TrackingParams,
        config: &EnergyConfig,
        label: &str,
    ) {
        let report = gradient_check(model, params, ds, config, 80, 7).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{label}: max rel error {} at coordinate {} (analytic vs fd over {} coords)",
            report.max_rel_error,
            report.worst_coordinate,
            report.n_checked
        );
    }

    #[test]
    fn alignment_gradient_matches_fd() {
        let (model, ds, params, mut config) = free_problem(1);
        config.lambda_flame = 0.0;
        config.lambda_temp = 0.0;
        config.lambda_mica = 0.0;
        config.lambda_deform = 0.0;
        assert_grad_matches(&model, &ds, &params, &config, "alignment");
    }

    #[test]
    fn flame_gradient_matches_fd() {
        let (model, ds, params, mut config) = free_problem(2);
        config.lambda_flame = 0.5;
        config.lambda_temp = 0.0;
        config.lambda_mica = 0.0;
        config.lambda_deform = 0.0;
        let empty = SequenceDataset::new(
            ds.cameras.clone(),
            ds.calibrated.clone(),
            ds.n_frames,
            ds.n_vertices,
            vec![],
            None,
            None,
        )
        .unwrap();
        assert_grad_matches(&model, &empty, &params, &config, "flame");
    }

    #[test]
    fn temporal_gradient_matches_fd() {
        let (model, ds, params, mut config) = free_problem(3);
        config.lambda_flame = 0.0;
        config.lambda_temp = 3.0;
        config.lambda_mica = 0.0;
        config.lambda_deform = 0.0;
        let empty = SequenceDataset::new(
            ds.cameras.clone(),
            ds.calibrated.clone(),
            ds.n_frames,
            ds.n_vertices,
            vec![],
            None,
            None,
        )
        .unwrap();
        assert_grad_matches(&model, &empty, &params, &config, "temporal");
    }

    #[test]
    fn mica_gradient_matches_fd() {
        let (model, ds, params, mut config) = free_problem(4);
        config.lambda_flame = 0.0;
        config.lambda_temp = 0.0;
        config.lambda_mica = 25.0;
        config.lambda_deform = 0.0;
        let empty = SequenceDataset::new(
            ds.cameras.clone(),
            ds.calibrated.clone(),
            ds.n_frames,
            ds.n_vertices,
            vec![],
            ds.mica_template.clone(),
            None,
        )
        .unwrap();
        assert_grad_matches(&model, &empty, &params, &config, "mica");
    }

    #[test]
    fn deform_gradient_matches_fd() {
        let (model, ds, params, mut config) = free_problem(5);
        config.lambda_flame = 0.0;
        config.lambda_temp = 0.0;
        config.lambda_mica = 0.0;
        config.lambda_deform = 50.0;
        let empty = SequenceDataset::new(
            ds.cameras.clone(),
            ds.calibrated.clone(),
            ds.n_frames,
            ds.n_vertices,
            vec![],
            None,
            None,
        )
        .unwrap();
        assert_grad_matches(&model, &empty, &params, &config, "deform");
    }

    #[test]
    fn total_gradient_matches_fd() {
        let (model, ds, params, mut config) = free_problem(6);
        config.lambda_flame = 0.1;
        config.lambda_temp = 2.0;
        config.lambda_mica = 10.0;
        config.lambda_deform = 30.0;
        assert_grad_matches(&model, &ds, &params, &config, "total");
    }

    #[test]
    fn gradient_vanishes_at_noiseless_optimum() {
        let model = miniature_head();
        let spec = SynthSpec { frames: 3, cameras: 2, seed: 8, ..Default::default() };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let mut config = EnergyConfig::default();
        config.lambda_flame = 0.0;
        config.lambda_temp = 0.0;
        config.lambda_mica = 0.0;
        config.lambda_deform = 0.0;
        let (breakdown, g) = gradient(&model, &gt, &ds, &config).unwrap();
        assert_eq!(breakdown.total(), 0.0);
        assert!(g.norm() < 1e-8, "gradient norm {}", g.norm());
    }

    #[test]
    fn pack_unpack_round_trips_and_preserves_frozen_groups() {
        let (model, ds, params, config) = free_problem(9);
        let layout = ParamLayout::new(&model, &ds, &config).unwrap();
        let x = layout.pack(&params);
        assert_eq!(layout.unpack(&x, &params), params);

        // Default config freezes theta and nothing else of the model groups.
        let frozen = EnergyConfig::default();
        let layout2 = ParamLayout::new(&model, &ds, &frozen).unwrap();
        assert!(layout2.len() < layout.len());
        let mut x2 = layout2.pack(&params);
        for v in x2.iter_mut() {
            *v += 1.0;
        }
        let moved = layout2.unpack(&x2, &params);
        // Frozen groups are bit-identical to the base.
        assert_eq!(moved.theta, params.theta);
        assert_eq!(moved.delta_d, params.delta_d);
        assert_ne!(moved.beta, params.beta);
    }
}
