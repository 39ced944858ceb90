//! The fitting loop: adaptive-moment first-order descent over the packed
//! free parameters with a reduce-on-plateau learning-rate schedule.
//!
//! Weight decay is zero (regularization lives in the energy itself) and the
//! moment coefficients are the conventional 0.9 / 0.999. The learning rate
//! starts at `learning_rate_init`, is multiplied by `lr_decay` whenever the
//! best energy has not improved for `lr_patience` steps, and the fit stops
//! once it falls below `lr_floor` or `max_iters` is exhausted. The returned
//! parameters are the best ones seen, so the final energy can never exceed
//! the initial one.

use nalgebra::{DVector, Vector3};

use crate::config::EnergyConfig;
use crate::energy::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::gradient::{gradient_with_layout, ParamLayout};
use crate::model::BlendshapeModel;
use crate::tracking::{SequenceDataset, TrackingParams};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Below this gradient norm the optimizer is considered converged.
const GRAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceReason {
    /// The learning rate decayed below `lr_floor`.
    LrFloor,
    /// `max_iters` iterations were used.
    MaxIters,
    /// The gradient norm vanished (already at a stationary point).
    GradientVanished,
    /// There are no free parameters to optimize.
    NothingFree,
}

impl ConvergenceReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConvergenceReason::LrFloor => "lr_floor",
            ConvergenceReason::MaxIters => "max_iters",
            ConvergenceReason::GradientVanished => "gradient_vanished",
            ConvergenceReason::NothingFree => "nothing_free",
        }
    }
}

/// One row of the energy trace.
#[derive(Debug, Clone, Copy)]
pub struct IterationStats {
    pub iteration: usize,
    pub lr: f64,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// The best parameters seen during the fit.
    pub params: TrackingParams,
    pub trace: Vec<IterationStats>,
    pub iterations: usize,
    pub terminal_lr: f64,
    pub reason: ConvergenceReason,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Breakdown at the returned parameters.
    pub final_breakdown: EnergyBreakdown,
}

/// Minimize the tracking energy starting from `init`.
///
/// Deformations outside the configured mask are hard-clamped to zero before
/// the fit starts and are not part of the optimization vector.
pub fn fit(
    model: &BlendshapeModel,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
    init: &TrackingParams,
) -> Result<FitReport> {
    config.validate()?;
    let mut config = config.clone();
    if config.mica_template.is_none() {
        config.mica_template = dataset.mica_template.clone();
    }
    let layout = ParamLayout::new(model, dataset, &config)?;

    let mut base = init.clone();
    layout.clamp_deformations(&mut base);
    base.validate(model)?;

    let evaluate = |x: &DVector<f64>| -> Result<(EnergyBreakdown, DVector<f64>)> {
        let params = layout.unpack(x, &base);
        gradient_with_layout(model, &params, dataset, &config, &layout)
    };

    let mut x = layout.pack(&base);
    let mut m: DVector<f64> = DVector::zeros(layout.len());
    let mut v: DVector<f64> = DVector::zeros(layout.len());
    let mut lr = config.learning_rate_init;
    let mut best_energy = f64::INFINITY;
    let mut best_x = x.clone();
    let mut initial_energy = f64::NAN;
    let mut stall = 0usize;
    let mut trace = Vec::new();
    let mut reason = ConvergenceReason::MaxIters;
    let mut iterations = 0;

    if layout.is_empty() {
        let (breakdown, _) = evaluate(&x)?;
        return Ok(FitReport {
            params: base,
            trace: vec![IterationStats { iteration: 0, lr, energy: breakdown }],
            iterations: 0,
            terminal_lr: lr,
            reason: ConvergenceReason::NothingFree,
            initial_energy: breakdown.total(),
            final_energy: breakdown.total(),
            final_breakdown: breakdown,
        });
    }

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let (breakdown, g) = evaluate(&x)?;
        let energy = breakdown.total();
        if !energy.is_finite() {
            return Err(Error::NonFiniteEnergy {
                term: breakdown.non_finite_term().unwrap_or("total"),
                iteration: iter,
            });
        }
        if iter == 0 {
            initial_energy = energy;
        }
        trace.push(IterationStats { iteration: iter, lr, energy: breakdown });

        if energy < best_energy {
            best_energy = energy;
            best_x.copy_from(&x);
            stall = 0;
        } else {
            stall += 1;
        }

        if g.norm() < GRAD_NORM_FLOOR {
            reason = ConvergenceReason::GradientVanished;
            break;
        }
        if stall >= config.lr_patience {
            lr *= config.lr_decay;
            stall = 0;
            if lr < config.lr_floor {
                reason = ConvergenceReason::LrFloor;
                break;
            }
        }

        // Adam with bias correction; decoupled weight decay is zero.
        let t = (iter + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for k in 0..x.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat: f64 = m[k] / bc1;
            let v_hat: f64 = v[k] / bc2;
            x[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    let params = layout.unpack(&best_x, &base);
    let (final_breakdown, _) = gradient_with_layout(model, &params, dataset, &config, &layout)?;
    Ok(FitReport {
        params,
        trace,
        iterations,
        terminal_lr: lr,
        reason,
        initial_energy,
        final_energy: final_breakdown.total(),
        final_breakdown,
    })
}

/// Initial parameters for a dataset when no better guess is available:
/// zero shape coefficients, cameras from the file (free focal lengths
/// defaulting to the image width), and per-frame head poses placed by a
/// weak-perspective estimate from the mean observation spread (falling back
/// to one meter in front of camera 0).
pub fn default_init(
    model: &BlendshapeModel,
    dataset: &SequenceDataset,
    config: &EnergyConfig,
) -> Result<TrackingParams> {
    let mut cameras = dataset.initial_cameras();
    for (j, cam) in cameras.iter_mut().enumerate() {
        let focal_free = !dataset.calibrated[j] && !config.freeze_camera_focal;
        if focal_free {
            cam.focal = cam.image_size[0] as f64;
        }
    }
    let mut params = TrackingParams::new_zeroed(model, dataset.n_frames, cameras);

    // Model spread around its centroid, for the weak-perspective depth.
    let n = model.n_vertices() as f64;
    let centroid = model.template.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let spread3d = (model
        .template
        .iter()
        .map(|p| (p - centroid).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();

    let cam0 = params.cameras[0];
    let fallback = cam0.center() + cam0.forward() * 1.0 - centroid;
    for t in 0..dataset.n_frames {
        let obs = dataset.frame_camera_observations(t, 0);
        params.head_pose[t].translation = if obs.len() >= 8 {
            let mut mean = nalgebra::Vector2::zeros();
            for o in obs {
                mean += o.mu;
            }
            mean /= obs.len() as f64;
            let spread_px = (obs.iter().map(|o| (o.mu - mean).norm_squared()).sum::<f64>()
                / obs.len() as f64)
                .sqrt();
            if spread_px > 1e-6 {
                let depth = cam0.focal * spread3d / spread_px;
                let dir = nalgebra::Vector3::new(
                    (mean.x - cam0.principal_point.x) / cam0.focal,
                    (mean.y - cam0.principal_point.y) / cam0.focal,
                    1.0,
                );
                let r = cam0.extrinsics.rotation_matrix();
                let world = r.transpose() * (dir * depth - cam0.extrinsics.translation);
                world - centroid
            } else {
                fallback
            }
        } else {
            fallback
        };
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural::miniature_head;
    use crate::synth::{generate_sequence, perturb_params, MotionModel, SynthSpec};
    use crate::tracking::{mean_vertex_error, reprojection_stats};

    fn zero_reg_config() -> EnergyConfig {
        EnergyConfig {
            lambda_flame: 0.0,
            lambda_temp: 0.0,
            lambda_mica: 0.0,
            lambda_deform: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn optimal_init_terminates_immediately() {
        let model = miniature_head();
        let spec = SynthSpec { frames: 3, cameras: 2, seed: 2, ..Default::default() };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let config = zero_reg_config();
        let report = fit(&model, &ds, &config, &gt).unwrap();
        assert_eq!(report.reason, ConvergenceReason::GradientVanished);
        assert!(report.iterations <= 2, "took {} iterations", report.iterations);
        assert!((report.final_energy - report.initial_energy).abs() < 1e-9);
    }

    #[test]
    fn recovers_noiseless_synthetic_sequence() {
        let model = miniature_head();
        let spec = SynthSpec {
            frames: 5,
            cameras: 2,
            seed: 12,
            motion: MotionModel::SinusoidalExpression,
            ..Default::default()
        };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let config = EnergyConfig::default();
        let layout = ParamLayout::new(&model, &ds, &config).unwrap();
        let init = perturb_params(&gt, 0.1, 99, &layout);
        let report = fit(&model, &ds, &config, &init).unwrap();
        assert!(report.final_energy <= report.initial_energy);
        let stats = reprojection_stats(&model, &report.params, &ds).unwrap();
        assert!(stats.mean_px < 1e-2, "mean reprojection {} px", stats.mean_px);
        let err = mean_vertex_error(&model, &report.params, &gt).unwrap();
        assert!(err < 1e-3, "mean vertex error {err}");
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let model = miniature_head();
        let spec = SynthSpec { frames: 3, cameras: 2, seed: 4, sigma_obs: 1.0, ..Default::default() };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let mut config = zero_reg_config();
        config.max_iters = 40;
        config.freeze_beta = true;
        let layout = ParamLayout::new(&model, &ds, &config).unwrap();
        let init = perturb_params(&gt, 0.05, 7, &layout);
        let report = fit(&model, &ds, &config, &init).unwrap();
        assert_eq!(report.params.beta, init.beta);
        assert_eq!(report.params.theta, init.theta);
        assert_eq!(report.params.delta_d, init.delta_d);
        assert_ne!(report.params.phi, init.phi);
    }

    #[test]
    fn sigma_scaling_leaves_argmin_geometry_unchanged() {
        let model = miniature_head();
        let spec = SynthSpec { frames: 2, cameras: 2, seed: 6, sigma_obs: 1.0, ..Default::default() };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let scaled = SequenceDataset::new(
            ds.cameras.clone(),
            ds.calibrated.clone(),
            ds.n_frames,
            ds.n_vertices,
            ds.observations()
                .iter()
                .map(|o| crate::tracking::AlignmentObservation { sigma: o.sigma * 3.0, ..*o })
                .collect(),
            None,
            None,
        )
        .unwrap();
        let mut config = zero_reg_config();
        config.max_iters = 600;
        let layout = ParamLayout::new(&model, &ds, &config).unwrap();
        let init = perturb_params(&gt, 0.05, 13, &layout);
        let a = fit(&model, &ds, &config, &init).unwrap();
        let b = fit(&model, &scaled, &config, &init).unwrap();
        let ra = reprojection_stats(&model, &a.params, &ds).unwrap();
        let rb = reprojection_stats(&model, &b.params, &ds).unwrap();
        assert!(
            (ra.rms_px - rb.rms_px).abs() < 1e-6,
            "residuals diverge: {} vs {}",
            ra.rms_px,
            rb.rms_px
        );
    }

    #[test]
    fn joint_fit_decomposes_across_frames_without_coupling_terms() {
        // With only per-frame parameters free and no cross-frame terms, a
        // joint fit must match per-frame independent fits.
        let model = miniature_head();
        let spec =
            SynthSpec { frames: 3, cameras: 2, seed: 10, sigma_obs: 0.5, ..Default::default() };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let mut config = zero_reg_config();
        config.freeze_beta = true; // shared groups frozen
        config.max_iters = 200;
        config.lr_patience = 1_000_000; // constant learning rate
        let layout = ParamLayout::new(&model, &ds, &config).unwrap();
        let init = perturb_params(&gt, 0.05, 3, &layout);

        let joint = fit(&model, &ds, &config, &init).unwrap();

        let mut per_frame_energy = Vec::new();
        for t in 0..3 {
            let obs: Vec<_> = (0..ds.n_cameras())
                .flat_map(|j| ds.frame_camera_observations(t, j).iter().copied())
                .map(|mut o| {
                    o.frame = 0;
                    o
                })
                .collect();
            let sub = SequenceDataset::new(
                ds.cameras.clone(),
                ds.calibrated.clone(),
                1,
                ds.n_vertices,
                obs,
                None,
                None,
            )
            .unwrap();
            let sub_init = TrackingParams {
                beta: init.beta.clone(),
                phi: vec![init.phi[t].clone()],
                theta: vec![init.theta[t].clone()],
                delta_d: init.delta_d.clone(),
                head_pose: vec![init.head_pose[t]],
                cameras: init.cameras.clone(),
            };
            let r = fit(&model, &sub, &config, &sub_init).unwrap();
            per_frame_energy.push(r.final_energy);
        }

        // Compare the joint fit's per-frame alignment energies.
        for t in 0..3 {
            let sub_params = TrackingParams {
                beta: joint.params.beta.clone(),
                phi: vec![joint.params.phi[t].clone()],
                theta: vec![joint.params.theta[t].clone()],
                delta_d: joint.params.delta_d.clone(),
                head_pose: vec![joint.params.head_pose[t]],
                cameras: joint.params.cameras.clone(),
            };
            let obs: Vec<_> = (0..ds.n_cameras())
                .flat_map(|j| ds.frame_camera_observations(t, j).iter().copied())
                .map(|mut o| {
                    o.frame = 0;
                    o
                })
                .collect();
            let sub = SequenceDataset::new(
                ds.cameras.clone(),
                ds.calibrated.clone(),
                1,
                ds.n_vertices,
                obs,
                None,
                None,
            )
            .unwrap();
            let (e, _) = crate::energy::total_energy(&model, &sub_params, &sub, &config).unwrap();
            assert!(
                (e - per_frame_energy[t]).abs() < 1e-6 * per_frame_energy[t].abs().max(1.0),
                "frame {t}: joint {e} vs independent {}",
                per_frame_energy[t]
            );
        }
    }

    #[test]
    fn lr_floor_terminates_stalled_fit() {
        let model = miniature_head();
        let spec = SynthSpec { frames: 2, cameras: 1, seed: 5, sigma_obs: 2.0, ..Default::default() };
        let (ds, gt) = generate_sequence(&model, &spec).unwrap();
        let mut config = zero_reg_config();
        config.lr_patience = 2;
        config.max_iters = 5000;
        let report = fit(&model, &ds, &config, &gt).unwrap();
        assert!(
            matches!(report.reason, ConvergenceReason::LrFloor | ConvergenceReason::GradientVanished),
            "{:?}",
            report.reason
        );
        assert!(report.terminal_lr < 1e-2);
        assert!(report.final_energy <= report.initial_energy);
    }
}
