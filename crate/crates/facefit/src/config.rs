//! Energy weights, optimizer settings, and parameter-group toggles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlendshapeModel, Region, VertexSet};
use crate::procedural::{VERTEX_WEIGHT_HIGH, VERTEX_WEIGHT_LOW};

/// Everything the fitter needs besides the data itself.
///
/// The JSON form accepts exactly the serde-visible fields below; unknown
/// keys are rejected so typos cannot silently fall back to defaults. The
/// optimizer settings default to learning rate 1e-2 decayed by 0.5 after 30
/// non-improving steps. Energy weights have no canonical published values;
/// the defaults here are tuned so synthetic recovery converges and are
/// meant to be adjusted per dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub lambda_flame: f64,
    pub lambda_temp: f64,
    pub lambda_mica: f64,
    pub lambda_deform: f64,
    pub vertex_weight_high: f64,
    pub vertex_weight_low: f64,
    pub learning_rate_init: f64,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub max_iters: usize,
    /// Optimize static per-vertex deformations. Off by default; the usual
    /// single-view setup cannot constrain them.
    pub enable_delta_d: bool,
    /// Region names whose vertices may deform when `enable_delta_d` is set.
    /// `null` means every vertex. Ignored when `deformable_mask` is set
    /// programmatically.
    pub deformable_regions: Option<Vec<String>>,
    pub freeze_beta: bool,
    pub freeze_phi: bool,
    /// Joint poses are frozen by default: jaw motion is carried by the
    /// expression basis and root motion by the per-frame head pose.
    pub freeze_theta: bool,
    pub freeze_head_pose: bool,
    /// Freeze extrinsics of non-calibrated cameras (calibrated ones are
    /// always fixed).
    pub freeze_camera_extrinsics: bool,
    pub freeze_camera_focal: bool,

    /// Neutral-geometry prior target. Populated from the sequence file or
    /// set programmatically; not part of the JSON schema.
    #[serde(skip)]
    pub mica_template: Option<VertexSet>,
    /// Explicit per-vertex deformation mask; overrides `deformable_regions`.
    #[serde(skip)]
    pub deformable_mask: Option<Vec<bool>>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            lambda_flame: 1e-4,
            lambda_temp: 10.0,
            lambda_mica: 100.0,
            lambda_deform: 1e3,
            vertex_weight_high: VERTEX_WEIGHT_HIGH,
            vertex_weight_low: VERTEX_WEIGHT_LOW,
            learning_rate_init: 1e-2,
            lr_decay: 0.5,
            lr_patience: 30,
            lr_floor: 1e-5,
            max_iters: 10_000,
            enable_delta_d: false,
            deformable_regions: Some(vec!["nose".to_string()]),
            freeze_beta: false,
            freeze_phi: false,
            freeze_theta: true,
            freeze_head_pose: false,
            freeze_camera_extrinsics: false,
            freeze_camera_focal: false,
            mica_template: None,
            deformable_mask: None,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_flame", self.lambda_flame),
            ("lambda_temp", self.lambda_temp),
            ("lambda_mica", self.lambda_mica),
            ("lambda_deform", self.lambda_deform),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(self.vertex_weight_high > 0.0 && self.vertex_weight_low > 0.0) {
            return Err(Error::InvalidConfig("vertex weights must be positive".into()));
        }
        if !(self.learning_rate_init > 0.0 && self.learning_rate_init.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate_init must be positive, got {}",
                self.learning_rate_init
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay must lie in (0, 1), got {}",
                self.lr_decay
            )));
        }
        if self.lr_patience == 0 {
            return Err(Error::InvalidConfig("lr_patience must be at least 1".into()));
        }
        if !(self.lr_floor > 0.0) {
            return Err(Error::InvalidConfig("lr_floor must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if let Some(regions) = &self.deformable_regions {
            for name in regions {
                Region::from_name(name)
                    .map_err(|_| Error::InvalidConfig(format!("unknown region '{name}' in deformable_regions")))?;
            }
        }
        Ok(())
    }

    /// Effective per-vertex deformation mask: which entries of the static
    /// deformation field are optimized. Everything outside is hard-clamped
    /// to zero.
    pub fn resolve_deformable_mask(&self, model: &BlendshapeModel) -> Result<Vec<bool>> {
        let n = model.n_vertices();
        if !self.enable_delta_d {
            return Ok(vec![false; n]);
        }
        if let Some(mask) = &self.deformable_mask {
            if mask.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "deformable mask length {} does not match model vertex count {n}",
                    mask.len()
                )));
            }
            return Ok(mask.clone());
        }
        match &self.deformable_regions {
            None => Ok(vec![true; n]),
            Some(names) => {
                let mut wanted = Vec::with_capacity(names.len());
                for name in names {
                    wanted.push(Region::from_name(name)?);
                }
                Ok(model.region_labels.iter().map(|r| wanted.contains(r)).collect())
            }
        }
    }
}

/// Parse an `EnergyConfig` from JSON text. Missing fields take defaults;
/// unknown keys are an error.
pub fn load_config(json: &str) -> Result<EnergyConfig> {
    let config: EnergyConfig = serde_json::from_str(json)?;
    config.validate()?;
    Ok(config)
}
