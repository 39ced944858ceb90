//! 3D reconstruction error: keypoint Procrustes alignment, ICP refinement
//! on the mesh surface, and per-region scan-to-mesh chamfer statistics.
//!
//! The protocol transforms the predicted mesh onto the ground truth (seven
//! keypoint correspondences give the initial rigid estimate, ICP against
//! the surface refines it) and then measures, for every ground-truth
//! vertex, the distance to the predicted surface. Results are reported in
//! millimeters per face region.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::bvh::TriangleBvh;
use crate::camera::RigidTransform;
use crate::error::{Error, Result};
use crate::model::{BlendshapeModel, Region};
use crate::ssme::RegionKey;

/// A plain triangle mesh with optional region labels and keypoint indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub region_labels: Option<Vec<Region>>,
    /// Indices of the alignment keypoints (seven in the standard protocol).
    pub keypoints: Option<Vec<u32>>,
}

impl TriangleMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n == 0 {
            return Err(Error::InvalidData("mesh has no vertices".into()));
        }
        if !self.vertices.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidData("non-finite mesh vertex".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidData(format!("triangle {t} index out of range")));
            }
        }
        if let Some(labels) = &self.region_labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} region labels for {n} vertices",
                    labels.len()
                )));
            }
        }
        if let Some(kp) = &self.keypoints {
            if kp.iter().any(|&k| k as usize >= n) {
                return Err(Error::InvalidData("keypoint index out of range".into()));
            }
        }
        Ok(())
    }

    /// Template geometry of a blendshape model as a plain mesh.
    pub fn from_model(model: &BlendshapeModel) -> Self {
        TriangleMesh {
            vertices: model.template.clone(),
            triangles: model.triangles.clone(),
            region_labels: Some(model.region_labels.clone()),
            keypoints: None,
        }
    }

    pub fn keypoint_positions(&self) -> Result<Vec<Vector3<f64>>> {
        let kp = self
            .keypoints
            .as_ref()
            .ok_or_else(|| Error::InvalidData("mesh carries no keypoints".into()))?;
        Ok(kp.iter().map(|&k| self.vertices[k as usize]).collect())
    }

    pub fn transformed(&self, t: &RigidTransform) -> TriangleMesh {
        let r = t.rotation_matrix();
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| r * v + t.translation).collect(),
            ..self.clone()
        }
    }
}

/// Seven well-spread vertex indices chosen by extreme support directions;
/// a stand-in for manually annotated keypoints on synthetic meshes.
pub fn extreme_keypoints(vertices: &[Vector3<f64>]) -> Vec<u32> {
    let dirs = [
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(-1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(0.6, 0.6, 0.52),
    ];
    dirs.iter()
        .map(|d| {
            let mut best = 0usize;
            let mut best_dot = f64::NEG_INFINITY;
            for (i, v) in vertices.iter().enumerate() {
                let dot = v.dot(d);
                if dot > best_dot {
                    best_dot = dot;
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Least-squares rigid alignment (no scale) of corresponded point sets:
/// cross-covariance SVD with reflection correction, minimizing
/// `sum ||R s + t - d||^2`.
pub fn procrustes_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform> {
    let (r, t, _) = procrustes_impl(src, dst, false)?;
    Ok(RigidTransform::from_matrix(&r, t))
}

/// Similarity variant (uniform scale estimated alongside the rotation);
/// used only behind explicit flags for non-metrical comparisons.
pub fn procrustes_similarity(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<(RigidTransform, f64)> {
    let (r, t, s) = procrustes_impl(src, dst, true)?;
    Ok((RigidTransform::from_matrix(&r, t), s))
}

fn procrustes_impl(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(Matrix3<f64>, Vector3<f64>, f64)> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "correspondence counts differ: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let sc = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let dc = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    let mut src_var = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sp = s - sc;
        let dp = d - dc;
        h += sp * dp.transpose();
        src_var += sp.norm_squared();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    // Rank check: collinear or coincident points leave the rotation
    // undetermined around an axis.
    let s0 = svd.singular_values[0];
    if s0 <= 0.0 || svd.singular_values[1] <= 1e-12 * s0 {
        return Err(Error::Degenerate(
            "keypoints are collinear or coincident; rotation is not determined".into(),
        ));
    }
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let mut d = Matrix3::identity();
    d[(2, 2)] = if det < 0.0 { -1.0 } else { 1.0 };
    let r = v * d * u.transpose();
    let scale = if with_scale {
        if src_var <= 0.0 {
            return Err(Error::Degenerate("zero-variance source points".into()));
        }
        (svd.singular_values[0] + svd.singular_values[1] + d[(2, 2)] * svd.singular_values[2])
            / src_var
    } else {
        1.0
    };
    let t = dc - r * sc * scale;
    Ok((if with_scale { r } else { r }, t, scale))
}

#[derive(Debug, Clone, Copy)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Stop once the mean closest-point distance improves by less than this
    /// (meters).
    pub tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions { max_iters: 50, tol: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub converged: bool,
    pub iterations: usize,
    /// Mean closest-point distance after each correspondence pass.
    pub mean_distance_trace: Vec<f64>,
}

/// Refine a rigid alignment of `src` points onto the surface of `dst` by
/// iterating closest-point correspondences and Procrustes updates.
/// Non-convergence within `max_iters` returns the best transform found,
/// flagged via `converged`.
pub fn icp_refine(
    src: &[Vector3<f64>],
    dst: &TriangleMesh,
    init: &RigidTransform,
    options: &IcpOptions,
) -> Result<IcpResult> {
    dst.validate()?;
    if dst.triangles.is_empty() {
        return Err(Error::InvalidData("ICP target mesh has no triangles".into()));
    }
    let bvh = TriangleBvh::new(&dst.vertices, &dst.triangles);

    let mean_dist_and_correspondences = |t: &RigidTransform| {
        let r = t.rotation_matrix();
        let closest: Vec<Vector3<f64>> = src
            .par_iter()
            .map(|p| bvh.closest_point(&(r * p + t.translation)).point)
            .collect();
        let mean: f64 = src
            .iter()
            .zip(&closest)
            .map(|(p, q)| ((r * p + t.translation) - q).norm())
            .sum::<f64>()
            / src.len().max(1) as f64;
        (mean, closest)
    };

    let mut current = *init;
    let mut best = *init;
    let (mut current_mean, mut correspondences) = mean_dist_and_correspondences(&current);
    let mut best_mean = current_mean;
    let mut trace = vec![current_mean];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..options.max_iters {
        iterations += 1;
        let next = procrustes_rigid(src, &correspondences)?;
        let (next_mean, next_corr) = mean_dist_and_correspondences(&next);
        trace.push(next_mean);
        if next_mean < best_mean {
            best_mean = next_mean;
            best = next;
        }
        let improvement = current_mean - next_mean;
        current = next;
        current_mean = next_mean;
        correspondences = next_corr;
        if improvement < options.tol {
            converged = true;
            break;
        }
    }
    Ok(IcpResult { transform: best, converged, iterations, mean_distance_trace: trace })
}

/// Chamfer statistics of one region, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferStats {
    pub median_mm: f64,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub count: usize,
}

fn stats_from_distances(mut d: Vec<f64>) -> Option<ChamferStats> {
    if d.is_empty() {
        return None;
    }
    d.sort_unstable_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    Some(ChamferStats {
        median_mm: median * 1e3,
        mean_mm: mean * 1e3,
        std_mm: var.sqrt() * 1e3,
        count: n,
    })
}

/// Distance direction of the chamfer measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferDirection {
    /// Ground-truth vertices against the predicted surface (the standard
    /// scan-to-mesh protocol).
    GtToPred,
    /// Pool distances from both directions into the overall row (regions
    /// stay GT-labeled).
    Symmetric,
}

/// Per-region scan-to-mesh distances. Alignment must already be applied.
/// Regions come from the ground-truth mesh labels; rows without any vertex
/// are reported as `None` (undefined, not zero).
pub fn chamfer_scan_to_mesh(
    gt: &TriangleMesh,
    pred: &TriangleMesh,
    direction: ChamferDirection,
) -> Result<Vec<(RegionKey, Option<ChamferStats>)>> {
    gt.validate()?;
    pred.validate()?;
    if pred.triangles.is_empty() {
        return Err(Error::InvalidData("predicted mesh has no triangles".into()));
    }
    let bvh = TriangleBvh::new(&pred.vertices, &pred.triangles);
    let distances: Vec<f64> =
        gt.vertices.par_iter().map(|p| bvh.closest_point(p).distance).collect();

    let mut rows = Vec::new();
    let overall = match direction {
        ChamferDirection::GtToPred => distances.clone(),
        ChamferDirection::Symmetric => {
            if gt.triangles.is_empty() {
                return Err(Error::InvalidData(
                    "symmetric chamfer needs triangles on the ground-truth mesh".into(),
                ));
            }
            let gt_bvh = TriangleBvh::new(&gt.vertices, &gt.triangles);
            let back: Vec<f64> =
                pred.vertices.par_iter().map(|p| gt_bvh.closest_point(p).distance).collect();
            distances.iter().copied().chain(back).collect()
        }
    };
    rows.push((RegionKey::All, stats_from_distances(overall)));
    if let Some(labels) = &gt.region_labels {
        for region in Region::ALL {
            let subset: Vec<f64> = distances
                .iter()
                .zip(labels)
                .filter(|(_, l)| **l == region)
                .map(|(d, _)| *d)
                .collect();
            rows.push((RegionKey::Region(region), stats_from_distances(subset)));
        }
    }
    Ok(rows)
}

/// The full protocol: keypoint Procrustes, ICP refinement, then per-region
/// chamfer of the ground truth against the aligned prediction.
pub fn align_and_measure(
    gt: &TriangleMesh,
    pred: &TriangleMesh,
    icp_options: &IcpOptions,
    direction: ChamferDirection,
) -> Result<(RigidTransform, IcpResult, Vec<(RegionKey, Option<ChamferStats>)>)> {
    let gt_kp = gt.keypoint_positions()?;
    let pred_kp = pred.keypoint_positions()?;
    if gt_kp.len() != pred_kp.len() {
        return Err(Error::DimensionMismatch(format!(
            "keypoint counts differ: gt={}, pred={}",
            gt_kp.len(),
            pred_kp.len()
        )));
    }
    let init = procrustes_rigid(&pred_kp, &gt_kp)?;
    let icp = icp_refine(&pred.vertices, gt, &init, icp_options)?;
    let aligned = pred.transformed(&icp.transform);
    let rows = chamfer_scan_to_mesh(gt, &aligned, direction)?;
    Ok((icp.transform, icp, rows))
}
