//! Screen-space motion error: rasterize mesh pairs into dense per-pixel
//! flow fields and compare a tracker's motion against the ground truth's.
//!
//! For a frame pair `(t, t+h)`, each tracker's mesh at frame `t` is
//! rasterized with a z-buffer at the requested resolution; every covered
//! pixel interpolates, with its barycentric coordinates on the front-most
//! triangle, that triangle's vertex positions at frame `t+h`. The flow is
//! the interpolated target minus the pixel center. The end-point error
//! (EPE) between two flow fields is the mean Euclidean flow difference over
//! pixels valid in both, split by the region labels of the ground-truth
//! field. `SSME_h` averages the EPE over all frame pairs of horizon `h`,
//! and the scalar summary averages over horizons `1..=N_H` (default 30).
//!
//! Because each tracker is rasterized from its own mesh, the metric is
//! independent of mesh topology; the coverage column reports how much of
//! the ground-truth area the prediction actually covered so sparse
//! predictions cannot hide errors.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{Camera, DEPTH_EPS};
use crate::error::{Error, Result};
use crate::model::{BlendshapeModel, Region};
use crate::tracking::{MeshSequence, TrackingParams};

/// A mesh projected into one camera at one frame.
#[derive(Debug, Clone)]
pub struct ScreenMesh {
    /// Pixel positions per vertex.
    pub positions: Vec<Vector2<f64>>,
    /// Camera-space depth per vertex; triangles touching non-positive
    /// depths are skipped during rasterization.
    pub depths: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub region_labels: Vec<Region>,
}

impl ScreenMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.depths.len() != n || self.region_labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "screen mesh arrays disagree: positions={n}, depths={}, labels={}",
                self.depths.len(),
                self.region_labels.len()
            )));
        }
        if !self.depths.iter().all(|d| d.is_finite()) {
            return Err(Error::InvalidData("non-finite depth in screen mesh".into()));
        }
        for tri in &self.triangles {
            if tri.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidData("screen mesh triangle index out of range".into()));
            }
        }
        Ok(())
    }
}

/// Dense per-pixel 2D motion with validity and region labels.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    pub flow: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
    pub region: Vec<Region>,
}

impl FlowField {
    fn empty(width: u32, height: u32) -> Self {
        let n = (width as usize) * (height as usize);
        FlowField {
            width,
            height,
            flow: vec![Vector2::zeros(); n],
            valid: vec![false; n],
            region: vec![Region::Other; n],
        }
    }
}

/// Rasterize the dense flow from frame `t` to frame `t+h` of one tracker.
/// Both meshes must share topology; coverage comes from `mesh_t`.
pub fn rasterize_flow(
    mesh_t: &ScreenMesh,
    mesh_th: &ScreenMesh,
    width: u32,
    height: u32,
) -> Result<FlowField> {
    mesh_t.validate()?;
    if mesh_th.positions.len() != mesh_t.positions.len() {
        return Err(Error::DimensionMismatch(format!(
            "flow endpoints have different vertex counts: {} vs {}",
            mesh_t.positions.len(),
            mesh_th.positions.len()
        )));
    }
    let mut out = FlowField::empty(width, height);
    let mut zbuf = vec![f64::INFINITY; out.flow.len()];
    let (w, h) = (width as i64, height as i64);

    for tri in &mesh_t.triangles {
        let [ia, ib, ic] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let (da, db, dc) = (mesh_t.depths[ia], mesh_t.depths[ib], mesh_t.depths[ic]);
        if da <= DEPTH_EPS || db <= DEPTH_EPS || dc <= DEPTH_EPS {
            continue; // behind the camera
        }
        let (pa, pb, pc) = (mesh_t.positions[ia], mesh_t.positions[ib], mesh_t.positions[ic]);
        let area = cross2(&(pb - pa), &(pc - pa));
        if area.abs() < 1e-12 {
            continue; // degenerate
        }
        let min_x = pa.x.min(pb.x).min(pc.x);
        let max_x = pa.x.max(pb.x).max(pc.x);
        let min_y = pa.y.min(pb.y).min(pc.y);
        let max_y = pa.y.max(pb.y).max(pc.y);
        let x_lo = ((min_x - 0.5).ceil() as i64).max(0);
        let x_hi = ((max_x - 0.5).floor() as i64).min(w - 1);
        let y_lo = ((min_y - 0.5).ceil() as i64).max(0);
        let y_hi = ((max_y - 0.5).floor() as i64).min(h - 1);

        let (qa, qb, qc) = (mesh_th.positions[ia], mesh_th.positions[ib], mesh_th.positions[ic]);
        let labels = [
            mesh_t.region_labels[ia],
            mesh_t.region_labels[ib],
            mesh_t.region_labels[ic],
        ];
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let w0 = cross2(&(pb - p), &(pc - p)) / area;
                let w1 = cross2(&(pc - p), &(pa - p)) / area;
                let w2 = cross2(&(pa - p), &(pb - p)) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let idx = (y * w + x) as usize;
                let z = w0 * da + w1 * db + w2 * dc;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    let target = qa * w0 + qb * w1 + qc * w2;
                    out.flow[idx] = target - p;
                    out.valid[idx] = true;
                    out.region[idx] = majority_label(&labels, [w0, w1, w2]);
                }
            }
        }
    }
    Ok(out)
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Label holding the largest barycentric mass; ties break toward the lower
/// region code for determinism.
fn majority_label(labels: &[Region; 3], weights: [f64; 3]) -> Region {
    let mut mass = [0.0f64; 6];
    for k in 0..3 {
        mass[labels[k].code() as usize] += weights[k];
    }
    let mut best = 0;
    for c in 1..6 {
        if mass[c] > mass[best] {
            best = c;
        }
    }
    Region::from_code(best as u8).unwrap()
}

const N_REGION_SLOTS: usize = 7; // six labels plus "all"
const ALL_SLOT: usize = 6;

#[derive(Debug, Clone, Copy)]
struct EpeAccum {
    sum: [f64; N_REGION_SLOTS],
    count: [usize; N_REGION_SLOTS],
    gt_valid: [usize; N_REGION_SLOTS],
}

fn accumulate_epe(pred: &FlowField, gt: &FlowField) -> Result<EpeAccum> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch(format!(
            "flow fields have different sizes: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut acc = EpeAccum {
        sum: [0.0; N_REGION_SLOTS],
        count: [0; N_REGION_SLOTS],
        gt_valid: [0; N_REGION_SLOTS],
    };
    for idx in 0..gt.valid.len() {
        if !gt.valid[idx] {
            continue;
        }
        let slot = gt.region[idx].code() as usize;
        acc.gt_valid[slot] += 1;
        acc.gt_valid[ALL_SLOT] += 1;
        if pred.valid[idx] {
            let d = (pred.flow[idx] - gt.flow[idx]).norm();
            acc.sum[slot] += d;
            acc.count[slot] += 1;
            acc.sum[ALL_SLOT] += d;
            acc.count[ALL_SLOT] += 1;
        }
    }
    Ok(acc)
}

/// End-point error between two flow fields over one region (`None` = all
/// pixels). Pixels count when valid in both fields and labeled with the
/// region in the ground-truth field. Returns `(mean pixels, coverage)`;
/// `Ok(None)` when no pixel qualifies (undefined, not zero).
pub fn epe(pred: &FlowField, gt: &FlowField, region: Option<Region>) -> Result<Option<(f64, f64)>> {
    let acc = accumulate_epe(pred, gt)?;
    let slot = region.map_or(ALL_SLOT, |r| r.code() as usize);
    if acc.count[slot] == 0 {
        return Ok(None);
    }
    Ok(Some((
        acc.sum[slot] / acc.count[slot] as f64,
        acc.count[slot] as f64 / acc.gt_valid[slot] as f64,
    )))
}

/// Mean of the per-frame-pair EPE values for one horizon; `None` when no
/// frame pair produced a defined EPE.
pub fn ssme_h(epe_values: &[f64]) -> Option<f64> {
    if epe_values.is_empty() {
        None
    } else {
        Some(epe_values.iter().sum::<f64>() / epe_values.len() as f64)
    }
}

/// Scalar summary: mean of the defined per-horizon values.
pub fn ssme_aggregate(per_horizon: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_horizon.iter().flatten().copied().collect();
    ssme_h(&defined)
}

/// Row key of the report: a semantic region or the whole covered area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionKey {
    All,
    Region(Region),
}

impl RegionKey {
    pub const ROWS: [RegionKey; 7] = [
        RegionKey::All,
        RegionKey::Region(Region::Face),
        RegionKey::Region(Region::Mouth),
        RegionKey::Region(Region::Nose),
        RegionKey::Region(Region::Eyes),
        RegionKey::Region(Region::Ears),
        RegionKey::Region(Region::Other),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RegionKey::All => "all",
            RegionKey::Region(r) => r.name(),
        }
    }

    fn slot(&self) -> usize {
        match self {
            RegionKey::All => ALL_SLOT,
            RegionKey::Region(r) => r.code() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SsmeOptions {
    /// Maximum frame window N_H.
    pub n_horizons: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SsmeOptions {
    fn default() -> Self {
        SsmeOptions { n_horizons: 30, width: 512, height: 512 }
    }
}

/// One (region, horizon) cell of the report.
#[derive(Debug, Clone, Copy)]
pub struct SsmeCell {
    pub ssme_px: Option<f64>,
    pub mean_coverage: Option<f64>,
    /// Frame pairs that produced a defined EPE for this cell.
    pub n_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct SsmeReport {
    pub n_horizons: usize,
    /// `cells[row][h-1]` for `row` indexing [`RegionKey::ROWS`].
    pub cells: Vec<Vec<SsmeCell>>,
    /// Per-region mean over defined horizons.
    pub aggregate: Vec<Option<f64>>,
}

impl SsmeReport {
    pub fn cell(&self, region: RegionKey, h: usize) -> &SsmeCell {
        let row = RegionKey::ROWS.iter().position(|r| *r == region).unwrap();
        &self.cells[row][h - 1]
    }

    pub fn aggregate_for(&self, region: RegionKey) -> Option<f64> {
        let row = RegionKey::ROWS.iter().position(|r| *r == region).unwrap();
        self.aggregate[row]
    }
}

/// Full benchmark: rasterize every frame pair of both trackers and build
/// the per-region, per-horizon table.
pub fn ssme_report(
    gt: &[ScreenMesh],
    pred: &[ScreenMesh],
    options: &SsmeOptions,
) -> Result<SsmeReport> {
    if gt.len() != pred.len() {
        return Err(Error::DimensionMismatch(format!(
            "frame counts differ: gt={}, pred={}",
            gt.len(),
            pred.len()
        )));
    }
    let f = gt.len();
    if f < 2 {
        return Err(Error::InvalidData("need at least two frames for motion error".into()));
    }
    if options.n_horizons == 0 {
        return Err(Error::InvalidData("need at least one horizon".into()));
    }

    // All (h, t) pairs, rasterized independently and reduced in order.
    let mut pairs = Vec::new();
    for h in 1..=options.n_horizons {
        for t in 0..f.saturating_sub(h) {
            pairs.push((h, t));
        }
    }
    let accums: Vec<(usize, EpeAccum)> = pairs
        .par_iter()
        .map(|&(h, t)| -> Result<(usize, EpeAccum)> {
            let gt_flow = rasterize_flow(&gt[t], &gt[t + h], options.width, options.height)?;
            let pred_flow = rasterize_flow(&pred[t], &pred[t + h], options.width, options.height)?;
            Ok((h, accumulate_epe(&pred_flow, &gt_flow)?))
        })
        .collect::<Result<_>>()?;

    let n_rows = RegionKey::ROWS.len();
    let mut cells =
        vec![vec![SsmeCell { ssme_px: None, mean_coverage: None, n_pairs: 0 }; options.n_horizons]; n_rows];
    let mut sums = vec![vec![(0.0f64, 0.0f64, 0usize); options.n_horizons]; n_rows];
    for (h, acc) in &accums {
        for (row, key) in RegionKey::ROWS.iter().enumerate() {
            let slot = key.slot();
            if acc.count[slot] > 0 {
                let entry = &mut sums[row][h - 1];
                entry.0 += acc.sum[slot] / acc.count[slot] as f64;
                entry.1 += acc.count[slot] as f64 / acc.gt_valid[slot] as f64;
                entry.2 += 1;
            }
        }
    }
    let mut aggregate = vec![None; n_rows];
    for row in 0..n_rows {
        let mut per_h = Vec::with_capacity(options.n_horizons);
        for h in 1..=options.n_horizons {
            let (epe_sum, cov_sum, n) = sums[row][h - 1];
            let cell = &mut cells[row][h - 1];
            cell.n_pairs = n;
            if n > 0 {
                cell.ssme_px = Some(epe_sum / n as f64);
                cell.mean_coverage = Some(cov_sum / n as f64);
            }
            per_h.push(cell.ssme_px);
        }
        aggregate[row] = ssme_aggregate(&per_h);
    }
    Ok(SsmeReport { n_horizons: options.n_horizons, cells, aggregate })
}

/// Project a world-space mesh sequence into a camera, one screen mesh per
/// frame.
pub fn project_mesh_sequence(meshes: &MeshSequence, cam: &Camera) -> Vec<ScreenMesh> {
    let labels = meshes
        .region_labels
        .clone()
        .unwrap_or_else(|| vec![Region::Other; meshes.vertices.first().map_or(0, |v| v.len())]);
    meshes
        .vertices
        .iter()
        .map(|frame| {
            let mut positions = Vec::with_capacity(frame.len());
            let mut depths = Vec::with_capacity(frame.len());
            for p in frame {
                let proj = cam.project_point(p);
                positions.push(proj.pixel);
                depths.push(proj.depth);
            }
            ScreenMesh {
                positions,
                depths,
                triangles: meshes.triangles.clone(),
                region_labels: labels.clone(),
            }
        })
        .collect()
}

/// Expand fitted parameters into world-space meshes (model topology) and
/// project them into a camera.
pub fn screen_meshes_from_params(
    model: &BlendshapeModel,
    params: &TrackingParams,
    cam: &Camera,
) -> Result<Vec<ScreenMesh>> {
    let mut vertices = Vec::with_capacity(params.n_frames());
    for t in 0..params.n_frames() {
        vertices.push(params.world_vertices(model, t)?.positions);
    }
    let seq = MeshSequence {
        vertices,
        triangles: model.triangles.clone(),
        region_labels: Some(model.region_labels.clone()),
    };
    Ok(project_mesh_sequence(&seq, cam))
}

/// Temporal Gaussian smoothing of per-vertex screen tracks (the baseline
/// temporal prior). The kernel is truncated at three sigmas and
/// renormalized where it overlaps the sequence boundary.
pub fn temporal_gaussian_filter(
    tracks: &[Vec<Vector2<f64>>],
    sigma_frames: f64,
) -> Vec<Vec<Vector2<f64>>> {
    if sigma_frames <= 0.0 || tracks.len() < 2 {
        return tracks.to_vec();
    }
    let f = tracks.len() as i64;
    let radius = (3.0 * sigma_frames).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma_frames * sigma_frames)).exp())
        .collect();
    let n = tracks[0].len();
    let mut out = vec![vec![Vector2::zeros(); n]; tracks.len()];
    for t in 0..f {
        let mut norm = 0.0;
        for (ki, k) in (-radius..=radius).enumerate() {
            if (0..f).contains(&(t + k)) {
                norm += weights[ki];
            }
        }
        for i in 0..n {
            let mut acc = Vector2::zeros();
            for (ki, k) in (-radius..=radius).enumerate() {
                let s = t + k;
                if (0..f).contains(&s) {
                    acc += tracks[s as usize][i] * weights[ki];
                }
            }
            out[t as usize][i] = acc / norm;
        }
    }
    out
}

/// Smooth the screen positions of a sequence of screen meshes in place
/// (used to give single-frame trackers a temporal prior).
pub fn smooth_screen_meshes(meshes: &[ScreenMesh], sigma_frames: f64) -> Vec<ScreenMesh> {
    let tracks: Vec<Vec<Vector2<f64>>> = meshes.iter().map(|m| m.positions.clone()).collect();
    let smoothed = temporal_gaussian_filter(&tracks, sigma_frames);
    meshes
        .iter()
        .zip(smoothed)
        .map(|(m, positions)| ScreenMesh { positions, ..m.clone() })
        .collect()
}
