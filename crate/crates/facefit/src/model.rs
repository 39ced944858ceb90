//! Parametric head model: linear identity/expression blendshapes, skeletal
//! linear blend skinning, and static per-vertex deformations.
//!
//! A model evaluated at parameters `(beta, phi, theta, delta_d)` produces a
//! set of local-space vertices:
//!
//! ```text
//! v = LBS(template + B_id * beta + B_ex * phi, theta) + delta_d
//! ```
//!
//! With `theta = 0` the skinning step is the identity on the blendshaped
//! vertices, which is the configuration used by tracking by default (jaw
//! motion is carried by the expression basis).

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rotation::{rotation_jacobians, rotation_matrix};

/// Semantic face regions used for per-region metrics and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Region {
    Face = 0,
    Mouth = 1,
    Nose = 2,
    Eyes = 3,
    Ears = 4,
    Other = 5,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Face,
        Region::Mouth,
        Region::Nose,
        Region::Eyes,
        Region::Ears,
        Region::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Face => "face",
            Region::Mouth => "mouth",
            Region::Nose => "nose",
            Region::Eyes => "eyes",
            Region::Ears => "ears",
            Region::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Result<Region> {
        Region::ALL
            .iter()
            .copied()
            .find(|r| r.name() == name)
            .ok_or_else(|| {
                Error::InvalidData(format!(
                    "unknown region '{name}' (expected one of face, mouth, nose, eyes, ears, other)"
                ))
            })
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Region> {
        Region::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::InvalidData(format!("region code {code} out of range")))
    }
}

/// A bag of 3D vertex positions, local or world space depending on context.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSet {
    pub positions: Vec<Vector3<f64>>,
}

impl VertexSet {
    pub fn new(positions: Vec<Vector3<f64>>) -> Self {
        VertexSet { positions }
    }

    pub fn zeros(n: usize) -> Self {
        VertexSet { positions: vec![Vector3::zeros(); n] }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Mean Euclidean distance to another vertex set of the same size.
    pub fn mean_distance(&self, other: &VertexSet) -> f64 {
        assert_eq!(self.len(), other.len());
        if self.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .positions
            .iter()
            .zip(&other.positions)
            .map(|(a, b)| (a - b).norm())
            .sum();
        sum / self.len() as f64
    }
}

/// The blendshape head model. Immutable after load; all operations are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeModel {
    /// Rest positions, one per vertex (meters).
    pub template: Vec<Vector3<f64>>,
    /// Identity basis, `(3 * n_vertices) x b_id`; rows ordered v0.x, v0.y, v0.z, v1.x, ...
    pub identity_basis: DMatrix<f64>,
    /// Expression basis, `(3 * n_vertices) x b_ex`, same row layout.
    pub expression_basis: DMatrix<f64>,
    /// Maps vertices to rest joint locations, `n_joints x n_vertices`.
    pub joint_regressor: DMatrix<f64>,
    /// Convex skinning weights, `n_vertices x n_joints`.
    pub skin_weights: DMatrix<f64>,
    /// Parent of each joint; exactly one root carries `None`.
    pub joint_parents: Vec<Option<usize>>,
    /// Per-vertex alignment weight (high on face/ears, low elsewhere).
    pub vertex_weights: Vec<f64>,
    pub region_labels: Vec<Region>,
    /// UV coordinates in [0,1]^2, carried for interop; unused by fitting.
    pub uv_coords: Vec<[f64; 2]>,
    /// Triangle list; may be empty for models only used for fitting.
    pub triangles: Vec<[u32; 3]>,
}

impl BlendshapeModel {
    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_parents.len()
    }

    pub fn b_id(&self) -> usize {
        self.identity_basis.ncols()
    }

    pub fn b_ex(&self) -> usize {
        self.expression_basis.ncols()
    }

    /// Length of the pose vector: three axis-angle scalars per joint plus the
    /// root translation.
    pub fn theta_len(&self) -> usize {
        3 * self.n_joints() + 3
    }

    /// Check all structural invariants. Loaders and builders call this once;
    /// operations may assume a validated model.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices();
        let k = self.n_joints();
        if n == 0 {
            return Err(Error::InvalidModel("model has no vertices".into()));
        }
        if k == 0 {
            return Err(Error::InvalidModel("model has no joints".into()));
        }
        let dims_ok = self.identity_basis.nrows() == 3 * n
            && self.expression_basis.nrows() == 3 * n
            && self.joint_regressor.nrows() == k
            && self.joint_regressor.ncols() == n
            && self.skin_weights.nrows() == n
            && self.skin_weights.ncols() == k
            && self.vertex_weights.len() == n
            && self.region_labels.len() == n
            && self.uv_coords.len() == n;
        if !dims_ok {
            return Err(Error::DimensionMismatch(format!(
                "model arrays inconsistent with n_vertices={n}, n_joints={k}"
            )));
        }
        let finite = self.template.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.identity_basis.iter().all(|x| x.is_finite())
            && self.expression_basis.iter().all(|x| x.is_finite())
            && self.joint_regressor.iter().all(|x| x.is_finite())
            && self.skin_weights.iter().all(|x| x.is_finite())
            && self.uv_coords.iter().all(|uv| uv[0].is_finite() && uv[1].is_finite());
        if !finite {
            return Err(Error::InvalidModel("non-finite entry in model arrays".into()));
        }
        for (i, w) in self.vertex_weights.iter().enumerate() {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "vertex weight {i} must be positive and finite, got {w}"
                )));
            }
        }
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..k {
                let w = self.skin_weights[(i, j)];
                if w < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "negative skin weight at vertex {i}, joint {j}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidModel(format!(
                    "skin weights of vertex {i} sum to {sum}, expected 1"
                )));
            }
        }
        self.joint_order()?;
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidModel(format!(
                    "triangle {t} references vertex out of range"
                )));
            }
        }
        Ok(())
    }

    /// Joints in parent-before-child order. Errors on cycles or if the root
    /// is not unique.
    pub fn joint_order(&self) -> Result<Vec<usize>> {
        let k = self.n_joints();
        let roots = self.joint_parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::InvalidModel(format!(
                "joint hierarchy must have exactly one root, found {roots}"
            )));
        }
        let mut order = Vec::with_capacity(k);
        let mut placed = vec![false; k];
        while order.len() < k {
            let before = order.len();
            for j in 0..k {
                if placed[j] {
                    continue;
                }
                match self.joint_parents[j] {
                    None => {
                        order.push(j);
                        placed[j] = true;
                    }
                    Some(p) => {
                        if p >= k {
                            return Err(Error::InvalidModel(format!(
                                "joint {j} has out-of-range parent {p}"
                            )));
                        }
                        if placed[p] {
                            order.push(j);
                            placed[j] = true;
                        }
                    }
                }
            }
            if order.len() == before {
                return Err(Error::InvalidModel("joint hierarchy contains a cycle".into()));
            }
        }
        Ok(order)
    }
}

/// Parameters of a single model evaluation (one frame).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub phi: DVector<f64>,
    /// Axis-angle per joint followed by the root translation, `3K + 3` entries.
    pub theta: DVector<f64>,
    pub delta_d: Vec<Vector3<f64>>,
}

impl ModelParams {
    pub fn zeros(model: &BlendshapeModel) -> Self {
        ModelParams {
            beta: DVector::zeros(model.b_id()),
            phi: DVector::zeros(model.b_ex()),
            theta: DVector::zeros(model.theta_len()),
            delta_d: vec![Vector3::zeros(); model.n_vertices()],
        }
    }

    fn check(&self, model: &BlendshapeModel) -> Result<()> {
        if self.beta.len() != model.b_id()
            || self.phi.len() != model.b_ex()
            || self.theta.len() != model.theta_len()
            || self.delta_d.len() != model.n_vertices()
        {
            return Err(Error::DimensionMismatch(format!(
                "params (beta={}, phi={}, theta={}, delta_d={}) do not match model \
                 (b_id={}, b_ex={}, theta_len={}, n_vertices={})",
                self.beta.len(),
                self.phi.len(),
                self.theta.len(),
                self.delta_d.len(),
                model.b_id(),
                model.b_ex(),
                model.theta_len(),
                model.n_vertices()
            )));
        }
        let finite = self.beta.iter().all(|x| x.is_finite())
            && self.phi.iter().all(|x| x.is_finite())
            && self.theta.iter().all(|x| x.is_finite())
            && self.delta_d.iter().all(|p| p.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidData("non-finite model parameter".into()));
        }
        Ok(())
    }
}

/// Blendshape part of the evaluation: `template + B_id * beta + B_ex * phi`.
pub(crate) fn blendshape_vertices(
    model: &BlendshapeModel,
    beta: &DVector<f64>,
    phi: &DVector<f64>,
) -> Vec<Vector3<f64>> {
    let n = model.n_vertices();
    let mut offsets = DVector::zeros(3 * n);
    offsets.gemv(1.0, &model.identity_basis, beta, 0.0);
    offsets.gemv(1.0, &model.expression_basis, phi, 1.0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(
            model.template[i]
                + Vector3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]),
        );
    }
    out
}

/// Forward-kinematics state kept around for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LbsForward {
    pub joints: Vec<Vector3<f64>>,
    pub rel_rot: Vec<Matrix3<f64>>,
    pub world_rot: Vec<Matrix3<f64>>,
    pub world_pos: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
    pub order: Vec<usize>,
}

pub(crate) fn lbs_forward(
    model: &BlendshapeModel,
    rest: &[Vector3<f64>],
    theta: &DVector<f64>,
    order: &[usize],
) -> (Vec<Vector3<f64>>, LbsForward) {
    let n = rest.len();
    let k = model.n_joints();

    let mut joints = vec![Vector3::zeros(); k];
    for j in 0..k {
        let mut acc = Vector3::zeros();
        for i in 0..n {
            acc += rest[i] * model.joint_regressor[(j, i)];
        }
        joints[j] = acc;
    }

    let mut rel_rot = vec![Matrix3::identity(); k];
    for j in 0..k {
        let w = Vector3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
        rel_rot[j] = rotation_matrix(&w);
    }

    let mut world_rot = vec![Matrix3::identity(); k];
    let mut world_pos = vec![Vector3::zeros(); k];
    for &j in order {
        match model.joint_parents[j] {
            None => {
                world_rot[j] = rel_rot[j];
                world_pos[j] = joints[j];
            }
            Some(p) => {
                world_rot[j] = world_rot[p] * rel_rot[j];
                world_pos[j] = world_pos[p] + world_rot[p] * (joints[j] - joints[p]);
            }
        }
    }

    let root_translation = Vector3::new(theta[3 * k], theta[3 * k + 1], theta[3 * k + 2]);

    // Per-joint affine pieces: x -> world_rot[j] * (x - joints[j]) + world_pos[j].
    let mut trans = vec![Vector3::zeros(); k];
    for j in 0..k {
        trans[j] = world_pos[j] - world_rot[j] * joints[j];
    }

    let mut posed = Vec::with_capacity(n);
    for i in 0..n {
        let mut blend_rot = Matrix3::zeros();
        let mut blend_trans = Vector3::zeros();
        for j in 0..k {
            let w = model.skin_weights[(i, j)];
            if w != 0.0 {
                blend_rot += world_rot[j] * w;
                blend_trans += trans[j] * w;
            }
        }
        posed.push(blend_rot * rest[i] + blend_trans + root_translation);
    }

    let fwd = LbsForward {
        joints,
        rel_rot,
        world_rot,
        world_pos,
        root_translation,
        order: order.to_vec(),
    };
    (posed, fwd)
}

/// Gradients flowing out of the skinning step.
#[derive(Debug, Clone)]
pub(crate) struct LbsGrads {
    pub rest: Vec<Vector3<f64>>,
    pub theta: DVector<f64>,
}

/// Reverse pass through linear blend skinning: given `d E / d posed`,
/// accumulate gradients w.r.t. the rest vertices and the pose vector.
pub(crate) fn lbs_backward(
    model: &BlendshapeModel,
    fwd: &LbsForward,
    theta: &DVector<f64>,
    rest: &[Vector3<f64>],
    g_posed: &[Vector3<f64>],
    want_theta: bool,
) -> LbsGrads {
    let n = rest.len();
    let k = model.n_joints();

    // Per-joint adjoint masses: s[j] = sum_i w_ij g_i and the rotation
    // adjoint m[j] = sum_i w_ij g_i (v_i - J_j)^T.
    let mut s = vec![Vector3::zeros(); k];
    let mut m = vec![Matrix3::zeros(); k];
    for i in 0..n {
        for j in 0..k {
            let w = model.skin_weights[(i, j)];
            if w != 0.0 {
                let g = g_posed[i] * w;
                s[j] += g;
                if want_theta {
                    m[j] += g * (rest[i] - fwd.joints[j]).transpose();
                }
            }
        }
    }

    // Direct dependence through the blended rotation.
    let mut g_rest = vec![Vector3::zeros(); n];
    for i in 0..n {
        let mut blend_rot = Matrix3::zeros();
        for j in 0..k {
            let w = model.skin_weights[(i, j)];
            if w != 0.0 {
                blend_rot += fwd.world_rot[j] * w;
            }
        }
        g_rest[i] = blend_rot.transpose() * g_posed[i];
    }

    // Dependence through the rest joint locations. Joint world positions obey
    // W_j = W_p + Rw_p (J_j - J_p); accumulate adjoints bottom-up.
    let mut g_joints = vec![Vector3::zeros(); k];
    let mut w_adjoint = s.clone();
    for &j in fwd.order.iter().rev() {
        if let Some(p) = model.joint_parents[j] {
            let t = w_adjoint[j];
            w_adjoint[p] += t;
            let c = fwd.world_rot[p].transpose() * t;
            g_joints[j] += c;
            g_joints[p] -= c;
        } else {
            g_joints[j] += w_adjoint[j];
        }
    }
    // The per-joint shift -Rw_j J_j.
    for j in 0..k {
        g_joints[j] -= fwd.world_rot[j].transpose() * s[j];
    }
    for j in 0..k {
        if g_joints[j] != Vector3::zeros() {
            for i in 0..n {
                let a = model.joint_regressor[(j, i)];
                if a != 0.0 {
                    g_rest[i] += g_joints[j] * a;
                }
            }
        }
    }

    let mut g_theta = DVector::zeros(3 * k + 3);
    if want_theta {
        // Forward-mode over each pose coordinate; K is small.
        let mut d_world_rot = vec![Matrix3::zeros(); k];
        let mut d_world_pos = vec![Vector3::zeros(); k];
        for &jv in &fwd.order {
            let theta_j = Vector3::new(theta[3 * jv], theta[3 * jv + 1], theta[3 * jv + 2]);
            let jacs = rotation_jacobians(&theta_j);
            for a in 0..3 {
                for x in d_world_rot.iter_mut() {
                    *x = Matrix3::zeros();
                }
                for x in d_world_pos.iter_mut() {
                    *x = Vector3::zeros();
                }
                for &mj in &fwd.order {
                    if mj == jv {
                        d_world_rot[mj] = match model.joint_parents[mj] {
                            None => jacs[a],
                            Some(p) => fwd.world_rot[p] * jacs[a],
                        };
                        // d_world_pos stays zero: W depends on parent rotations only.
                    } else if let Some(p) = model.joint_parents[mj] {
                        d_world_rot[mj] = d_world_rot[p] * fwd.rel_rot[mj];
                        d_world_pos[mj] =
                            d_world_pos[p] + d_world_rot[p] * (fwd.joints[mj] - fwd.joints[p]);
                    }
                }
                // m[j] already carries the (v_i - J_j) shift, so the rotation
                // and joint-position adjoints cover the whole dependence.
                let mut acc = 0.0;
                for jj in 0..k {
                    acc += m[jj].component_mul(&d_world_rot[jj]).sum();
                    acc += s[jj].dot(&d_world_pos[jj]);
                }
                g_theta[3 * jv + a] = acc;
            }
        }
        // Root translation is applied last; its gradient is the total mass.
        let mut total = Vector3::zeros();
        for g in g_posed {
            total += *g;
        }
        for a in 0..3 {
            g_theta[3 * k + a] = total[a];
        }
    }

    LbsGrads { rest: g_rest, theta: g_theta }
}

/// Evaluate the model at the given parameters: blendshapes, then skinning,
/// then static per-vertex deformations.
pub fn evaluate_model(model: &BlendshapeModel, params: &ModelParams) -> Result<VertexSet> {
    params.check(model)?;
    let rest = blendshape_vertices(model, &params.beta, &params.phi);
    let mut out = if params.theta.iter().all(|&x| x == 0.0) {
        rest
    } else {
        let order = model.joint_order()?;
        lbs_forward(model, &rest, &params.theta, &order).0
    };
    for (v, d) in out.iter_mut().zip(&params.delta_d) {
        *v += d;
    }
    Ok(VertexSet::new(out))
}

/// Pose a vertex set by linear blend skinning with the given pose vector.
pub fn apply_lbs(rest: &VertexSet, model: &BlendshapeModel, theta: &DVector<f64>) -> Result<VertexSet> {
    if rest.len() != model.n_vertices() {
        return Err(Error::DimensionMismatch(format!(
            "rest vertex count {} does not match model {}",
            rest.len(),
            model.n_vertices()
        )));
    }
    if theta.len() != model.theta_len() {
        return Err(Error::DimensionMismatch(format!(
            "pose vector length {} does not match model {}",
            theta.len(),
            model.theta_len()
        )));
    }
    if !theta.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidData("non-finite pose vector".into()));
    }
    if theta.iter().all(|&x| x == 0.0) {
        return Ok(rest.clone());
    }
    let order = model.joint_order()?;
    Ok(VertexSet::new(lbs_forward(model, &rest.positions, theta, &order).0))
}

/// Neutral geometry for a given identity: expression and pose zeroed, static
/// deformations kept. Used by the neutral-shape prior.
pub fn neutral_vertices(
    model: &BlendshapeModel,
    beta: &DVector<f64>,
    delta_d: &[Vector3<f64>],
) -> Result<VertexSet> {
    let params = ModelParams {
        beta: beta.clone(),
        phi: DVector::zeros(model.b_ex()),
        theta: DVector::zeros(model.theta_len()),
        delta_d: delta_d.to_vec(),
    };
    evaluate_model(model, &params)
}
