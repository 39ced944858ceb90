//! Exact point-to-mesh distance queries over an axis-aligned bounding-box
//! hierarchy.
//!
//! The tree prunes with conservative box distances only, so a query returns
//! exactly the same minimum as a scan over every triangle
//! ([`exhaustive_closest_point`] is kept as the oracle for that claim).

use nalgebra::Vector3;

/// Closest point on a triangle to a query point (interior, edge, and vertex
/// cases). Falls back to edge distances for degenerate triangles.
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let denom = d1 - d3;
        if denom > 0.0 {
            return a + ab * (d1 / denom);
        }
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let denom = d2 - d6;
        if denom > 0.0 {
            return a + ac * (d2 / denom);
        }
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        if denom > 0.0 {
            return b + (c - b) * ((d4 - d3) / denom);
        }
    }
    let denom = va + vb + vc;
    if denom.abs() > 1e-300 {
        let inv = 1.0 / denom;
        let v = vb * inv;
        let w = vc * inv;
        let candidate = a + ab * v + ac * w;
        if candidate.iter().all(|x| x.is_finite()) {
            return candidate;
        }
    }
    // Degenerate triangle: nearest point on the three edges.
    let candidates = [
        closest_point_on_segment(p, a, b),
        closest_point_on_segment(p, b, c),
        closest_point_on_segment(p, c, a),
    ];
    let mut best = candidates[0];
    for cand in &candidates[1..] {
        if (p - cand).norm_squared() < (p - best).norm_squared() {
            best = *cand;
        }
    }
    best
}

fn closest_point_on_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestHit {
    pub distance: f64,
    pub point: Vector3<f64>,
    /// Index of the triangle in the original list.
    pub triangle: u32,
}

enum Node {
    Leaf { start: usize, count: usize },
    Internal { left: usize, right: usize },
}

struct NodeBox {
    min: Vector3<f64>,
    max: Vector3<f64>,
    node: Node,
}

/// Static AABB tree over a triangle soup. Immutable after build and safe to
/// share across threads.
pub struct TriangleBvh {
    tris: Vec<[Vector3<f64>; 3]>,
    original_index: Vec<u32>,
    nodes: Vec<NodeBox>,
    root: usize,
}

const LEAF_SIZE: usize = 4;

impl TriangleBvh {
    /// Build over explicit triangles. Empty input is rejected by callers
    /// (mesh validation demands at least one triangle for surface queries).
    pub fn new(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> Self {
        let tris: Vec<[Vector3<f64>; 3]> = triangles
            .iter()
            .map(|t| {
                [
                    vertices[t[0] as usize],
                    vertices[t[1] as usize],
                    vertices[t[2] as usize],
                ]
            })
            .collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let centroids: Vec<Vector3<f64>> =
            tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut nodes = Vec::new();
        let root = build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        let ordered_tris: Vec<[Vector3<f64>; 3]> = order.iter().map(|&i| tris[i]).collect();
        let original_index: Vec<u32> = order.iter().map(|&i| i as u32).collect();
        TriangleBvh { tris: ordered_tris, original_index, nodes, root }
    }

    pub fn n_triangles(&self) -> usize {
        self.tris.len()
    }

    /// Exact closest point on the mesh surface.
    pub fn closest_point(&self, p: &Vector3<f64>) -> ClosestHit {
        assert!(!self.tris.is_empty(), "closest_point on an empty mesh");
        let mut best = ClosestHit {
            distance: f64::INFINITY,
            point: Vector3::zeros(),
            triangle: 0,
        };
        let mut best_d2 = f64::INFINITY;
        self.visit(self.root, p, &mut best, &mut best_d2);
        best.distance = best_d2.sqrt();
        best
    }

    fn visit(&self, node: usize, p: &Vector3<f64>, best: &mut ClosestHit, best_d2: &mut f64) {
        let nb = &self.nodes[node];
        match nb.node {
            Node::Leaf { start, count } => {
                for k in start..start + count {
                    let t = &self.tris[k];
                    let q = closest_point_on_triangle(p, &t[0], &t[1], &t[2]);
                    let d2 = (p - q).norm_squared();
                    if d2 < *best_d2 {
                        *best_d2 = d2;
                        best.point = q;
                        best.triangle = self.original_index[k];
                    }
                }
            }
            Node::Internal { left, right } => {
                let dl = aabb_dist2(p, &self.nodes[left].min, &self.nodes[left].max);
                let dr = aabb_dist2(p, &self.nodes[right].min, &self.nodes[right].max);
                let (first, second, d_first, d_second) =
                    if dl <= dr { (left, right, dl, dr) } else { (right, left, dr, dl) };
                if d_first < *best_d2 {
                    self.visit(first, p, best, best_d2);
                }
                if d_second < *best_d2 {
                    self.visit(second, p, best, best_d2);
                }
            }
        }
    }
}

fn aabb_dist2(p: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let d = (min[a] - p[a]).max(0.0).max(p[a] - max[a]);
        d2 += d * d;
    }
    d2
}

fn build_node(
    tris: &[[Vector3<f64>; 3]],
    centroids: &[Vector3<f64>],
    order: &mut [usize],
    lo: usize,
    hi: usize,
    nodes: &mut Vec<NodeBox>,
) -> usize {
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for &idx in &order[lo..hi] {
        for v in &tris[idx] {
            min = min.inf(v);
            max = max.sup(v);
        }
    }
    if hi - lo <= LEAF_SIZE {
        nodes.push(NodeBox { min, max, node: Node::Leaf { start: lo, count: hi - lo } });
        return nodes.len() - 1;
    }
    // Median split along the widest centroid axis.
    let mut cmin = Vector3::repeat(f64::INFINITY);
    let mut cmax = Vector3::repeat(f64::NEG_INFINITY);
    for &idx in &order[lo..hi] {
        cmin = cmin.inf(&centroids[idx]);
        cmax = cmax.sup(&centroids[idx]);
    }
    let extent = cmax - cmin;
    let mut axis = 0;
    for a in 1..3 {
        if extent[a] > extent[axis] {
            axis = a;
        }
    }
    let mid = (lo + hi) / 2;
    order[lo..hi].sort_unstable_by(|&i, &j| {
        centroids[i][axis].total_cmp(&centroids[j][axis]).then(i.cmp(&j))
    });
    let left = build_node(tris, centroids, order, lo, mid, nodes);
    let right = build_node(tris, centroids, order, mid, hi, nodes);
    nodes.push(NodeBox { min, max, node: Node::Internal { left, right } });
    nodes.len() - 1
}

/// Scan every triangle; the oracle the BVH must agree with exactly.
pub fn exhaustive_closest_point(
    vertices: &[Vector3<f64>],
    triangles: &[[u32; 3]],
    p: &Vector3<f64>,
) -> ClosestHit {
    assert!(!triangles.is_empty(), "closest point on an empty mesh");
    let mut best = ClosestHit { distance: f64::INFINITY, point: Vector3::zeros(), triangle: 0 };
    let mut best_d2 = f64::INFINITY;
    for (k, t) in triangles.iter().enumerate() {
        let q = closest_point_on_triangle(
            p,
            &vertices[t[0] as usize],
            &vertices[t[1] as usize],
            &vertices[t[2] as usize],
        );
        let d2 = (p - q).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best.point = q;
            best.triangle = k as u32;
        }
    }
    best.distance = best_d2.sqrt();
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural::miniature_head;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_above_triangle_interior() {
        let a = Vector3::new(-1.0, -1.0, 0.0);
        let b = Vector3::new(1.0, -1.0, 0.0);
        let c = Vector3::new(0.0, 1.0, 0.0);
        let q = closest_point_on_triangle(&Vector3::new(0.0, 0.0, 1.0), &a, &b, &c);
        assert_relative_eq!(q, Vector3::new(0.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn vertex_edge_and_face_cases() {
        let a = Vector3::zeros();
        let b = Vector3::new(1.0, 0.0, 0.0);
        let c = Vector3::new(0.0, 1.0, 0.0);
        // Beyond vertex a.
        let q = closest_point_on_triangle(&Vector3::new(-1.0, -1.0, 0.3), &a, &b, &c);
        assert_eq!(q, a);
        // Past edge ab.
        let q = closest_point_on_triangle(&Vector3::new(0.5, -2.0, 0.0), &a, &b, &c);
        assert_relative_eq!(q, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        // Interior projection.
        let q = closest_point_on_triangle(&Vector3::new(0.2, 0.2, -0.7), &a, &b, &c);
        assert_relative_eq!(q, Vector3::new(0.2, 0.2, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_triangle_falls_back_to_edges() {
        let a = Vector3::zeros();
        let b = Vector3::new(1.0, 0.0, 0.0);
        let q = closest_point_on_triangle(&Vector3::new(0.5, 1.0, 0.0), &a, &b, &b);
        assert_relative_eq!(q, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn bvh_matches_exhaustive_scan_exactly() {
        let model = miniature_head();
        let bvh = TriangleBvh::new(&model.template, &model.triangles);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            let fast = bvh.closest_point(&p);
            let slow = exhaustive_closest_point(&model.template, &model.triangles, &p);
            assert_eq!(fast.distance, slow.distance, "query {p:?}");
        }
    }

    #[test]
    fn mesh_vertex_has_zero_distance() {
        let model = miniature_head();
        let bvh = TriangleBvh::new(&model.template, &model.triangles);
        for i in [0usize, 17, 80, 161] {
            let hit = bvh.closest_point(&model.template[i]);
            assert!(hit.distance < 1e-12, "vertex {i}: {}", hit.distance);
        }
    }

    #[test]
    fn distance_never_exceeds_any_vertex_distance() {
        let model = miniature_head();
        let bvh = TriangleBvh::new(&model.template, &model.triangles);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let hit = bvh.closest_point(&p);
            let min_vertex = model
                .template
                .iter()
                .map(|v| (p - v).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(hit.distance <= min_vertex + 1e-12);
        }
    }
}
