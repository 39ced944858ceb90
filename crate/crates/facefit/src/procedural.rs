//! Procedurally generated head models.
//!
//! No real morphable-model asset ships with this crate, so tests, examples
//! and benchmarks run on synthetic heads built here: a 162-vertex
//! icosphere-derived miniature with labeled face regions, and a
//! configurable-size variant for scale tests. Both are deterministic.

use std::collections::HashMap;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{BlendshapeModel, Region};

/// Default alignment weight for face-area vertices.
pub const VERTEX_WEIGHT_HIGH: f64 = 1.0;
/// Default alignment weight for everything else (scalp, neck, back).
pub const VERTEX_WEIGHT_LOW: f64 = 0.005;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Angular coordinates of a point on the head: azimuth 0 faces +z (the
/// "face" direction), elevation is positive upward.
fn angles(p: &Vector3<f64>) -> (f64, f64) {
    let azimuth = p.x.atan2(p.z);
    let elevation = (p.y / p.norm()).asin();
    (azimuth, elevation)
}

fn classify_region(dir: &Vector3<f64>) -> Region {
    let (az, el) = angles(dir);
    let a = az.abs();
    if a <= 0.28 && (-0.16..=0.24).contains(&el) {
        Region::Nose
    } else if a <= 0.52 && (-0.62..=-0.17).contains(&el) {
        Region::Mouth
    } else if (0.14..=0.62).contains(&a) && (0.26..=0.62).contains(&el) {
        Region::Eyes
    } else if (1.15..=1.95).contains(&a) && el.abs() <= 0.42 {
        Region::Ears
    } else if a <= 1.1 && el.abs() <= 0.95 {
        Region::Face
    } else {
        Region::Other
    }
}

fn weight_for(region: Region) -> f64 {
    if region == Region::Other {
        VERTEX_WEIGHT_LOW
    } else {
        VERTEX_WEIGHT_HIGH
    }
}

/// Unit icosahedron vertices and faces.
fn icosahedron() -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let vertices: Vec<Vector3<f64>> = raw
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (vertices, faces)
}

/// Subdivide each triangle into four and re-project onto the unit sphere.
fn subdivide(vertices: &mut Vec<Vector3<f64>>, faces: &[[u32; 3]]) -> Vec<[u32; 3]> {
    let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
    let mut out = Vec::with_capacity(faces.len() * 4);
    let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vector3<f64>>| -> u32 {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let m = (vertices[a as usize] + vertices[b as usize]).normalize();
            vertices.push(m);
            (vertices.len() - 1) as u32
        })
    };
    for &[a, b, c] in faces {
        let ab = mid(a, b, vertices);
        let bc = mid(b, c, vertices);
        let ca = mid(c, a, vertices);
        out.push([a, ab, ca]);
        out.push([b, bc, ab]);
        out.push([c, ca, bc]);
        out.push([ab, bc, ca]);
    }
    out
}

/// Unit-sphere directions and triangles of an icosphere with the given
/// subdivision level (level 2 gives 162 vertices / 320 triangles).
pub fn icosphere(level: u32) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let (mut vertices, mut faces) = icosahedron();
    for _ in 0..level {
        faces = subdivide(&mut vertices, &faces);
    }
    (vertices, faces)
}

/// Smooth angular window centered at (az0, el0), used to localize
/// expression shapes.
fn window(dir: &Vector3<f64>, az0: f64, el0: f64, spread: f64) -> f64 {
    let (az, el) = angles(dir);
    let d2 = (az - az0).powi(2) + (el - el0).powi(2);
    (-d2 / (2.0 * spread * spread)).exp()
}

fn head_surface(dir: &Vector3<f64>) -> Vector3<f64> {
    // Slightly elongated ellipsoid with a nose bump.
    let base = Vector3::new(dir.x * 0.082, dir.y * 0.105, dir.z * 0.078);
    let nose = window(dir, 0.0, 0.02, 0.20) * 0.016;
    base + dir * nose
}

/// The miniature test head: 162 vertices, 8 identity and 6 expression
/// shapes, a 2-joint (head/jaw) skeleton, labeled regions, and icosphere
/// topology. Deterministic; all tests and examples build on it.
pub fn miniature_head() -> BlendshapeModel {
    let (dirs, triangles) = icosphere(2);
    build_head(&dirs, triangles, 8, 6, 2, 42)
}

/// A head with an arbitrary vertex count on a Fibonacci sphere. Bases are
/// seeded smooth bump fields. No triangles are generated, so the result is
/// only suitable for fitting-path benchmarks.
pub fn synthetic_head(
    n_vertices: usize,
    b_id: usize,
    b_ex: usize,
    n_joints: usize,
    seed: u64,
) -> BlendshapeModel {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let mut dirs = Vec::with_capacity(n_vertices);
    for i in 0..n_vertices {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_vertices as f64;
        let r = (1.0 - y * y).sqrt();
        let t = golden * i as f64;
        dirs.push(Vector3::new(r * t.cos(), y, r * t.sin()));
    }
    build_head(&dirs, Vec::new(), b_id, b_ex, n_joints, seed)
}

fn build_head(
    dirs: &[Vector3<f64>],
    triangles: Vec<[u32; 3]>,
    b_id: usize,
    b_ex: usize,
    n_joints: usize,
    seed: u64,
) -> BlendshapeModel {
    assert!(n_joints >= 1);
    let n = dirs.len();
    let template: Vec<Vector3<f64>> = dirs.iter().map(head_surface).collect();
    let region_labels: Vec<Region> = dirs.iter().map(classify_region).collect();
    let vertex_weights: Vec<f64> = region_labels.iter().map(|&r| weight_for(r)).collect();
    let uv_coords: Vec<[f64; 2]> = dirs
        .iter()
        .map(|d| {
            let (az, el) = angles(d);
            [az / (2.0 * std::f64::consts::PI) + 0.5, el / std::f64::consts::PI + 0.5]
        })
        .collect();

    // Identity shapes: radial displacement modulated by low-order harmonics
    // of the direction, plus seeded smooth bump fields past the first eight.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp_id = 0.010;
    let mut identity_basis = DMatrix::zeros(3 * n, b_id);
    let harmonics: [fn(&Vector3<f64>) -> f64; 8] = [
        |_| 1.0,
        |d| d.x,
        |d| d.y,
        |d| d.z,
        |d| d.x * d.y,
        |d| d.y * d.z,
        |d| d.x * d.z,
        |d| d.x * d.x - d.y * d.y,
    ];
    let bumps = |rng: &mut ChaCha8Rng| -> Vec<(Vector3<f64>, f64, f64)> {
        (0..6)
            .map(|_| {
                let c = random_direction(rng);
                let spread = rng.gen_range(0.25..0.7);
                let amp = rng.gen_range(-1.0..1.0);
                (c, spread, amp)
            })
            .collect()
    };
    for b in 0..b_id {
        for (i, d) in dirs.iter().enumerate() {
            let f = if b < harmonics.len() {
                harmonics[b](d)
            } else {
                0.0
            };
            let disp = d * (f * amp_id);
            identity_basis[(3 * i, b)] = disp.x;
            identity_basis[(3 * i + 1, b)] = disp.y;
            identity_basis[(3 * i + 2, b)] = disp.z;
        }
        if b >= harmonics.len() {
            let field = bumps(&mut rng);
            for (i, d) in dirs.iter().enumerate() {
                let mut f = 0.0;
                for (c, spread, amp) in &field {
                    let cosang = d.dot(c).clamp(-1.0, 1.0);
                    f += amp * (-(1.0 - cosang) / (spread * spread)).exp();
                }
                let disp = d * (f * amp_id);
                identity_basis[(3 * i, b)] = disp.x;
                identity_basis[(3 * i + 1, b)] = disp.y;
                identity_basis[(3 * i + 2, b)] = disp.z;
            }
        }
    }

    // Expression shapes: localized motions around mouth, eyes, cheeks, nose.
    let amp_ex = 0.012;
    let mut expression_basis = DMatrix::zeros(3 * n, b_ex);
    type Field = Box<dyn Fn(&Vector3<f64>) -> Vector3<f64>>;
    let named: Vec<Field> = vec![
        // jaw/mouth open
        Box::new(|d| Vector3::new(0.0, -1.0, 0.2) * window(d, 0.0, -0.4, 0.35)),
        // smile: mouth corners outward and up
        Box::new(|d| {
            let w = window(d, 0.45, -0.35, 0.25) - window(d, -0.45, -0.35, 0.25);
            Vector3::new(1.0, 0.4, 0.0) * w
        }),
        // brow raise
        Box::new(|d| {
            Vector3::new(0.0, 1.0, 0.1)
                * (window(d, 0.35, 0.45, 0.3) + window(d, -0.35, 0.45, 0.3))
        }),
        // cheek puff: radial in the cheek area
        Box::new(|d| *d * (window(d, 0.7, -0.15, 0.3) + window(d, -0.7, -0.15, 0.3))),
        // nose wrinkle
        Box::new(|d| Vector3::new(0.0, 0.6, -0.8) * window(d, 0.0, 0.05, 0.2)),
        // mouth pucker: toward the center of the mouth
        Box::new(|d| Vector3::new(-d.x, 0.0, 0.3) * window(d, 0.0, -0.4, 0.3)),
    ];
    for b in 0..b_ex {
        if b < named.len() {
            for (i, d) in dirs.iter().enumerate() {
                let disp = named[b](d) * amp_ex;
                expression_basis[(3 * i, b)] = disp.x;
                expression_basis[(3 * i + 1, b)] = disp.y;
                expression_basis[(3 * i + 2, b)] = disp.z;
            }
        } else {
            let field = bumps(&mut rng);
            for (i, d) in dirs.iter().enumerate() {
                let mut f = 0.0;
                for (c, spread, amp) in &field {
                    let cosang = d.dot(c).clamp(-1.0, 1.0);
                    f += amp * (-(1.0 - cosang) / (spread * spread)).exp();
                }
                let disp = d * (f * amp_ex);
                expression_basis[(3 * i, b)] = disp.x;
                expression_basis[(3 * i + 1, b)] = disp.y;
                expression_basis[(3 * i + 2, b)] = disp.z;
            }
        }
    }

    // Skeleton: joint 0 is the head root; further joints hang off it in a
    // chain, the first one acting as a jaw. Regressor rows are normalized
    // smooth weights so joints sit at stable anatomical spots.
    let joint_parents: Vec<Option<usize>> =
        (0..n_joints).map(|j| if j == 0 { None } else { Some(j - 1) }).collect();
    let mut joint_regressor = DMatrix::zeros(n_joints, n);
    for j in 0..n_joints {
        let (az0, el0, spread) = match j {
            0 => (0.0, 0.0, 10.0), // root: near-uniform average, head center
            1 => (0.0, -0.55, 0.5),
            _ => (0.0, -0.9 + 0.2 * j as f64, 0.6),
        };
        let mut row: Vec<f64> = dirs.iter().map(|d| window(d, az0, el0, spread)).collect();
        let sum: f64 = row.iter().sum();
        for w in row.iter_mut() {
            *w /= sum;
        }
        for (i, w) in row.iter().enumerate() {
            joint_regressor[(j, i)] = *w;
        }
    }
    let mut skin_weights = DMatrix::zeros(n, n_joints);
    if n_joints == 1 {
        skin_weights.fill(1.0);
    } else {
        for (i, d) in dirs.iter().enumerate() {
            let (az, el) = angles(d);
            // Lower-front vertices follow the jaw chain.
            let jaw = logistic((-el - 0.30) / 0.10) * logistic((1.2 - az.abs()) / 0.25);
            let chain = n_joints - 1;
            skin_weights[(i, 0)] = 1.0 - jaw;
            for j in 1..n_joints {
                skin_weights[(i, j)] = jaw / chain as f64;
            }
        }
    }

    let model = BlendshapeModel {
        template,
        identity_basis,
        expression_basis,
        joint_regressor,
        skin_weights,
        joint_parents,
        vertex_weights,
        region_labels,
        uv_coords,
        triangles,
    };
    model.validate().expect("procedural model must satisfy invariants");
    model
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_head_is_valid_icosphere() {
        let m = miniature_head();
        assert_eq!(m.n_vertices(), 162);
        assert_eq!(m.triangles.len(), 320);
        assert_eq!(m.b_id(), 8);
        assert_eq!(m.b_ex(), 6);
        assert_eq!(m.n_joints(), 2);
        m.validate().unwrap();
    }

    #[test]
    fn every_region_is_populated() {
        let m = miniature_head();
        for region in Region::ALL {
            let count = m.region_labels.iter().filter(|&&r| r == region).count();
            assert!(count > 0, "region {} has no vertices", region.name());
        }
    }

    #[test]
    fn weights_follow_regions() {
        let m = miniature_head();
        for (w, r) in m.vertex_weights.iter().zip(&m.region_labels) {
            if *r == Region::Other {
                assert_eq!(*w, VERTEX_WEIGHT_LOW);
            } else {
                assert_eq!(*w, VERTEX_WEIGHT_HIGH);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(miniature_head(), miniature_head());
        let a = synthetic_head(500, 16, 8, 5, 7);
        let b = synthetic_head(500, 16, 8, 5, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_head_scales() {
        let m = synthetic_head(1000, 20, 10, 5, 3);
        assert_eq!(m.n_vertices(), 1000);
        m.validate().unwrap();
    }
}
