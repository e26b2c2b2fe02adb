//! Isosurface extraction and the two geometry metrics.
//!
//! Marching cubes runs the canonical 256-case tables with edge-linear
//! interpolation and welds vertices on shared edges, so manifoldness is
//! checkable. Chamfer distance compares area-uniform point samples with
//! exact nearest-neighbor queries; normal error walks ground-truth
//! vertices to their closest point on the predicted surface.

mod mc_tables;

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use crate::formats::TriangleMesh;
use crate::field::SdfFieldModel;
use crate::scene::AnalyticShape;
use crate::{Error, Result};

/// A scalar field that marching cubes and metrics can sample.
pub trait FieldEval: Sync {
    fn value(&self, p: Vector3<f64>) -> f64;
    fn gradient(&self, p: Vector3<f64>) -> Vector3<f64>;

    fn values_batch(&self, pts: &[Vector3<f64>]) -> Vec<f64> {
        pts.iter().map(|&p| self.value(p)).collect()
    }

    fn gradients_batch(&self, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        pts.iter().map(|&p| self.gradient(p)).collect()
    }
}

impl FieldEval for AnalyticShape {
    fn value(&self, p: Vector3<f64>) -> f64 {
        self.sdf(p)
    }

    fn gradient(&self, p: Vector3<f64>) -> Vector3<f64> {
        AnalyticShape::gradient(self, p)
    }
}

impl FieldEval for SdfFieldModel {
    fn value(&self, p: Vector3<f64>) -> f64 {
        self.sdf_value([p.x, p.y, p.z])
    }

    fn gradient(&self, p: Vector3<f64>) -> Vector3<f64> {
        let j = self.sdf_jet([p.x, p.y, p.z]);
        Vector3::new(j.d[0], j.d[1], j.d[2])
    }

    fn values_batch(&self, pts: &[Vector3<f64>]) -> Vec<f64> {
        let flat: Vec<[f64; 3]> = pts.iter().map(|p| [p.x, p.y, p.z]).collect();
        self.sdf_values(&flat)
    }

    fn gradients_batch(&self, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let flat: Vec<[f64; 3]> = pts.iter().map(|p| [p.x, p.y, p.z]).collect();
        self.sdf_jets(&flat)
            .into_iter()
            .map(|j| Vector3::new(j.d[0], j.d[1], j.d[2]))
            .collect()
    }
}

/// Default extraction bounds, matching the ray-sampling bounding ball.
pub const DEFAULT_BOUNDS: (f64, f64) = (-1.05, 1.05);

const CORNER_OFFSETS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

/// Edge -> (corner a, corner b).
const EDGE_CORNERS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Extract the `iso` level set of `field` on a `resolution^3` cell grid
/// over `bounds`. Vertices on shared edges are welded; vertex normals come
/// from the field gradient; faces wind so normals point toward increasing
/// field values. An empty level set gives an empty mesh.
pub fn marching_cubes(
    field: &dyn FieldEval,
    resolution: usize,
    bounds: (f64, f64),
    iso: f64,
) -> TriangleMesh {
    assert!(resolution >= 8, "resolution below 8 is not meaningful");
    let n = resolution;
    let npts = n + 1;
    let (lo, hi) = bounds;
    let step = (hi - lo) / n as f64;
    let coord = |i: usize| lo + step * i as f64;

    // Field values on the vertex grid, one z-slab at a time.
    let mut values = vec![0.0f64; npts * npts * npts];
    values
        .par_chunks_mut(npts * npts)
        .enumerate()
        .for_each(|(k, slab)| {
            let mut pts = Vec::with_capacity(npts * npts);
            for j in 0..npts {
                for i in 0..npts {
                    pts.push(Vector3::new(coord(i), coord(j), coord(k)));
                }
            }
            slab.copy_from_slice(&field.values_batch(&pts));
        });
    let vidx = |i: usize, j: usize, k: usize| (k * npts + j) * npts + i;

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(u8, usize, usize, usize), usize> = HashMap::new();

    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let mut corner_vals = [0.0f64; 8];
                let mut config = 0usize;
                for (c, &(dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
                    let v = values[vidx(i + dx, j + dy, k + dz)];
                    corner_vals[c] = v;
                    if v < iso {
                        config |= 1 << c;
                    }
                }
                if mc_tables::EDGE_TABLE[config] == 0 {
                    continue;
                }
                let mut edge_to_vertex = [usize::MAX; 12];
                for (e, &(ca, cb)) in EDGE_CORNERS.iter().enumerate() {
                    if mc_tables::EDGE_TABLE[config] & (1 << e) == 0 {
                        continue;
                    }
                    let (ax, ay, az) = CORNER_OFFSETS[ca];
                    let (bx, by, bz) = CORNER_OFFSETS[cb];
                    // canonical key: axis and the edge's minimal grid corner
                    let (axis, gx, gy, gz) = if ax != bx {
                        (0u8, i + ax.min(bx), j + ay, k + az)
                    } else if ay != by {
                        (1u8, i + ax, j + ay.min(by), k + az)
                    } else {
                        (2u8, i + ax, j + ay, k + az.min(bz))
                    };
                    let key = (axis, gx, gy, gz);
                    let vert = *edge_vertex.entry(key).or_insert_with(|| {
                        let (fa, fb) = (corner_vals[ca], corner_vals[cb]);
                        let t = if (fb - fa).abs() < 1e-300 {
                            0.5
                        } else {
                            ((iso - fa) / (fb - fa)).clamp(0.0, 1.0)
                        };
                        let pa = Vector3::new(
                            coord(i + ax),
                            coord(j + ay),
                            coord(k + az),
                        );
                        let pb = Vector3::new(
                            coord(i + bx),
                            coord(j + by),
                            coord(k + bz),
                        );
                        mesh.vertices.push(pa + t * (pb - pa));
                        mesh.vertices.len() - 1
                    });
                    edge_to_vertex[e] = vert;
                }
                let tris = &mc_tables::TRIANGLE_TABLE[config];
                let mut t = 0;
                while t < 16 && tris[t] >= 0 {
                    let f = [
                        edge_to_vertex[tris[t] as usize],
                        edge_to_vertex[tris[t + 1] as usize],
                        edge_to_vertex[tris[t + 2] as usize],
                    ];
                    if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                        mesh.faces.push(f);
                    }
                    t += 3;
                }
            }
        }
    }

    if mesh.vertices.is_empty() {
        return mesh;
    }

    // Vertex normals from the field gradient (outward: toward larger f).
    mesh.normals = mesh
        .vertices
        .par_chunks(4096)
        .flat_map_iter(|chunk| {
            field
                .gradients_batch(chunk)
                .into_iter()
                .map(|g| {
                    let n = g.norm();
                    if n > 1e-12 {
                        g / n
                    } else {
                        Vector3::new(0.0, 0.0, 1.0)
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    // The case tables fix a global winding; align it with the gradient.
    let mut agree = 0usize;
    let mut disagree = 0usize;
    for f in &mesh.faces {
        let fn_ = face_normal(&mesh, *f);
        let g = mesh.normals[f[0]] + mesh.normals[f[1]] + mesh.normals[f[2]];
        if fn_.dot(&g) >= 0.0 {
            agree += 1;
        } else {
            disagree += 1;
        }
    }
    if disagree > agree {
        for f in mesh.faces.iter_mut() {
            f.swap(1, 2);
        }
    }

    // Drop zero-area slivers left by grid-coincident vertices.
    mesh.faces.retain(|&f| {
        let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        (b - a).cross(&(c - a)).norm() > 1e-18
    });
    mesh
}

fn face_normal(mesh: &TriangleMesh, f: [usize; 3]) -> Vector3<f64> {
    let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    (b - a).cross(&(c - a))
}

/// Every edge shared by exactly two faces, with opposing direction
/// (a closed orientable 2-manifold). Also returns V - E + F.
pub fn manifold_check(mesh: &TriangleMesh) -> (bool, i64) {
    let mut edge_count: HashMap<(usize, usize), i64> = HashMap::new();
    for f in &mesh.faces {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            *edge_count.entry(key).or_insert(0) += 1;
        }
    }
    let closed = edge_count.values().all(|&c| c == 2);
    let euler = mesh.vertices.len() as i64 - edge_count.len() as i64 + mesh.faces.len() as i64;
    (closed, euler)
}

/// Area-uniform surface samples with a deterministic stream.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for &f in &mesh.faces {
        acc += mesh.face_area(f);
        cum.push(acc);
    }
    let total = acc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let target = rng.gen::<f64>() * total;
            let fi = cum.partition_point(|&c| c < target).min(mesh.faces.len() - 1);
            let f = mesh.faces[fi];
            let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + u * (b - a) + v * (c - a)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// exact nearest neighbors
// ---------------------------------------------------------------------------

/// Exact nearest-neighbor queries over a fixed point set.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // nodes store (split axis, split value); leaves hold index ranges
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

const KD_LEAF: usize = 16;

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(&points, &mut order, 0, points.len(), &mut nodes);
        }
        KdTree { points, order, nodes }
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: Vector3<f64>, best: &mut (usize, f64)) {
        match &self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d2 = (self.points[i as usize] - q).norm_squared();
                    if d2 < best.1 {
                        *best = (i as usize, d2);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta <= 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, q, best);
                if delta * delta < best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<KdNode>,
) -> usize {
    let me = nodes.len();
    if end - start <= KD_LEAF {
        nodes.push(KdNode::Leaf { start, end });
        return me;
    }
    // split the widest axis at its median
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in &order[start..end] {
        let p = points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end]
        .select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis])
        });
    let value = points[order[mid] as usize][axis];
    nodes.push(KdNode::Leaf { start: 0, end: 0 }); // placeholder
    let left = build_node(points, order, start, mid, nodes);
    let right = build_node(points, order, mid, end, nodes);
    nodes[me] = KdNode::Split { axis, value, left, right };
    me
}

/// Default sampling density for the Chamfer metric.
pub const CHAMFER_SAMPLES: usize = 100_000;
const CHAMFER_SEED: u64 = 0x5d_f0e1;

/// Symmetric Chamfer distance in scene units:
/// `0.5 (mean_a min_b |a-b| + mean_b min_a |a-b|)` over area-uniform
/// samples with a fixed seed, so the metric is exactly symmetric.
pub fn chamfer(a: &TriangleMesh, b: &TriangleMesh, n_samples: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMesh("chamfer"));
    }
    let pa = sample_surface(a, n_samples, CHAMFER_SEED);
    let pb = sample_surface(b, n_samples, CHAMFER_SEED);
    let ta = KdTree::build(pa.clone());
    let tb = KdTree::build(pb.clone());
    let mean_ab = mean_nearest(&pa, &tb);
    let mean_ba = mean_nearest(&pb, &ta);
    Ok(0.5 * (mean_ab + mean_ba))
}

fn mean_nearest(queries: &[Vector3<f64>], tree: &KdTree) -> f64 {
    let sum: f64 = queries
        .par_chunks(2048)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&q| tree.nearest(q).1.sqrt())
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    sum / queries.len() as f64
}

// ---------------------------------------------------------------------------
// normal mean angular error
// ---------------------------------------------------------------------------

/// Closest point on triangle `(a, b, c)` to `p`, with barycentrics.
fn closest_point_on_triangle(
    p: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> (Vector3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + v * ab, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + w * ac, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + w * (c - b), [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Exact closest point on a mesh via centroid tree + radius-bounded sweep.
pub struct MeshLocator<'a> {
    mesh: &'a TriangleMesh,
    centroids: KdTree,
    max_radius: f64,
}

impl<'a> MeshLocator<'a> {
    pub fn build(mesh: &'a TriangleMesh) -> Self {
        let mut centroids = Vec::with_capacity(mesh.faces.len());
        let mut max_radius: f64 = 0.0;
        for &f in &mesh.faces {
            let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            let cen = (a + b + c) / 3.0;
            for v in [a, b, c] {
                max_radius = max_radius.max((v - cen).norm());
            }
            centroids.push(cen);
        }
        MeshLocator {
            mesh,
            centroids: KdTree::build(centroids),
            max_radius,
        }
    }

    /// Closest surface point, its face, and barycentric coordinates.
    pub fn closest(&self, q: Vector3<f64>) -> (Vector3<f64>, usize, [f64; 3]) {
        let (seed_face, _) = self.centroids.nearest(q);
        let f = self.mesh.faces[seed_face];
        let (mut best_pt, mut best_bary) = {
            let (pt, bary) = closest_point_on_triangle(
                q,
                self.mesh.vertices[f[0]],
                self.mesh.vertices[f[1]],
                self.mesh.vertices[f[2]],
            );
            (pt, bary)
        };
        let mut best_face = seed_face;
        let mut best_d2 = (best_pt - q).norm_squared();

        // Any face beating best_d2 has centroid within best_d + max_radius.
        let bound = best_d2.sqrt() + self.max_radius;
        let bound2 = bound * bound;
        for (fi, &face) in self.mesh.faces.iter().enumerate() {
            let cen = self.centroids.points[fi];
            if (cen - q).norm_squared() > bound2 {
                continue;
            }
            let (pt, bary) = closest_point_on_triangle(
                q,
                self.mesh.vertices[face[0]],
                self.mesh.vertices[face[1]],
                self.mesh.vertices[face[2]],
            );
            let d2 = (pt - q).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best_pt = pt;
                best_bary = bary;
                best_face = fi;
            }
        }
        (best_pt, best_face, best_bary)
    }
}

/// Mean angular error in degrees: for every ground-truth vertex, find the
/// nearest predicted surface point and compare its interpolated normal.
pub fn normal_mae_degrees(pred: &TriangleMesh, gt: &TriangleMesh) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyMesh("normal_mae"));
    }
    if pred.normals.len() != pred.vertices.len() || gt.normals.len() != gt.vertices.len() {
        return Err(Error::Format {
            what: "mesh",
            detail: "normal_mae requires per-vertex normals".into(),
        });
    }
    let locator = MeshLocator::build(pred);
    let angles: Vec<f64> = gt
        .vertices
        .par_iter()
        .zip(gt.normals.par_iter())
        .filter(|(_, n)| n.norm() > 1e-9)
        .map(|(&v, n)| {
            let (_, face, bary) = locator.closest(v);
            let f = pred.faces[face];
            let interp = bary[0] * pred.normals[f[0]]
                + bary[1] * pred.normals[f[1]]
                + bary[2] * pred.normals[f[2]];
            let ni = interp.norm();
            if ni < 1e-12 {
                return 0.0;
            }
            let cosang = (interp / ni).dot(&n.normalize()).clamp(-1.0, 1.0);
            cosang.acos().to_degrees()
        })
        .collect();
    Ok(angles.iter().sum::<f64>() / angles.len() as f64)
}

/// Latitude-longitude sphere mesh with exact normals, for metric oracles.
pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let mut mesh = TriangleMesh::default();
    for r in 0..=rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = std::f64::consts::TAU * s as f64 / segments as f64;
            let n = Vector3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            );
            mesh.vertices.push(radius * n);
            mesh.normals.push(n);
        }
    }
    let at = |r: usize, s: usize| r * segments + (s % segments);
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = (at(r, s), at(r + 1, s), at(r + 1, s + 1), at(r, s + 1));
            mesh.faces.push([a, b, c]);
            mesh.faces.push([a, c, d]);
        }
    }
    // drop degenerate pole slivers
    let verts = &mesh.vertices;
    mesh.faces.retain(|&f| {
        let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        (b - a).cross(&(c - a)).norm() > 1e-15
    });
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_extraction_is_closed_genus_zero_with_small_residual() {
        let shape = AnalyticShape::sphere(0.5);
        let mesh = marching_cubes(&shape, 64, DEFAULT_BOUNDS, 0.0);
        assert!(!mesh.is_empty());
        let (closed, euler) = manifold_check(&mesh);
        assert!(closed, "not a closed 2-manifold");
        assert_eq!(euler, 2, "genus != 0");
        let cell = 2.1 / 64.0;
        let diag = cell * 3.0f64.sqrt();
        for v in &mesh.vertices {
            assert!(shape.sdf(*v).abs() <= diag);
        }
    }

    #[test]
    fn all_positive_field_gives_empty_mesh() {
        struct Pos;
        impl FieldEval for Pos {
            fn value(&self, _: Vector3<f64>) -> f64 {
                1.0
            }
            fn gradient(&self, _: Vector3<f64>) -> Vector3<f64> {
                Vector3::zeros()
            }
        }
        let mesh = marching_cubes(&Pos, 16, DEFAULT_BOUNDS, 0.0);
        assert!(mesh.is_empty());
    }

    #[test]
    fn sphere_area_matches_analytic_within_one_percent() {
        let shape = AnalyticShape::sphere(0.5);
        let mesh = marching_cubes(&shape, 128, DEFAULT_BOUNDS, 0.0);
        let analytic = 4.0 * std::f64::consts::PI * 0.25;
        let rel = (mesh.area() - analytic).abs() / analytic;
        assert!(rel < 0.01, "area off by {:.3}%", rel * 100.0);
    }

    #[test]
    fn extraction_normals_point_outward() {
        let shape = AnalyticShape::sphere(0.5);
        let mesh = marching_cubes(&shape, 32, DEFAULT_BOUNDS, 0.0);
        for f in &mesh.faces {
            let n = face_normal(&mesh, *f);
            let cen = (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0;
            assert!(n.dot(&cen) > 0.0, "face winding inward");
        }
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!(n.dot(&v.normalize()) > 0.99);
        }
    }

    #[test]
    fn torus_extraction_has_genus_one() {
        let shape = AnalyticShape::by_name("torus").unwrap();
        let mesh = marching_cubes(&shape, 64, DEFAULT_BOUNDS, 0.0);
        let (closed, euler) = manifold_check(&mesh);
        assert!(closed);
        assert_eq!(euler, 0, "torus Euler characteristic");
    }

    #[test]
    fn chamfer_identity_symmetry_and_offset() {
        let a = uv_sphere(1.0, 48, 96);
        assert!(chamfer(&a, &a, 20_000).unwrap() <= 1e-9);

        let b = uv_sphere(1.1, 48, 96);
        let d1 = chamfer(&a, &b, 50_000).unwrap();
        let d2 = chamfer(&b, &a, 50_000).unwrap();
        assert_eq!(d1, d2, "chamfer must be exactly symmetric");
        assert!((d1 - 0.1).abs() <= 0.005, "concentric spheres: {d1}");
    }

    #[test]
    fn chamfer_decreases_monotonically_on_radius_ladder() {
        let target = uv_sphere(1.0, 40, 80);
        let mut prev = f64::INFINITY;
        for r in [1.5, 1.4, 1.3, 1.2, 1.1] {
            let m = uv_sphere(r, 40, 80);
            let d = chamfer(&m, &target, 20_000).unwrap();
            assert!(d < prev, "chamfer not monotone at r = {r}");
            prev = d;
        }
    }

    #[test]
    fn chamfer_sampling_density_is_stable() {
        let a = uv_sphere(1.0, 40, 80);
        let b = uv_sphere(1.1, 40, 80);
        let d1 = chamfer(&a, &b, 50_000).unwrap();
        let d2 = chamfer(&a, &b, 100_000).unwrap();
        assert!((d1 - d2).abs() / d2 <= 0.01);
    }

    #[test]
    fn empty_mesh_is_a_metric_error() {
        let a = uv_sphere(1.0, 8, 16);
        let empty = TriangleMesh::default();
        assert!(matches!(chamfer(&a, &empty, 10), Err(Error::EmptyMesh(_))));
        assert!(matches!(
            normal_mae_degrees(&empty, &a),
            Err(Error::EmptyMesh(_))
        ));
    }

    fn plane_mesh(tilt_rad: f64) -> TriangleMesh {
        let n = Vector3::new(tilt_rad.sin(), 0.0, tilt_rad.cos());
        let u = Vector3::new(tilt_rad.cos(), 0.0, -tilt_rad.sin());
        let v = Vector3::new(0.0, 1.0, 0.0);
        let mut mesh = TriangleMesh::default();
        for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            mesh.vertices.push(a * u + b * v);
            mesh.normals.push(n);
        }
        mesh.faces.push([0, 1, 2]);
        mesh.faces.push([0, 2, 3]);
        mesh
    }

    #[test]
    fn normal_mae_identity_and_tilted_planes() {
        let m = uv_sphere(1.0, 24, 48);
        assert!(normal_mae_degrees(&m, &m).unwrap() < 1e-9);

        let a = plane_mesh(0.0);
        let b = plane_mesh(10.0f64.to_radians());
        let mae = normal_mae_degrees(&a, &b).unwrap();
        assert!((mae - 10.0).abs() <= 0.1, "tilted planes: {mae}");
    }

    #[test]
    fn normal_mae_detects_constructed_five_degree_rotation() {
        let gt = uv_sphere(1.0, 32, 64);
        let mut pred = gt.clone();
        // rotate every normal 5 degrees about a local tangent axis
        let ang = 5.0f64.to_radians();
        for n in pred.normals.iter_mut() {
            let t = if n.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let axis = nalgebra::Unit::new_normalize(n.cross(&t));
            *n = nalgebra::Rotation3::from_axis_angle(&axis, ang) * *n;
        }
        let mae = normal_mae_degrees(&pred, &gt).unwrap();
        assert!((mae - 5.0).abs() <= 0.2, "constructed rotation: {mae}");
    }

    #[test]
    fn closest_point_on_triangle_regions() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(1.0, 0.0, 0.0);
        let c = Vector3::new(0.0, 1.0, 0.0);
        // interior projection
        let (p, bary) = closest_point_on_triangle(Vector3::new(0.25, 0.25, 1.0), a, b, c);
        assert!((p - Vector3::new(0.25, 0.25, 0.0)).norm() < 1e-12);
        assert!((bary[0] - 0.5).abs() < 1e-12);
        // vertex region
        let (p, _) = closest_point_on_triangle(Vector3::new(-1.0, -1.0, 0.0), a, b, c);
        assert_eq!(p, a);
        // edge region
        let (p, _) = closest_point_on_triangle(Vector3::new(0.5, -1.0, 0.0), a, b, c);
        assert!((p - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let tree = KdTree::build(pts.clone());
        for _ in 0..200 {
            let q = Vector3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            );
            let (bi, bd) = tree.nearest(q);
            let (ni, nd) = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert_eq!(bi, ni);
            assert_eq!(bd, nd);
        }
    }
}
