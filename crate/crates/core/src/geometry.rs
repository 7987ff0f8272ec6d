//! Rigid triangle-mesh bodies, pose kinematics and exact geometric predicates.
//!
//! Rest-frame vertices are stored re-centered at their vertex mean, so a body's
//! translation is the position of that mean (the body's center of mass under
//! vertex-lumped mass) and its rotation is an exponential-coordinate vector.

use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Smallest admissible triangle area (m²).
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Slack used by the closed-hull disjointness predicate.
pub const DISJOINT_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("triangle {triangle} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange {
        triangle: usize,
        index: usize,
        count: usize,
    },
    #[error("triangle {triangle} is degenerate (area {area:e} m²)")]
    DegenerateTriangle { triangle: usize, area: f64 },
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("cannot read mesh file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// Translation plus exponential-coordinate rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vec3::zeros(),
            rotation: Vec3::zeros(),
        }
    }

    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            translation,
            rotation: Vec3::zeros(),
        }
    }

    /// Unit quaternion of the rotation; its norm is within 1e-10 of one by construction.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(self.rotation)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        crate::kinematics::rotation_matrix(&self.rotation)
    }

    pub fn transform_point(&self, rest: &Vec3) -> Vec3 {
        self.rotation_matrix() * rest + self.translation
    }

    /// Packs as `[tx, ty, tz, rx, ry, rz]`.
    pub fn to_array(&self) -> [f64; 6] {
        let t = &self.translation;
        let r = &self.rotation;
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }

    pub fn from_slice(q: &[f64]) -> Self {
        Self {
            translation: Vec3::new(q[0], q[1], q[2]),
            rotation: Vec3::new(q[3], q[4], q[5]),
        }
    }
}

/// A rigid body made of triangles.
#[derive(Clone, Debug)]
pub struct TriMeshBody {
    pub rest_vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub pose: Pose,
    pub mass: f64,
    /// Body-frame inertia tensor about the vertex mean.
    pub inertia: Mat3,
    /// Fixed bodies carry no degrees of freedom.
    pub fixed: bool,
}

impl TriMeshBody {
    /// Validates the mesh and re-centers it at its vertex mean. The world-space
    /// geometry is unchanged: the removed offset becomes the pose translation.
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        mass: f64,
    ) -> Result<Self, GeometryError> {
        if triangles.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        if !(mass > 0.0) {
            return Err(GeometryError::NonPositiveMass(mass));
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= vertices.len() {
                    return Err(GeometryError::IndexOutOfRange {
                        triangle: t,
                        index: i,
                        count: vertices.len(),
                    });
                }
            }
            let area = triangle_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
            if !(area > MIN_TRIANGLE_AREA) {
                return Err(GeometryError::DegenerateTriangle { triangle: t, area });
            }
        }
        let mean = vertices.iter().sum::<Vec3>() / vertices.len() as f64;
        let rest_vertices: Vec<Vec3> = vertices.iter().map(|v| v - mean).collect();
        let inertia = lumped_inertia(&rest_vertices, mass);
        Ok(Self {
            rest_vertices,
            triangles,
            pose: Pose::from_translation(mean),
            mass,
            inertia,
            fixed: false,
        })
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    pub fn with_fixed(mut self, fixed: bool) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn world_vertices(&self) -> Vec<Vec3> {
        world_vertices_at(&self.rest_vertices, &self.pose)
    }

    /// Radius of the smallest origin-centered sphere containing the rest mesh.
    pub fn rest_radius(&self) -> f64 {
        self.rest_vertices
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn from_obj_file(path: &Path, mass: f64) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (v, f) = parse_obj(&text, &path.display().to_string())?;
        Self::new(v, f, mass)
    }
}

pub fn world_vertices_at(rest: &[Vec3], pose: &Pose) -> Vec<Vec3> {
    let r = pose.rotation_matrix();
    rest.iter().map(|v| r * v + pose.translation).collect()
}

/// Vertex-lumped inertia: equal point masses on the vertices.
fn lumped_inertia(rest: &[Vec3], mass: f64) -> Mat3 {
    let m = mass / rest.len() as f64;
    rest.iter().fold(Mat3::zeros(), |acc, r| {
        acc + m * (Mat3::identity() * r.norm_squared() - r * r.transpose())
    })
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Parses the OBJ subset `v x y z` / `f i j k` (1-based; `i/j/k` slash forms
/// keep the position index). Other records are ignored.
pub fn parse_obj(text: &str, origin: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>), GeometryError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let err = |line: usize, message: String| GeometryError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(line, format!("bad vertex coordinate: {e}")))?;
                if coords.len() != 3 {
                    return Err(err(line, "vertex needs 3 coordinates".into()));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|s| {
                        s.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .map_err(|e| err(line, format!("bad face index '{s}': {e}")))
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(err(line, format!("only triangles are supported, got {} indices", idx.len())));
                }
                if idx.contains(&0) {
                    return Err(err(line, "face indices are 1-based".into()));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// Per-body poses plus cached world-frame vertices.
///
/// A state is normally rigid (world vertices are the pose transform of the
/// rest mesh). Oracles that differentiate with respect to raw vertex
/// coordinates build a non-rigid state from perturbed world vertices instead;
/// node centers are then recomputed as vertex means.
#[derive(Clone, Debug)]
pub struct SystemState {
    pub poses: Vec<Pose>,
    pub frame: usize,
    world: Vec<Vec<Vec3>>,
    rotations: Vec<Mat3>,
    rigid: bool,
}

impl SystemState {
    pub fn from_bodies(bodies: &[TriMeshBody]) -> Self {
        let poses = bodies.iter().map(|b| b.pose).collect();
        Self::new(bodies, poses, 0)
    }

    pub fn new(bodies: &[TriMeshBody], poses: Vec<Pose>, frame: usize) -> Self {
        assert_eq!(bodies.len(), poses.len(), "one pose per body");
        let rotations: Vec<Mat3> = poses.iter().map(Pose::rotation_matrix).collect();
        let world = bodies
            .iter()
            .zip(poses.iter().zip(&rotations))
            .map(|(b, (p, r))| b.rest_vertices.iter().map(|v| r * v + p.translation).collect())
            .collect();
        Self {
            poses,
            frame,
            world,
            rotations,
            rigid: true,
        }
    }

    /// A state given directly by world vertices (used to differentiate in `x`).
    pub fn from_world(bodies: &[TriMeshBody], world: Vec<Vec<Vec3>>) -> Self {
        assert_eq!(bodies.len(), world.len());
        for (b, w) in bodies.iter().zip(&world) {
            assert_eq!(b.vertex_count(), w.len());
        }
        Self {
            poses: bodies.iter().map(|b| b.pose).collect(),
            frame: 0,
            world,
            rotations: bodies.iter().map(|b| b.pose.rotation_matrix()).collect(),
            rigid: false,
        }
    }

    /// Rebuilds a non-rigid state from a concatenated vertex vector.
    pub fn from_vertex_vector(bodies: &[TriMeshBody], x: &[f64]) -> Self {
        let mut k = 0;
        let world = bodies
            .iter()
            .map(|b| {
                (0..b.vertex_count())
                    .map(|_| {
                        let v = Vec3::new(x[k], x[k + 1], x[k + 2]);
                        k += 3;
                        v
                    })
                    .collect()
            })
            .collect();
        assert_eq!(k, x.len());
        Self::from_world(bodies, world)
    }

    pub fn is_rigid(&self) -> bool {
        self.rigid
    }

    pub fn rotation(&self, body: usize) -> &Mat3 {
        &self.rotations[body]
    }

    /// World position of a rest-frame point of `body`, or the mean of
    /// `vertices` for non-rigid states.
    pub fn point(&self, body: usize, rest: &Vec3, vertices: &[usize]) -> Vec3 {
        if self.rigid {
            self.rotations[body] * rest + self.poses[body].translation
        } else {
            let w = &self.world[body];
            vertices.iter().map(|&v| w[v]).sum::<Vec3>() / vertices.len() as f64
        }
    }

    pub fn body_count(&self) -> usize {
        self.poses.len()
    }

    pub fn world(&self, body: usize) -> &[Vec3] {
        &self.world[body]
    }

    /// Offsets of each body's first vertex in the concatenated vertex vector.
    pub fn vertex_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.world
            .iter()
            .map(|w| {
                let o = acc;
                acc += w.len();
                o
            })
            .collect()
    }

    pub fn total_vertices(&self) -> usize {
        self.world.iter().map(Vec::len).sum()
    }

    /// The concatenated world vertex vector `x ∈ R^{3V}`.
    pub fn vertex_vector(&self) -> Vec<f64> {
        self.world
            .iter()
            .flat_map(|w| w.iter().flat_map(|v| [v.x, v.y, v.z]))
            .collect()
    }

    pub fn triangle(&self, body: &TriMeshBody, body_index: usize, tri: usize) -> [Vec3; 3] {
        let t = body.triangles[tri];
        let w = &self.world[body_index];
        [w[t[0]], w[t[1]], w[t[2]]]
    }
}

// ---------------------------------------------------------------------------
// Exact predicates (oracle grade; not used on the hot path)
// ---------------------------------------------------------------------------

/// Closest points between segments `p1q1` and `p2q2`: returns `(s, t, c1, c2)`.
pub fn closest_segment_segment(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> (f64, f64, Vec3, Vec3) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-300;
    let (s, t);
    if a <= eps && e <= eps {
        return (0.0, 0.0, *p1, *p2);
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 1e-14 * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    (s, t, p1 + d1 * s, p2 + d2 * t)
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
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
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Point where segment `pq` crosses the closed triangle `abc`, if it does so
/// transversally. Coplanar overlaps are caught by the distance cases instead.
fn segment_triangle_crossing(p: &Vec3, q: &Vec3, tri: &[Vec3; 3]) -> Option<Vec3> {
    let [a, b, c] = tri;
    let n = (b - a).cross(&(c - a));
    let nn = n.norm();
    let sp = n.dot(&(p - a)) / nn;
    let sq = n.dot(&(q - a)) / nn;
    if sp * sq > 0.0 || (sp == 0.0 && sq == 0.0) {
        return None;
    }
    let t = sp / (sp - sq);
    let x = p + (q - p) * t;
    // Closed barycentric containment with a relative tolerance.
    let tol = 1e-12;
    let inside = |u: &Vec3, v: &Vec3| n.dot(&(v - u).cross(&(x - u))) >= -tol * nn * (v - u).norm().max(1.0);
    if inside(a, b) && inside(b, c) && inside(c, a) {
        Some(x)
    } else {
        None
    }
}

/// Distance and closest points between two triangles.
#[derive(Clone, Copy, Debug)]
pub struct TriangleDistance {
    pub distance: f64,
    pub point_a: Vec3,
    pub point_b: Vec3,
}

/// Exact triangle–triangle distance by enumerating the 9 edge pairs and 6
/// vertex–face pairs, plus a transversal crossing test for intersection.
pub fn triangle_distance(ta: &[Vec3; 3], tb: &[Vec3; 3]) -> TriangleDistance {
    for (p, q) in edges(ta) {
        if let Some(x) = segment_triangle_crossing(&p, &q, tb) {
            return TriangleDistance {
                distance: 0.0,
                point_a: x,
                point_b: x,
            };
        }
    }
    for (p, q) in edges(tb) {
        if let Some(x) = segment_triangle_crossing(&p, &q, ta) {
            return TriangleDistance {
                distance: 0.0,
                point_a: x,
                point_b: x,
            };
        }
    }
    let mut best = TriangleDistance {
        distance: f64::INFINITY,
        point_a: ta[0],
        point_b: tb[0],
    };
    let mut consider = |pa: Vec3, pb: Vec3| {
        let d = (pa - pb).norm();
        if d < best.distance {
            best = TriangleDistance {
                distance: d,
                point_a: pa,
                point_b: pb,
            };
        }
    };
    for (p1, q1) in edges(ta) {
        for (p2, q2) in edges(tb) {
            let (_, _, c1, c2) = closest_segment_segment(&p1, &q1, &p2, &q2);
            consider(c1, c2);
        }
    }
    for v in ta {
        consider(*v, closest_point_triangle(v, &tb[0], &tb[1], &tb[2]));
    }
    for v in tb {
        consider(closest_point_triangle(v, &ta[0], &ta[1], &ta[2]), *v);
    }
    best
}

fn edges(t: &[Vec3; 3]) -> [(Vec3, Vec3); 3] {
    [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
}

/// Witness for (non-)disjointness of two closed triangles.
#[derive(Clone, Debug)]
pub struct SeparationCertificate {
    pub disjoint: bool,
    /// `(n, d)` with `⟨x,n⟩+d > 0` on the first triangle and `< 0` on the second.
    pub plane: Option<(Vec3, f64)>,
    /// A point common to both closed hulls (up to slack) when not disjoint.
    pub common_point: Option<Vec3>,
    pub distance: f64,
}

pub fn triangles_disjoint(ta: &[Vec3; 3], tb: &[Vec3; 3]) -> Result<SeparationCertificate, GeometryError> {
    for (t, tri) in [ta, tb].into_iter().enumerate() {
        let area = triangle_area(&tri[0], &tri[1], &tri[2]);
        if !(area > MIN_TRIANGLE_AREA) {
            return Err(GeometryError::DegenerateTriangle { triangle: t, area });
        }
    }
    let td = triangle_distance(ta, tb);
    if td.distance > DISJOINT_SLACK {
        let n = (td.point_a - td.point_b) / td.distance;
        let mid = (td.point_a + td.point_b) * 0.5;
        Ok(SeparationCertificate {
            disjoint: true,
            plane: Some((n, -n.dot(&mid))),
            common_point: None,
            distance: td.distance,
        })
    } else {
        Ok(SeparationCertificate {
            disjoint: false,
            plane: None,
            common_point: Some((td.point_a + td.point_b) * 0.5),
            distance: td.distance,
        })
    }
}

/// Smallest triangle–triangle distance over all inter-body pairs, or `+∞`
/// with fewer than two bodies. Pairs whose bounding spheres are farther apart
/// than the running minimum are skipped, which does not change the result.
pub fn min_pair_distance(bodies: &[TriMeshBody], state: &SystemState) -> f64 {
    let spheres: Vec<Vec<(Vec3, f64)>> = bodies
        .iter()
        .enumerate()
        .map(|(b, body)| {
            body.triangles
                .iter()
                .enumerate()
                .map(|(t, _)| {
                    let tri = state.triangle(body, b, t);
                    let c = (tri[0] + tri[1] + tri[2]) / 3.0;
                    let r = tri.iter().map(|v| (v - c).norm()).fold(0.0, f64::max);
                    (c, r)
                })
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    for a in 0..bodies.len() {
        for b in a + 1..bodies.len() {
            for (ta, &(ca, ra)) in spheres[a].iter().enumerate() {
                for (tb, &(cb, rb)) in spheres[b].iter().enumerate() {
                    if (ca - cb).norm() - ra - rb >= best {
                        continue;
                    }
                    let d = triangle_distance(&state.triangle(&bodies[a], a, ta), &state.triangle(&bodies[b], b, tb)).distance;
                    best = best.min(d);
                }
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Mesh primitives
// ---------------------------------------------------------------------------

pub mod primitives {
    use super::{Vec3, TriMeshBody, GeometryError};
    use std::collections::HashMap;

    /// Axis-aligned box with outward-oriented faces (12 triangles).
    pub fn cuboid(half: Vec3, mass: f64) -> Result<TriMeshBody, GeometryError> {
        let mut v = Vec::with_capacity(8);
        for i in 0..8 {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            v.push(Vec3::new(sx * half.x, sy * half.y, sz * half.z));
        }
        let f = vec![
            [0, 2, 1], [1, 2, 3], // -z
            [4, 5, 6], [5, 7, 6], // +z
            [0, 1, 4], [1, 5, 4], // -y
            [2, 6, 3], [3, 6, 7], // +y
            [0, 4, 2], [2, 4, 6], // -x
            [1, 3, 5], [3, 7, 5], // +x
        ];
        TriMeshBody::new(v, f, mass)
    }

    pub fn cube(size: f64, mass: f64) -> Result<TriMeshBody, GeometryError> {
        cuboid(Vec3::repeat(size * 0.5), mass)
    }

    /// Icosahedron refined `subdivisions` times (20·4^k triangles), projected to the sphere.
    pub fn icosphere(radius: f64, subdivisions: u32, mass: f64) -> Result<TriMeshBody, GeometryError> {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut v: Vec<Vec3> = [
            (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
            (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
            (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut f: Vec<[usize; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| {
                let key = (a.min(b), a.max(b));
                *mid.entry(key).or_insert_with(|| {
                    v.push(((v[a] + v[b]) * 0.5).normalize());
                    v.len() - 1
                })
            };
            let mut next = Vec::with_capacity(f.len() * 4);
            for [a, b, c] in f {
                let ab = midpoint(a, b, &mut v);
                let bc = midpoint(b, c, &mut v);
                let ca = midpoint(c, a, &mut v);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            f = next;
        }
        let v = v.into_iter().map(|p| p * radius).collect();
        TriMeshBody::new(v, f, mass)
    }

    /// Latitude–longitude sphere with `2·slices·(stacks−1)` triangles.
    pub fn uv_sphere(radius: f64, slices: usize, stacks: usize, mass: f64) -> Result<TriMeshBody, GeometryError> {
        assert!(slices >= 3 && stacks >= 2);
        let mut v = vec![Vec3::new(0.0, 0.0, radius)];
        for i in 1..stacks {
            let phi = std::f64::consts::PI * i as f64 / stacks as f64;
            for j in 0..slices {
                let th = 2.0 * std::f64::consts::PI * j as f64 / slices as f64;
                v.push(radius * Vec3::new(phi.sin() * th.cos(), phi.sin() * th.sin(), phi.cos()));
            }
        }
        v.push(Vec3::new(0.0, 0.0, -radius));
        let bottom = v.len() - 1;
        let ring = |i: usize, j: usize| 1 + (i - 1) * slices + (j % slices);
        let mut f = Vec::new();
        for j in 0..slices {
            f.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..stacks - 1 {
            for j in 0..slices {
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
                f.push([a, c, b]);
                f.push([b, c, d]);
            }
        }
        for j in 0..slices {
            f.push([bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
        }
        TriMeshBody::new(v, f, mass)
    }

    /// Flat `nx × ny` grid of square cells of side `cell` in the z = 0 plane,
    /// two triangles per cell, with its lower-left corner at the origin before re-centering.
    pub fn grid_plate(nx: usize, ny: usize, cell: f64, mass: f64) -> Result<TriMeshBody, GeometryError> {
        let mut v = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                v.push(Vec3::new(i as f64 * cell, j as f64 * cell, 0.0));
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut f = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriMeshBody::new(v, f, mass)
    }

    pub fn single_triangle(a: Vec3, b: Vec3, c: Vec3, mass: f64) -> Result<TriMeshBody, GeometryError> {
        TriMeshBody::new(vec![a, b, c], vec![[0, 1, 2]], mass)
    }

    /// Regular tetrahedron with circumradius `radius`.
    pub fn tetrahedron(radius: f64, mass: f64) -> Result<TriMeshBody, GeometryError> {
        let s = radius / 3f64.sqrt();
        let v = vec![
            Vec3::new(s, s, s),
            Vec3::new(s, -s, -s),
            Vec3::new(-s, s, -s),
            Vec3::new(-s, -s, s),
        ];
        TriMeshBody::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], mass)
    }

    /// Octahedron with vertex radius `radius` (8 triangles).
    pub fn octahedron(radius: f64, mass: f64) -> Result<TriMeshBody, GeometryError> {
        let r = radius;
        let v = vec![
            Vec3::new(r, 0.0, 0.0), Vec3::new(-r, 0.0, 0.0),
            Vec3::new(0.0, r, 0.0), Vec3::new(0.0, -r, 0.0),
            Vec3::new(0.0, 0.0, r), Vec3::new(0.0, 0.0, -r),
        ];
        let f = vec![
            [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
            [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
        ];
        TriMeshBody::new(v, f, mass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn unit_cube_at(x: f64) -> TriMeshBody {
        primitives::cube(1.0, 1.0)
            .unwrap()
            .with_pose(Pose::from_translation(Vec3::new(x, 0.0, 0.0)))
    }

    #[test]
    fn world_vertices_examples() {
        let rest = [Vec3::new(1.0, 0.0, 0.0)];
        let id = world_vertices_at(&rest, &Pose::identity());
        assert_eq!(id[0], Vec3::new(1.0, 0.0, 0.0));
        let tr = world_vertices_at(&rest, &Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)));
        assert_eq!(tr[0], Vec3::new(1.0, 0.0, 1.0));
        let rot = world_vertices_at(&rest, &Pose::new(Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2)));
        assert!((rot[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quaternion_is_unit() {
        let p = Pose::new(Vec3::zeros(), Vec3::new(0.3, -2.0, 5.0));
        assert!((p.quaternion().into_inner().norm() - 1.0).abs() < 1e-10);
        assert!((p.quaternion().to_rotation_matrix().matrix() - p.rotation_matrix()).norm() < 1e-12);
    }

    #[test]
    fn construction_errors() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(matches!(TriMeshBody::new(v.clone(), vec![], 1.0), Err(GeometryError::EmptyMesh)));
        assert!(matches!(
            TriMeshBody::new(v.clone(), vec![[0, 1, 3]], 1.0),
            Err(GeometryError::IndexOutOfRange { index: 3, .. })
        ));
        let collinear = vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
        assert!(matches!(
            TriMeshBody::new(collinear, vec![[0, 1, 2]], 1.0),
            Err(GeometryError::DegenerateTriangle { .. })
        ));
        assert!(TriMeshBody::new(v, vec![[0, 1, 2]], 0.0).is_err());
    }

    #[test]
    fn recentering_preserves_world_geometry() {
        let v = vec![Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 1.0, 1.0), Vec3::new(1.0, 3.0, 1.0)];
        let body = TriMeshBody::new(v.clone(), vec![[0, 1, 2]], 1.0).unwrap();
        for (a, b) in body.world_vertices().iter().zip(&v) {
            assert!((a - b).norm() < 1e-15);
        }
        let mean: Vec3 = body.rest_vertices.iter().sum();
        assert!(mean.norm() < 1e-15);
    }

    #[test]
    fn obj_subset_parses() {
        let text = "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1 2/2 3/3\n";
        let (v, f) = parse_obj(text, "mem").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(f, vec![[0, 1, 2]]);
        let bad = parse_obj("v 0 0\n", "mem").unwrap_err();
        assert!(bad.to_string().contains("mem:1"));
        assert!(parse_obj("f 1 2 3 4\n", "mem").is_err());
    }

    #[test]
    fn coplanar_triangles_one_meter_apart_are_disjoint() {
        let a = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let b = a.map(|v| v + Vec3::new(2.0, 0.0, 0.0));
        let cert = triangles_disjoint(&a, &b).unwrap();
        assert!(cert.disjoint);
        assert!((cert.distance - 1.0).abs() < 1e-12);
        let (n, d) = cert.plane.unwrap();
        assert!(a.iter().all(|v| n.dot(v) + d > 0.0));
        assert!(b.iter().all(|v| n.dot(v) + d < 0.0));
    }

    #[test]
    fn identical_and_touching_triangles_are_not_disjoint() {
        let a = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        assert!(!triangles_disjoint(&a, &a).unwrap().disjoint);
        let b = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 1.0), Vec3::new(2.0, 1.0, 0.0)];
        assert!(!triangles_disjoint(&a, &b).unwrap().disjoint);
    }

    #[test]
    fn piercing_triangles_intersect() {
        let a = [Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, -1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let b = [Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.0, 0.1, 1.0)];
        let cert = triangles_disjoint(&a, &b).unwrap();
        assert!(!cert.disjoint);
        assert!(cert.common_point.unwrap().z.abs() < 1e-12);
    }

    #[test]
    fn degenerate_triangle_is_an_error() {
        let a = [Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
        let b = [Vec3::z(), Vec3::z() + Vec3::x(), Vec3::z() + Vec3::y()];
        assert!(triangles_disjoint(&a, &b).is_err());
    }

    #[test]
    fn min_pair_distance_examples() {
        let bodies = vec![unit_cube_at(0.0), unit_cube_at(1.5)];
        let s = SystemState::from_bodies(&bodies);
        assert!((min_pair_distance(&bodies, &s) - 0.5).abs() < 1e-9);

        let single = vec![unit_cube_at(0.0)];
        assert_eq!(min_pair_distance(&single, &SystemState::from_bodies(&single)), f64::INFINITY);

        let touching = vec![unit_cube_at(0.0), unit_cube_at(1.0)];
        assert!(min_pair_distance(&touching, &SystemState::from_bodies(&touching)).abs() < 1e-9);
    }

    #[test]
    fn rigid_motion_preserves_distances_and_means() {
        let body = primitives::icosphere(0.7, 1, 1.0).unwrap();
        let pose = Pose::new(Vec3::new(0.3, -1.0, 2.0), Vec3::new(0.4, 1.1, -0.7));
        let w = world_vertices_at(&body.rest_vertices, &pose);
        for i in 0..body.vertex_count() {
            for j in (i + 1)..body.vertex_count() {
                let r = (body.rest_vertices[i] - body.rest_vertices[j]).norm();
                let d = (w[i] - w[j]).norm();
                assert!((r - d).abs() <= 1e-10 * r);
            }
        }
        let subset = [0usize, 3, 7, 11, 20];
        let mean_w: Vec3 = subset.iter().map(|&i| w[i]).sum::<Vec3>() / subset.len() as f64;
        let mean_r: Vec3 = subset.iter().map(|&i| body.rest_vertices[i]).sum::<Vec3>() / subset.len() as f64;
        assert!((mean_w - pose.transform_point(&mean_r)).norm() < 1e-12);
    }

    #[test]
    fn primitive_triangle_counts() {
        assert_eq!(primitives::cube(1.0, 1.0).unwrap().triangle_count(), 12);
        assert_eq!(primitives::icosphere(1.0, 2, 1.0).unwrap().triangle_count(), 320);
        assert_eq!(primitives::uv_sphere(1.0, 4, 5, 1.0).unwrap().triangle_count(), 32);
        assert_eq!(primitives::grid_plate(3, 2, 1.0, 1.0).unwrap().triangle_count(), 12);
        assert_eq!(primitives::octahedron(1.0, 1.0).unwrap().triangle_count(), 8);
    }

    #[test]
    fn state_world_matches_direct_recomputation() {
        let bodies = vec![
            primitives::tetrahedron(1.0, 1.0).unwrap(),
            primitives::cube(1.0, 2.0).unwrap().with_pose(Pose::new(Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.1, 0.2, 0.3))),
        ];
        let s = SystemState::from_bodies(&bodies);
        for (b, body) in bodies.iter().enumerate() {
            for (wv, rv) in s.world(b).iter().zip(&body.rest_vertices) {
                assert!((wv - body.pose.transform_point(rv)).norm() < 1e-12);
            }
        }
        assert_eq!(s.vertex_offsets(), vec![0, 4]);
        assert_eq!(s.vertex_vector().len(), 3 * 12);
    }
}
