//! Layered bounding-sphere hierarchies and hierarchical potential blending.
//!
//! Each body gets a binary tree whose node `I` stores a vertex subset, its
//! rest-frame vertex mean `x_I` and a radius `R_I` that bounds both the
//! subset's vertices and every child sphere (the layered property). For two
//! nodes on different bodies the potential is
//!
//! * the centered closed form when `‖x_I − x_J‖ ≥ (1+ε)(R_I+R_J)`;
//! * the exact triangle-pair potential for two leaves, blended toward the
//!   centered form inside the band;
//! * the sum over child pairs otherwise, blended the same way.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use nalgebra::{DMatrix, DVector};
use rstar::primitives::GeomWithData;
use rstar::RTree;
use thiserror::Error;

use crate::blending::{blend, blend_dense, blend_weight, BlendSpec, DenseEval};
use crate::eval::{Chart, Derivs, Point, PointVerts, PotentialEval};
use crate::geometry::{SystemState, TriMeshBody, Vec3};
use crate::pair_potential::{centered_potential, pair_potential, PairSolution};

/// Default blend margin `ε`.
pub const DEFAULT_EPSILON: f64 = 0.1;
/// Candidate partners considered per cluster during construction.
const MERGE_CANDIDATES: usize = 8;

#[derive(Debug, Error)]
pub enum BshError {
    #[error("body {0} has no triangles")]
    EmptyMesh(usize),
    #[error("blend margin must be positive, got {0}")]
    BadEpsilon(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Leaf(usize),
    Internal(usize, usize),
}

#[derive(Clone, Debug)]
pub struct BshNode {
    /// Sorted vertex ids.
    pub subset: Vec<usize>,
    pub rest_center: Vec3,
    pub radius: f64,
    pub kind: NodeKind,
}

impl BshNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf(_))
    }

    fn children(&self, id: usize) -> ChildList {
        match self.kind {
            NodeKind::Leaf(_) => ChildList::One(id),
            NodeKind::Internal(a, b) => ChildList::Two(a, b),
        }
    }
}

#[derive(Clone, Copy)]
enum ChildList {
    One(usize),
    Two(usize, usize),
}

impl ChildList {
    fn as_slice(&self) -> ([usize; 2], usize) {
        match *self {
            ChildList::One(a) => ([a, a], 1),
            ChildList::Two(a, b) => ([a, b], 2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BshTree {
    pub body: usize,
    pub epsilon: f64,
    pub nodes: Vec<BshNode>,
    pub root: usize,
}

fn subset_center_radius(rest: &[Vec3], subset: &[usize]) -> (Vec3, f64) {
    let c = subset.iter().map(|&v| rest[v]).sum::<Vec3>() / subset.len() as f64;
    let r = subset.iter().map(|&v| (rest[v] - c).norm()).fold(0.0, f64::max);
    (c, r)
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(_), Some(&y)) => {
                j += 1;
                y
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
    out
}

type Site = GeomWithData<[f64; 3], usize>;

#[derive(PartialEq)]
struct Candidate {
    radius: f64,
    owner: usize,
    partner: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Min-heap on radius, ties broken by ids for determinism.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .radius
            .total_cmp(&self.radius)
            .then_with(|| other.owner.cmp(&self.owner))
            .then_with(|| other.partner.cmp(&self.partner))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl BshTree {
    /// Greedy bottom-up construction: repeatedly merge the pair of current
    /// roots whose merged layered sphere is smallest, considering for each
    /// root only its nearest candidates by center distance.
    pub fn build(body: &TriMeshBody, body_id: usize, epsilon: f64) -> Result<Self, BshError> {
        if body.triangles.is_empty() {
            return Err(BshError::EmptyMesh(body_id));
        }
        if !(epsilon > 0.0) {
            return Err(BshError::BadEpsilon(epsilon));
        }
        let rest = &body.rest_vertices;
        let mut nodes: Vec<BshNode> = body
            .triangles
            .iter()
            .enumerate()
            .map(|(t, tri)| {
                let mut subset = tri.to_vec();
                subset.sort_unstable();
                subset.dedup();
                let (c, r) = subset_center_radius(rest, &subset);
                BshNode { subset, rest_center: c, radius: r, kind: NodeKind::Leaf(t) }
            })
            .collect();
        let site = |n: &BshNode, id: usize| Site::new([n.rest_center.x, n.rest_center.y, n.rest_center.z], id);
        let mut index: RTree<Site> = RTree::bulk_load(nodes.iter().enumerate().map(|(i, n)| site(n, i)).collect());
        let mut alive = vec![true; nodes.len()];
        let mut live = nodes.len();

        let merged = |nodes: &[BshNode], a: usize, b: usize| -> (Vec<usize>, Vec3, f64) {
            let subset = merge_sorted(&nodes[a].subset, &nodes[b].subset);
            let (c, rv) = subset_center_radius(rest, &subset);
            let ra = (c - nodes[a].rest_center).norm() + nodes[a].radius;
            let rb = (c - nodes[b].rest_center).norm() + nodes[b].radius;
            (subset, c, rv.max(ra).max(rb))
        };
        let candidates = |nodes: &[BshNode], index: &RTree<Site>, a: usize| -> Vec<Candidate> {
            let c = nodes[a].rest_center;
            index
                .nearest_neighbor_iter(&[c.x, c.y, c.z])
                .filter(|s| s.data != a)
                .take(MERGE_CANDIDATES)
                .map(|s| Candidate { radius: merged(nodes, a, s.data).2, owner: a, partner: s.data })
                .collect()
        };

        let mut heap = BinaryHeap::new();
        for a in 0..nodes.len() {
            heap.extend(candidates(&nodes, &index, a));
        }
        let mut root = 0;
        while live > 1 {
            let Some(top) = heap.pop() else { break };
            if !alive[top.owner] {
                continue;
            }
            if !alive[top.partner] {
                heap.extend(candidates(&nodes, &index, top.owner));
                continue;
            }
            let (a, b) = (top.owner, top.partner);
            let (subset, c, r) = merged(&nodes, a, b);
            let id = nodes.len();
            index.remove(&site(&nodes[a], a));
            index.remove(&site(&nodes[b], b));
            nodes.push(BshNode { subset, rest_center: c, radius: r, kind: NodeKind::Internal(a, b) });
            index.insert(site(&nodes[id], id));
            alive[a] = false;
            alive[b] = false;
            alive.push(true);
            live -= 1;
            root = id;
            if live > 1 {
                heap.extend(candidates(&nodes, &index, id));
            }
        }
        Ok(Self { body: body_id, epsilon, nodes, root })
    }

    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(self.root, 1usize)];
        while let Some((n, d)) = stack.pop() {
            best = best.max(d);
            if let NodeKind::Internal(a, b) = self.nodes[n].kind {
                stack.push((a, d + 1));
                stack.push((b, d + 1));
            }
        }
        best
    }

    pub fn leaf_of(&self, triangle: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == NodeKind::Leaf(triangle))
    }

    /// World-frame center of `node` in `state`.
    pub fn world_center(&self, state: &SystemState, node: usize) -> Vec3 {
        let n = &self.nodes[node];
        state.point(self.body, &n.rest_center, &n.subset)
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self, body: &TriMeshBody) -> Result<(), String> {
        let rest = &body.rest_vertices;
        let tol = 1e-12;
        let mut seen_tri = HashSet::new();
        let mut reached = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if reached[id] {
                return Err(format!("node {id} reached twice"));
            }
            reached[id] = true;
            let n = &self.nodes[id];
            let (c, rv) = subset_center_radius(rest, &n.subset);
            if (c - n.rest_center).norm() > tol * (1.0 + c.norm()) {
                return Err(format!("node {id}: center is not the subset mean"));
            }
            if n.radius + tol < rv {
                return Err(format!("node {id}: radius {} below vertex bound {rv}", n.radius));
            }
            match n.kind {
                NodeKind::Leaf(t) => {
                    let mut tri = body.triangles[t].to_vec();
                    tri.sort_unstable();
                    tri.dedup();
                    if tri != n.subset {
                        return Err(format!("leaf {id}: subset is not its triangle"));
                    }
                    if !seen_tri.insert(t) {
                        return Err(format!("triangle {t} appears in two leaves"));
                    }
                }
                NodeKind::Internal(a, b) => {
                    for ch in [a, b] {
                        let m = &self.nodes[ch];
                        let need = (n.rest_center - m.rest_center).norm() + m.radius;
                        if n.radius + tol < need {
                            return Err(format!("node {id}: not layered over child {ch}"));
                        }
                    }
                    if merge_sorted(&self.nodes[a].subset, &self.nodes[b].subset) != n.subset {
                        return Err(format!("node {id}: subset is not the union of its children"));
                    }
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        if seen_tri.len() != body.triangle_count() {
            return Err(format!("{} of {} triangles covered", seen_tri.len(), body.triangle_count()));
        }
        Ok(())
    }
}

/// Evaluation switches.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub derivs: Derivs,
    /// Skip children when `D ≥ d2` (value-neutral; disabled only by oracles).
    pub prune: bool,
    /// Record one [`TraceRecord`] per visited node pair.
    pub trace: bool,
}

impl EvalOptions {
    pub fn new(derivs: Derivs) -> Self {
        Self { derivs, prune: true, trace: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InteractionCounts {
    pub exact: usize,
    pub centered: usize,
}

impl std::ops::AddAssign for InteractionCounts {
    fn add_assign(&mut self, o: Self) {
        self.exact += o.exact;
        self.centered += o.centered;
    }
}

/// One visited node pair.
#[derive(Clone, Copy, Debug)]
pub struct TraceRecord {
    pub body_i: usize,
    pub body_j: usize,
    pub node_i: usize,
    pub node_j: usize,
    pub dist: f64,
    pub spec: BlendSpec,
    /// Near-field value (child sum or exact pair), when evaluated.
    pub near: Option<f64>,
    /// Centered value, when evaluated.
    pub far: Option<f64>,
    pub value: f64,
    pub leaf_pair: bool,
}

/// Result of a hierarchical evaluation.
#[derive(Clone, Debug)]
pub struct BshEval {
    pub potential: PotentialEval,
    pub counts: InteractionCounts,
    pub trace: Vec<TraceRecord>,
}

fn leaf_triangle(node: &BshNode) -> usize {
    match node.kind {
        NodeKind::Leaf(t) => t,
        NodeKind::Internal(..) => unreachable!("leaf expected"),
    }
}

/// Spreads a 6-vector over `(c_i, c_j)` onto the 18 triangle-vertex
/// coordinates: each vertex receives one third.
pub(crate) fn spread_centers(v: f64, g: &nalgebra::SVector<f64, 6>, h: &nalgebra::SMatrix<f64, 6, 6>, derivs: Derivs) -> DenseEval {
    let mut out = DenseEval { value: v, grad: DVector::zeros(0), hess: DMatrix::zeros(0, 0) };
    let third = 1.0 / 3.0;
    if derivs.grad() {
        out.grad = DVector::zeros(18);
        for k in 0..6 {
            let side = k / 3;
            for c in 0..3 {
                out.grad[3 * k + c] = g[3 * side + c] * third;
            }
        }
    }
    if derivs.hess() {
        out.hess = DMatrix::zeros(18, 18);
        for k in 0..6 {
            for l in 0..6 {
                let (si, sj) = (k / 3, l / 3);
                for a in 0..3 {
                    for b in 0..3 {
                        out.hess[(3 * k + a, 3 * l + b)] = h[(3 * si + a, 3 * sj + b)] * third * third;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn pair_dense(sol: &PairSolution, derivs: Derivs) -> DenseEval {
    DenseEval {
        value: sol.value,
        grad: if derivs.grad() { DVector::from_column_slice(sol.grad.as_slice()) } else { DVector::zeros(0) },
        hess: if derivs.hess() { DMatrix::from_column_slice(18, 18, sol.hess.as_slice()) } else { DMatrix::zeros(0, 0) },
    }
}

/// Outcome of a leaf-pair evaluation in the 18 local vertex coordinates.
pub struct LeafEval {
    pub local: Option<DenseEval>,
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub counts: InteractionCounts,
}

/// Leaf-pair potential: exact pair potential blended toward `far` inside
/// `[d1, d2]`. `far` selects the centered form (global support) or zero
/// (local support). Returns `local = None` for a non-separable pair.
#[allow(clippy::too_many_arguments)]
pub fn leaf_pair_local(
    ti: &[Vec3; 3],
    tj: &[Vec3; 3],
    ci: &Vec3,
    cj: &Vec3,
    spec: &BlendSpec,
    derivs: Derivs,
    prune: bool,
    zero_far: bool,
) -> LeafEval {
    let (phi, pg, ph) = blend_weight(spec, ci, cj);
    let mut counts = InteractionCounts::default();
    let far = if phi <= 0.0 {
        None
    } else if zero_far {
        Some(DenseEval::zero(18))
    } else {
        counts.centered += 1;
        let c = centered_potential(ci, cj).expect("distinct leaf centers");
        Some(spread_centers(c.value, &c.grad, &c.hess, derivs))
    };
    let need_near = phi < 1.0 || !prune;
    let near = if need_near {
        counts.exact += 1;
        match pair_potential(ti, tj, derivs.hess()) {
            Ok(sol) => Some(pair_dense(&sol, derivs)),
            Err(_) => {
                return LeafEval { local: None, near: Some(f64::INFINITY), far: far.map(|f| f.value), counts };
            }
        }
    } else {
        None
    };
    let near_value = near.as_ref().map(|n| n.value);
    let far_value = far.as_ref().map(|f| f.value);
    let local = if phi >= 1.0 {
        far.clone()
    } else if phi <= 0.0 {
        near.clone()
    } else {
        let w = spread_centers(phi, &pg, &ph, derivs);
        Some(blend_dense(near.as_ref(), far.as_ref().expect("far inside band"), &w, derivs))
    };
    LeafEval { local, near: near_value, far: far_value, counts }
}

/// World points and triangles of a leaf pair.
pub fn leaf_points<'a>(bodies: &'a [TriMeshBody], state: &SystemState, bi: usize, ti: usize, bj: usize, tj: usize) -> ([Point<'a>; 6], [Vec3; 3], [Vec3; 3]) {
    let tri_i = bodies[bi].triangles[ti];
    let tri_j = bodies[bj].triangles[tj];
    let wi = state.world(bi);
    let wj = state.world(bj);
    let pt = |b: usize, v: usize, w: &[Vec3]| Point { body: b, verts: PointVerts::One(v), rest: bodies[b].rest_vertices[v], world: w[v] };
    let points = [
        pt(bi, tri_i[0], wi),
        pt(bi, tri_i[1], wi),
        pt(bi, tri_i[2], wi),
        pt(bj, tri_j[0], wj),
        pt(bj, tri_j[1], wj),
        pt(bj, tri_j[2], wj),
    ];
    (points, tri_i.map(|v| wi[v]), tri_j.map(|v| wj[v]))
}

fn pull(chart: &dyn Chart, points: &[Point], local: &DenseEval, derivs: Derivs) -> PotentialEval {
    chart.pull_back(points, local.value, &local.grad, if derivs.hess() { Some(&local.hess) } else { None }, derivs)
}

fn centered_points<'a>(ta: &'a BshTree, tb: &'a BshTree, ni: usize, nj: usize, ci: Vec3, cj: Vec3) -> [Point<'a>; 2] {
    let a = &ta.nodes[ni];
    let b = &tb.nodes[nj];
    [
        Point { body: ta.body, verts: PointVerts::Mean(&a.subset), rest: a.rest_center, world: ci },
        Point { body: tb.body, verts: PointVerts::Mean(&b.subset), rest: b.rest_center, world: cj },
    ]
}

fn six_to_dense(v: f64, g: &nalgebra::SVector<f64, 6>, h: &nalgebra::SMatrix<f64, 6, 6>, derivs: Derivs) -> DenseEval {
    DenseEval {
        value: v,
        grad: if derivs.grad() { DVector::from_column_slice(g.as_slice()) } else { DVector::zeros(0) },
        hess: if derivs.hess() { DMatrix::from_column_slice(6, 6, h.as_slice()) } else { DMatrix::zeros(0, 0) },
    }
}

enum Frame {
    Enter(usize, usize),
    Exit { i: usize, j: usize, children: usize, dist: f64, spec: BlendSpec },
}

/// Hierarchical potential between the roots of two trees on different bodies.
pub fn process_pair(bodies: &[TriMeshBody], state: &SystemState, chart: &dyn Chart, ta: &BshTree, tb: &BshTree, opts: EvalOptions) -> BshEval {
    assert_ne!(ta.body, tb.body, "self-contact is not modeled");
    let derivs = opts.derivs;
    let eps = ta.epsilon.min(tb.epsilon);
    let mut counts = InteractionCounts::default();
    let mut trace = Vec::new();
    let mut results: Vec<PotentialEval> = Vec::new();
    let mut stack = vec![Frame::Enter(ta.root, tb.root)];
    let mut centers_a: Vec<Option<Vec3>> = vec![None; ta.nodes.len()];
    let mut centers_b: Vec<Option<Vec3>> = vec![None; tb.nodes.len()];
    let center = |tree: &BshTree, cache: &mut Vec<Option<Vec3>>, n: usize| *cache[n].get_or_insert_with(|| tree.world_center(state, n));

    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(i, j) => {
                let (a, b) = (&ta.nodes[i], &tb.nodes[j]);
                let ci = center(ta, &mut centers_a, i);
                let cj = center(tb, &mut centers_b, j);
                let dist = (ci - cj).norm();
                let spec = BlendSpec::for_radii(a.radius, b.radius, eps);
                if opts.prune && dist >= spec.d2 {
                    counts.centered += 1;
                    let pts = centered_points(ta, tb, i, j, ci, cj);
                    let c = centered_potential(&ci, &cj).expect("distinct centers");
                    let e = pull(chart, &pts, &six_to_dense(c.value, &c.grad, &c.hess, derivs), derivs);
                    if opts.trace {
                        trace.push(TraceRecord { body_i: ta.body, body_j: tb.body, node_i: i, node_j: j, dist, spec, near: None, far: Some(c.value), value: c.value, leaf_pair: a.is_leaf() && b.is_leaf() });
                    }
                    results.push(e);
                    continue;
                }
                if a.is_leaf() && b.is_leaf() {
                    let (pts, tri_i, tri_j) = leaf_points(bodies, state, ta.body, leaf_triangle(a), tb.body, leaf_triangle(b));
                    let le = leaf_pair_local(&tri_i, &tri_j, &ci, &cj, &spec, derivs, opts.prune, false);
                    counts += le.counts;
                    let e = match &le.local {
                        Some(local) => pull(chart, &pts, local, derivs),
                        None => PotentialEval::infinite(derivs),
                    };
                    if opts.trace {
                        trace.push(TraceRecord { body_i: ta.body, body_j: tb.body, node_i: i, node_j: j, dist, spec, near: le.near, far: le.far, value: e.value, leaf_pair: true });
                    }
                    results.push(e);
                    continue;
                }
                let (ca, na) = a.children(i).as_slice();
                let (cb, nb) = b.children(j).as_slice();
                stack.push(Frame::Exit { i, j, children: na * nb, dist, spec });
                // Push in reverse so children are visited in a fixed (a0,b0), (a0,b1), … order.
                for x in (0..na).rev() {
                    for y in (0..nb).rev() {
                        stack.push(Frame::Enter(ca[x], cb[y]));
                    }
                }
            }
            Frame::Exit { i, j, children, dist, spec } => {
                let start = results.len() - children;
                let near = PotentialEval::sum(derivs, results[start..].iter());
                results.truncate(start);
                let ci = center(ta, &mut centers_a, i);
                let cj = center(tb, &mut centers_b, j);
                let (phi, pg, ph) = blend_weight(&spec, &ci, &cj);
                let near_value = near.value;
                let (value, far_value) = if phi <= 0.0 {
                    (near, None)
                } else {
                    counts.centered += 1;
                    let pts = centered_points(ta, tb, i, j, ci, cj);
                    let c = centered_potential(&ci, &cj).expect("distinct centers");
                    let far = pull(chart, &pts, &six_to_dense(c.value, &c.grad, &c.hess, derivs), derivs);
                    let w = pull(chart, &pts, &six_to_dense(phi, &pg, &ph, derivs), derivs);
                    (blend(Some(&near), &far, &w, derivs), Some(c.value))
                };
                if opts.trace {
                    trace.push(TraceRecord {
                        body_i: ta.body,
                        body_j: tb.body,
                        node_i: i,
                        node_j: j,
                        dist,
                        spec,
                        near: Some(near_value),
                        far: far_value,
                        value: value.value,
                        leaf_pair: false,
                    });
                }
                results.push(value);
            }
        }
    }
    debug_assert_eq!(results.len(), 1);
    BshEval { potential: results.pop().expect("one root result"), counts, trace }
}

/// Leaf pairs `(tri_a, tri_b)` whose node spheres may satisfy `keep`.
///
/// `keep(dist, r_sum)` is evaluated at every visited node pair and must be
/// monotone in the sense that rejecting a node pair implies rejecting all
/// its descendants; both uses below (`dist < (1+ε)·r_sum` and a sphere gap
/// bound) satisfy this by the layered property.
pub fn leaf_pairs_where(state: &SystemState, ta: &BshTree, tb: &BshTree, keep: impl Fn(f64, f64) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut stack = vec![(ta.root, tb.root)];
    while let Some((i, j)) = stack.pop() {
        let (a, b) = (&ta.nodes[i], &tb.nodes[j]);
        let dist = (ta.world_center(state, i) - tb.world_center(state, j)).norm();
        if !keep(dist, a.radius + b.radius) {
            continue;
        }
        match (a.kind, b.kind) {
            (NodeKind::Leaf(x), NodeKind::Leaf(y)) => out.push((x, y)),
            _ => {
                let (ca, na) = a.children(i).as_slice();
                let (cb, nb) = b.children(j).as_slice();
                for x in 0..na {
                    for y in 0..nb {
                        stack.push((ca[x], cb[y]));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Distance between two bodies' meshes, or some lower bound on it that is at
/// least `enough`. Best-first branch and bound on the node spheres, which
/// contain their triangles by the layered property.
pub fn body_distance(bodies: &[TriMeshBody], state: &SystemState, ta: &BshTree, tb: &BshTree, enough: f64) -> f64 {
    #[derive(PartialEq)]
    struct Entry(f64, usize, usize);
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> Ordering {
            other.0.total_cmp(&self.0).then_with(|| (other.1, other.2).cmp(&(self.1, self.2)))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    let bound = |i: usize, j: usize| {
        let d = (ta.world_center(state, i) - tb.world_center(state, j)).norm();
        (d - ta.nodes[i].radius - tb.nodes[j].radius).max(0.0)
    };
    let mut best = f64::INFINITY;
    let mut heap = BinaryHeap::from([Entry(bound(ta.root, tb.root), ta.root, tb.root)]);
    while let Some(Entry(lb, i, j)) = heap.pop() {
        if lb >= best.min(enough) {
            return best.min(lb);
        }
        let (a, b) = (&ta.nodes[i], &tb.nodes[j]);
        match (a.kind, b.kind) {
            (NodeKind::Leaf(x), NodeKind::Leaf(y)) => {
                let tx = state.triangle(&bodies[ta.body], ta.body, x);
                let ty = state.triangle(&bodies[tb.body], tb.body, y);
                best = best.min(crate::geometry::triangle_distance(&tx, &ty).distance);
            }
            _ => {
                // Split the larger non-leaf sphere.
                let split_a = !a.is_leaf() && (b.is_leaf() || a.radius >= b.radius);
                let kids = if split_a { a.children(i) } else { b.children(j) };
                let (ids, n) = kids.as_slice();
                for &k in &ids[..n] {
                    let (ci, cj) = if split_a { (k, j) } else { (i, k) };
                    heap.push(Entry(bound(ci, cj), ci, cj));
                }
            }
        }
    }
    best
}

/// Builds one tree per body.
pub fn build_trees(bodies: &[TriMeshBody], epsilon: f64) -> Result<Vec<BshTree>, BshError> {
    bodies.iter().enumerate().map(|(b, body)| BshTree::build(body, b, epsilon)).collect()
}

/// Unordered body pairs `(a, b)`, `a < b`, in a fixed order.
pub fn body_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

/// `P = Σ_{a<b} process_pair(root_a, root_b)`, pairs evaluated in parallel
/// and summed in a fixed order.
pub fn total_potential(bodies: &[TriMeshBody], state: &SystemState, trees: &[BshTree], chart: &dyn Chart, opts: EvalOptions) -> BshEval {
    let pairs = body_pairs(bodies.len());
    let per_pair: Vec<BshEval> = crate::par::map(&pairs, |&(a, b)| process_pair(bodies, state, chart, &trees[a], &trees[b], opts));
    let potential = PotentialEval::sum(opts.derivs, per_pair.iter().map(|e| &e.potential));
    let mut counts = InteractionCounts::default();
    let mut trace = Vec::new();
    for e in per_pair {
        counts += e.counts;
        trace.extend(e.trace);
    }
    BshEval { potential, counts, trace }
}

/// Counts of exact and centered evaluations performed by one evaluation.
pub fn count_interactions(bodies: &[TriMeshBody], state: &SystemState, trees: &[BshTree], chart: &dyn Chart) -> InteractionCounts {
    total_potential(bodies, state, trees, chart, EvalOptions::new(Derivs::Value)).counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{BodyChart, VertexChart};
    use crate::geometry::{primitives, Pose};

    fn tri_body(offset: Vec3) -> TriMeshBody {
        primitives::single_triangle(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), 1.0)
            .unwrap()
            .with_pose(Pose::from_translation(Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0) + offset))
    }

    #[test]
    fn single_triangle_tree() {
        let b = tri_body(Vec3::zeros());
        let t = BshTree::build(&b, 0, 0.1).unwrap();
        assert_eq!(t.nodes.len(), 1);
        let n = &t.nodes[t.root];
        assert!(n.is_leaf());
        assert!(n.rest_center.norm() < 1e-15);
        let r = b.rest_vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!((n.radius - r).abs() < 1e-15);
    }

    #[test]
    fn two_triangle_tree_is_layered() {
        let b = primitives::grid_plate(1, 1, 1.0, 1.0).unwrap();
        let t = BshTree::build(&b, 0, 0.1).unwrap();
        assert_eq!(t.nodes.len(), 3);
        let root = &t.nodes[t.root];
        let NodeKind::Internal(l, r) = root.kind else { panic!("root must be internal") };
        for ch in [l, r] {
            let c = &t.nodes[ch];
            assert!(root.radius >= (root.rest_center - c.rest_center).norm() + c.radius - 1e-15);
        }
        t.validate(&b).unwrap();
    }

    #[test]
    fn sphere_tree_invariants_and_depth() {
        let b = primitives::icosphere(1.0, 2, 1.0).unwrap();
        let t = BshTree::build(&b, 0, 0.1).unwrap();
        t.validate(&b).unwrap();
        assert!(t.depth() <= 2 * 9 + 4, "depth {}", t.depth());
        let b = primitives::uv_sphere(1.0, 16, 17, 1.0).unwrap();
        assert_eq!(b.triangle_count(), 512);
        let t = BshTree::build(&b, 0, 0.1).unwrap();
        t.validate(&b).unwrap();
        assert!(t.depth() <= 2 * 9 + 4, "depth {}", t.depth());
    }

    #[test]
    fn empty_mesh_and_bad_epsilon_are_errors() {
        let mut b = tri_body(Vec3::zeros());
        assert!(BshTree::build(&b, 0, 0.0).is_err());
        b.triangles.clear();
        assert!(matches!(BshTree::build(&b, 0, 0.1), Err(BshError::EmptyMesh(0))));
    }

    #[test]
    fn far_single_triangles_use_only_the_centered_form() {
        let bodies = vec![tri_body(Vec3::zeros()), tri_body(Vec3::new(0.0, 0.0, 5.0))];
        let state = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, 0.1).unwrap();
        let chart = VertexChart::new(&bodies);
        let e = total_potential(&bodies, &state, &trees, &chart, EvalOptions::new(Derivs::Hessian));
        assert_eq!(e.counts, InteractionCounts { exact: 0, centered: 1 });
        assert!((e.potential.value - crate::pair_potential::centered_value(5.0)).abs() < 1e-12);
    }

    #[test]
    fn near_single_triangles_use_the_exact_form() {
        let bodies = vec![tri_body(Vec3::zeros()), tri_body(Vec3::new(0.0, 0.0, 0.3))];
        let state = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, 0.1).unwrap();
        let chart = VertexChart::new(&bodies);
        let e = total_potential(&bodies, &state, &trees, &chart, EvalOptions::new(Derivs::Hessian));
        let ti = [0, 1, 2].map(|k| state.world(0)[k]);
        let tj = [0, 1, 2].map(|k| state.world(1)[k]);
        let exact = pair_potential(&ti, &tj, true).unwrap();
        assert_eq!(e.counts, InteractionCounts { exact: 1, centered: 0 });
        assert_eq!(e.potential.value, exact.value);
    }

    #[test]
    fn single_body_is_zero() {
        let bodies = vec![primitives::cube(1.0, 1.0).unwrap()];
        let state = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, 0.1).unwrap();
        let chart = BodyChart::new(&bodies, &state);
        let e = total_potential(&bodies, &state, &trees, &chart, EvalOptions::new(Derivs::Hessian));
        assert_eq!(e.potential.value, 0.0);
        assert!(e.potential.dense_grad(chart.dof_count()).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn far_bodies_prune_at_the_root() {
        let bodies = vec![
            primitives::icosphere(0.5, 1, 1.0).unwrap(),
            primitives::icosphere(0.5, 1, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(10.0, 0.0, 0.0))),
        ];
        let state = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, 0.1).unwrap();
        let chart = BodyChart::new(&bodies, &state);
        assert_eq!(count_interactions(&bodies, &state, &trees, &chart), InteractionCounts { exact: 0, centered: 1 });
    }
    #[test]
    fn body_distance_matches_brute_force() {
        let bodies = vec![
            primitives::icosphere(0.5, 1, 1.0).unwrap().with_pose(Pose::new(Vec3::new(0.1, 0.2, 0.62), Vec3::new(0.3, -0.2, 0.1))),
            primitives::grid_plate(3, 3, 0.5, 1.0).unwrap(),
        ];
        let state = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, DEFAULT_EPSILON).unwrap();
        let exact = crate::geometry::min_pair_distance(&bodies, &state);
        let d = body_distance(&bodies, &state, &trees[0], &trees[1], f64::INFINITY);
        assert!((d - exact).abs() < 1e-14, "{d} vs {exact}");
        let capped = body_distance(&bodies, &state, &trees[0], &trees[1], 0.01);
        assert!(capped <= exact && capped >= 0.01f64.min(exact) - 1e-15);
    }

}
