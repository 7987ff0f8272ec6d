//! Sparse potential values with derivatives, and the charts that map
//! derivatives taken at world-space points onto a degree-of-freedom space.
//!
//! A potential term is computed with respect to a handful of *points*, each
//! either a single vertex or the mean of a vertex subset. A [`Chart`] pulls
//! those point derivatives back either to raw vertex coordinates
//! ([`VertexChart`], `x ∈ R^{3V}`) or to the rigid generalized coordinates
//! ([`BodyChart`], six per free body).

use nalgebra::{DMatrix, DVector};

use crate::geometry::{SystemState, TriMeshBody, Vec3};
use crate::kinematics::RotationJet;

/// Which derivatives to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Derivs {
    Value,
    Gradient,
    Hessian,
}

impl Derivs {
    pub fn grad(self) -> bool {
        self >= Derivs::Gradient
    }

    pub fn hess(self) -> bool {
        self == Derivs::Hessian
    }
}

/// Value, gradient and Hessian over a sorted list of participating dofs.
///
/// `infinite` marks a non-separable configuration; such an eval carries no
/// derivatives and its `value` is `f64::INFINITY`.
#[derive(Clone, Debug)]
pub struct PotentialEval {
    pub value: f64,
    pub infinite: bool,
    pub derivs: Derivs,
    pub support: Vec<usize>,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl PotentialEval {
    pub fn zero(derivs: Derivs) -> Self {
        Self {
            value: 0.0,
            infinite: false,
            derivs,
            support: Vec::new(),
            grad: DVector::zeros(0),
            hess: DMatrix::zeros(0, 0),
        }
    }

    pub fn infinite(derivs: Derivs) -> Self {
        Self {
            value: f64::INFINITY,
            infinite: true,
            ..Self::zero(derivs)
        }
    }

    pub fn is_finite(&self) -> bool {
        !self.infinite
    }

    /// Gradient scattered into a dense vector of length `n`.
    pub fn dense_grad(&self, n: usize) -> DVector<f64> {
        let mut g = DVector::zeros(n);
        if self.derivs.grad() && !self.infinite {
            for (a, &i) in self.support.iter().enumerate() {
                g[i] += self.grad[a];
            }
        }
        g
    }

    /// Hessian scattered into a dense `n × n` matrix.
    pub fn dense_hess(&self, n: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(n, n);
        if self.derivs.hess() && !self.infinite {
            for (a, &i) in self.support.iter().enumerate() {
                for (b, &j) in self.support.iter().enumerate() {
                    h[(i, j)] += self.hess[(a, b)];
                }
            }
        }
        h
    }

    pub fn scaled(mut self, w: f64) -> Self {
        if self.infinite {
            return self;
        }
        self.value *= w;
        self.grad *= w;
        self.hess *= w;
        self
    }

    /// Re-expresses the derivatives over a superset `support` (sorted).
    pub fn embedded(&self, support: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
        let n = support.len();
        let mut g = DVector::zeros(if self.derivs.grad() { n } else { 0 });
        let mut h = DMatrix::zeros(if self.derivs.hess() { n } else { 0 }, if self.derivs.hess() { n } else { 0 });
        if self.infinite {
            return (g, h);
        }
        let pos = positions(&self.support, support);
        if self.derivs.grad() {
            for (a, &p) in pos.iter().enumerate() {
                g[p] = self.grad[a];
            }
        }
        if self.derivs.hess() {
            for (a, &p) in pos.iter().enumerate() {
                for (b, &q) in pos.iter().enumerate() {
                    h[(p, q)] = self.hess[(a, b)];
                }
            }
        }
        (g, h)
    }

    /// Sum of several evals, merged in iteration order.
    pub fn sum<'a>(derivs: Derivs, terms: impl IntoIterator<Item = &'a PotentialEval>) -> Self {
        let terms: Vec<&PotentialEval> = terms.into_iter().collect();
        if terms.iter().any(|t| t.infinite) {
            return Self::infinite(derivs);
        }
        let support = union_support(terms.iter().map(|t| t.support.as_slice()));
        let n = support.len();
        let mut out = Self {
            value: 0.0,
            infinite: false,
            derivs,
            grad: DVector::zeros(if derivs.grad() { n } else { 0 }),
            hess: DMatrix::zeros(if derivs.hess() { n } else { 0 }, if derivs.hess() { n } else { 0 }),
            support,
        };
        for t in terms {
            out.value += t.value;
            if !derivs.grad() {
                continue;
            }
            let pos = positions(&t.support, &out.support);
            for (a, &p) in pos.iter().enumerate() {
                out.grad[p] += t.grad[a];
            }
            if derivs.hess() {
                for (a, &p) in pos.iter().enumerate() {
                    for (b, &q) in pos.iter().enumerate() {
                        out.hess[(p, q)] += t.hess[(a, b)];
                    }
                }
            }
        }
        out
    }
}

/// Sorted union of sorted supports.
pub fn union_support<'a>(supports: impl IntoIterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut all: Vec<usize> = supports.into_iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Index of every element of `sub` inside the sorted superset `sup`.
pub fn positions(sub: &[usize], sup: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sub.len());
    let mut j = 0;
    for &s in sub {
        while sup[j] < s {
            j += 1;
        }
        debug_assert_eq!(sup[j], s);
        out.push(j);
    }
    out
}

/// Which vertices a point stands for.
#[derive(Clone, Copy, Debug)]
pub enum PointVerts<'a> {
    One(usize),
    Mean(&'a [usize]),
}

impl PointVerts<'_> {
    pub fn len(&self) -> usize {
        match self {
            PointVerts::One(_) => 1,
            PointVerts::Mean(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn for_each(&self, mut f: impl FnMut(usize)) {
        match self {
            PointVerts::One(v) => f(*v),
            PointVerts::Mean(s) => s.iter().copied().for_each(f),
        }
    }
}

/// A world-space point that a potential term depends on.
#[derive(Clone, Copy, Debug)]
pub struct Point<'a> {
    pub body: usize,
    pub verts: PointVerts<'a>,
    /// Body-frame position (the rest-frame mean of `verts`).
    pub rest: Vec3,
    pub world: Vec3,
}

/// Pulls derivatives with respect to point positions back to a dof space.
pub trait Chart: Sync {
    fn dof_count(&self) -> usize;

    /// `grad` has length `3·points.len()` and `hess` (when present) is the
    /// matching square matrix, both with respect to the point world positions.
    fn pull_back(
        &self,
        points: &[Point],
        value: f64,
        grad: &DVector<f64>,
        hess: Option<&DMatrix<f64>>,
        derivs: Derivs,
    ) -> PotentialEval;

    /// Columns of `∂x_p/∂q` as `(dof, column)` pairs.
    fn point_columns(&self, point: &Point) -> Vec<(usize, Vec3)>;
}

/// Raw world vertex coordinates, `x ∈ R^{3V}`, bodies concatenated in order.
#[derive(Clone, Debug)]
pub struct VertexChart {
    offsets: Vec<usize>,
    total: usize,
}

impl VertexChart {
    pub fn new(bodies: &[TriMeshBody]) -> Self {
        let mut offsets = Vec::with_capacity(bodies.len());
        let mut acc = 0;
        for b in bodies {
            offsets.push(acc);
            acc += b.vertex_count();
        }
        Self {
            offsets,
            total: acc,
        }
    }

    /// First dof of vertex `v` of `body`.
    pub fn dof(&self, body: usize, v: usize) -> usize {
        3 * (self.offsets[body] + v)
    }
}

impl Chart for VertexChart {
    fn dof_count(&self) -> usize {
        3 * self.total
    }

    fn pull_back(
        &self,
        points: &[Point],
        value: f64,
        grad: &DVector<f64>,
        hess: Option<&DMatrix<f64>>,
        derivs: Derivs,
    ) -> PotentialEval {
        let mut out = PotentialEval::zero(derivs);
        out.value = value;
        if !derivs.grad() {
            return out;
        }
        let mut bases: Vec<usize> = Vec::new();
        for p in points {
            p.verts.for_each(|v| bases.push(self.dof(p.body, v)));
        }
        bases.sort_unstable();
        bases.dedup();
        out.support = bases.iter().flat_map(|&b| [b, b + 1, b + 2]).collect();
        let n = out.support.len();
        let slot = |base: usize| 3 * bases.binary_search(&base).expect("vertex in support");
        // Per point: its vertex slots with the mean-map weight 1/|I|.
        let spread: Vec<(Vec<usize>, f64)> = points
            .iter()
            .map(|p| {
                let mut s = Vec::with_capacity(p.verts.len());
                p.verts.for_each(|v| s.push(slot(self.dof(p.body, v))));
                (s, 1.0 / p.verts.len() as f64)
            })
            .collect();
        out.grad = DVector::zeros(n);
        for (pi, (slots, w)) in spread.iter().enumerate() {
            for &s in slots {
                for c in 0..3 {
                    out.grad[s + c] += w * grad[3 * pi + c];
                }
            }
        }
        if let (true, Some(h)) = (derivs.hess(), hess) {
            out.hess = DMatrix::zeros(n, n);
            for (pi, (si, wi)) in spread.iter().enumerate() {
                for (qi, (sj, wj)) in spread.iter().enumerate() {
                    let block = h.fixed_view::<3, 3>(3 * pi, 3 * qi) * (wi * wj);
                    for &a in si {
                        for &b in sj {
                            let mut v = out.hess.fixed_view_mut::<3, 3>(a, b);
                            v += block;
                        }
                    }
                }
            }
        }
        out
    }

    fn point_columns(&self, point: &Point) -> Vec<(usize, Vec3)> {
        let w = 1.0 / point.verts.len() as f64;
        let mut cols = Vec::with_capacity(3 * point.verts.len());
        point.verts.for_each(|v| {
            let b = self.dof(point.body, v);
            for c in 0..3 {
                let mut e = Vec3::zeros();
                e[c] = w;
                cols.push((b + c, e));
            }
        });
        cols
    }
}

/// Rigid generalized coordinates: `[t, θ]` for every non-fixed body.
#[derive(Clone, Debug)]
pub struct BodyChart {
    base: Vec<Option<usize>>,
    jets: Vec<RotationJet>,
    n: usize,
}

impl BodyChart {
    pub fn new(bodies: &[TriMeshBody], state: &SystemState) -> Self {
        let mut base = Vec::with_capacity(bodies.len());
        let mut n = 0;
        for b in bodies {
            if b.fixed {
                base.push(None);
            } else {
                base.push(Some(n));
                n += 6;
            }
        }
        let jets = state.poses.iter().map(|p| RotationJet::new(&p.rotation)).collect();
        Self { base, jets, n }
    }

    pub fn dof_base(&self, body: usize) -> Option<usize> {
        self.base[body]
    }

    /// Kinematic Jacobian `∂x/∂q_b` (3×6) of a body-frame point.
    pub fn point_jacobian(&self, body: usize, rest: &Vec3) -> nalgebra::SMatrix<f64, 3, 6> {
        let jet = &self.jets[body];
        let mut j = nalgebra::SMatrix::<f64, 3, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
        for k in 0..3 {
            j.fixed_view_mut::<3, 1>(0, 3 + k).copy_from(&(jet.d1[k] * rest));
        }
        j
    }
}

impl Chart for BodyChart {
    fn dof_count(&self) -> usize {
        self.n
    }

    fn pull_back(
        &self,
        points: &[Point],
        value: f64,
        grad: &DVector<f64>,
        hess: Option<&DMatrix<f64>>,
        derivs: Derivs,
    ) -> PotentialEval {
        let mut out = PotentialEval::zero(derivs);
        out.value = value;
        if !derivs.grad() {
            return out;
        }
        let mut bases: Vec<usize> = points.iter().filter_map(|p| self.base[p.body]).collect();
        bases.sort_unstable();
        bases.dedup();
        out.support = bases.iter().flat_map(|&b| b..b + 6).collect();
        let n = out.support.len();
        let slot = |body: usize| self.base[body].map(|b| 6 * bases.binary_search(&b).unwrap());
        let jac: Vec<_> = points.iter().map(|p| self.point_jacobian(p.body, &p.rest)).collect();
        out.grad = DVector::zeros(n);
        for (pi, p) in points.iter().enumerate() {
            if let Some(s) = slot(p.body) {
                let g = grad.fixed_rows::<3>(3 * pi);
                let mut v = out.grad.fixed_rows_mut::<6>(s);
                v += jac[pi].transpose() * g;
            }
        }
        if let (true, Some(h)) = (derivs.hess(), hess) {
            out.hess = DMatrix::zeros(n, n);
            for (pi, p) in points.iter().enumerate() {
                let Some(si) = slot(p.body) else { continue };
                for (qi, q) in points.iter().enumerate() {
                    let Some(sj) = slot(q.body) else { continue };
                    let block = jac[pi].transpose() * h.fixed_view::<3, 3>(3 * pi, 3 * qi) * jac[qi];
                    let mut v = out.hess.fixed_view_mut::<6, 6>(si, sj);
                    v += block;
                }
                // Second-order kinematic term g_pᵀ ∂²x_p/∂θ_k∂θ_l.
                let g = grad.fixed_rows::<3>(3 * pi);
                let jet = &self.jets[p.body];
                for k in 0..3 {
                    for l in 0..3 {
                        out.hess[(si + 3 + k, si + 3 + l)] += g.dot(&(jet.d2[k][l] * p.rest));
                    }
                }
            }
        }
        out
    }

    fn point_columns(&self, point: &Point) -> Vec<(usize, Vec3)> {
        let Some(base) = self.base[point.body] else { return Vec::new() };
        let j = self.point_jacobian(point.body, &point.rest);
        (0..6).map(|k| (base + k, j.column(k).into_owned())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{primitives, Pose};

    fn sample(support: Vec<usize>, seed: f64) -> PotentialEval {
        let n = support.len();
        let g = DVector::from_fn(n, |i, _| seed + i as f64);
        let h = DMatrix::from_fn(n, n, |i, j| seed * (i + j) as f64);
        PotentialEval {
            value: seed,
            infinite: false,
            derivs: Derivs::Hessian,
            support,
            grad: g,
            hess: h,
        }
    }

    #[test]
    fn sum_matches_dense_sum() {
        let a = sample(vec![0, 3, 4], 1.0);
        let b = sample(vec![1, 3, 7], 2.0);
        let s = PotentialEval::sum(Derivs::Hessian, [&a, &b]);
        assert_eq!(s.support, vec![0, 1, 3, 4, 7]);
        assert_eq!(s.dense_grad(8), a.dense_grad(8) + b.dense_grad(8));
        assert_eq!(s.dense_hess(8), a.dense_hess(8) + b.dense_hess(8));
        assert_eq!(s.value, 3.0);
    }

    #[test]
    fn sum_with_infinite_is_infinite() {
        let a = sample(vec![0], 1.0);
        let s = PotentialEval::sum(Derivs::Hessian, [&a, &PotentialEval::infinite(Derivs::Hessian)]);
        assert!(s.infinite);
    }

    /// f(q) = ½‖Σ_p c_p x_p(q)‖² through a body chart vs finite differences.
    #[test]
    fn body_chart_matches_finite_differences() {
        let bodies = vec![
            primitives::tetrahedron(1.0, 1.0).unwrap().with_pose(Pose::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.4, -0.3, 0.9))),
            primitives::tetrahedron(1.0, 1.0).unwrap().with_pose(Pose::new(Vec3::new(2.0, 0.0, 0.0), Vec3::new(-1.2, 0.3, 0.2))),
        ];
        let subset = [0usize, 2, 3];
        let f = |poses: &[Pose]| -> (f64, DVector<f64>, DMatrix<f64>, Vec<Vec3>) {
            let rest0 = bodies[0].rest_vertices[1];
            let rest1: Vec3 = subset.iter().map(|&i| bodies[1].rest_vertices[i]).sum::<Vec3>() / 3.0;
            let x0 = poses[0].transform_point(&rest0);
            let x1 = poses[1].transform_point(&rest1);
            let r = x0 * 2.0 - x1;
            let v = 0.5 * r.norm_squared() + x0.x * x1.y;
            let mut g = DVector::zeros(6);
            g.fixed_rows_mut::<3>(0).copy_from(&(r * 2.0));
            g.fixed_rows_mut::<3>(3).copy_from(&(-r));
            g[0] += x1.y;
            g[4] += x0.x;
            let mut h = DMatrix::zeros(6, 6);
            for i in 0..3 {
                h[(i, i)] = 4.0;
                h[(i + 3, i + 3)] = 1.0;
                h[(i, i + 3)] = -2.0;
                h[(i + 3, i)] = -2.0;
            }
            h[(0, 4)] += 1.0;
            h[(4, 0)] += 1.0;
            (v, g, h, vec![rest0, rest1, x0, x1])
        };
        let poses0: Vec<Pose> = bodies.iter().map(|b| b.pose).collect();
        let eval_at = |poses: &[Pose]| {
            let state = SystemState::new(&bodies, poses.to_vec(), 0);
            let chart = BodyChart::new(&bodies, &state);
            let (v, g, h, pts) = f(poses);
            let points = [
                Point { body: 0, verts: PointVerts::One(1), rest: pts[0], world: pts[2] },
                Point { body: 1, verts: PointVerts::Mean(&subset), rest: pts[1], world: pts[3] },
            ];
            chart.pull_back(&points, v, &g, Some(&h), Derivs::Hessian)
        };
        let e = eval_at(&poses0);
        let grad = e.dense_grad(12);
        let hess = e.dense_hess(12);
        let h = 1e-6;
        for k in 0..12 {
            let bump = |s: f64| {
                let mut p = poses0.clone();
                let mut a = p[k / 6].to_array();
                a[k % 6] += s;
                p[k / 6] = Pose::from_slice(&a);
                eval_at(&p)
            };
            let (ep, em) = (bump(h), bump(-h));
            let fd = (ep.value - em.value) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + grad[k].abs()), "grad {k}: {fd} vs {}", grad[k]);
            let fdh = (ep.dense_grad(12) - em.dense_grad(12)) / (2.0 * h);
            for l in 0..12 {
                assert!((fdh[l] - hess[(l, k)]).abs() < 1e-6 * (1.0 + hess[(l, k)].abs()), "hess {l},{k}");
            }
        }
    }

    #[test]
    fn vertex_chart_spreads_means() {
        let bodies = vec![primitives::tetrahedron(1.0, 1.0).unwrap()];
        let chart = VertexChart::new(&bodies);
        let subset = [1usize, 3];
        let pts = [Point { body: 0, verts: PointVerts::Mean(&subset), rest: Vec3::zeros(), world: Vec3::zeros() }];
        let g = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let h = DMatrix::identity(3, 3) * 4.0;
        let e = chart.pull_back(&pts, 1.0, &g, Some(&h), Derivs::Hessian);
        assert_eq!(e.support, vec![3, 4, 5, 9, 10, 11]);
        assert_eq!(e.grad.as_slice(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(e.hess[(0, 0)], 1.0);
        assert_eq!(e.hess[(0, 3)], 1.0);
    }
}
