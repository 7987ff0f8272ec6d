//! Lagged frictional damping over locally supported leaf potentials.
//!
//! For every leaf pair with center distance below `d2` at the previous state
//! `x^t`, the locally supported potential `P_local` (exact pair potential
//! blended to zero) gives per-vertex weights `w_k = λ‖∂P_local/∂x_k^t‖`, and
//! the separating plane at `x^t` gives the tangent projector
//! `T = I − n̂n̂ᵀ`. The damping term is
//!
//! `D = Σ_pairs Σ_k ½·w_k·‖T(x_k − x_k^t)‖² / δt`,
//!
//! quadratic in the unknown `x`. Weights and projector are frozen at `x^t`,
//! but [`FrictionModel::mixed_hessian`] differentiates through them exactly.

use nalgebra::{DMatrix, DVector, SMatrix};
use thiserror::Error;

use crate::blending::{blend_dense, blend_weight, BlendSpec, DenseEval};
use crate::bsh::{body_pairs, leaf_pair_local, leaf_points, leaf_pairs_where, pair_dense, spread_centers, BshTree, LeafEval};
use crate::eval::{Chart, Derivs, Point, PointVerts, PotentialEval};
use crate::geometry::{Mat3, SystemState, TriMeshBody, Vec3};
use crate::pair_potential::pair_potential;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrictionParams {
    pub lambda: f64,
    pub epsilon: f64,
}

#[derive(Debug, Error)]
pub enum FrictionError {
    #[error("negative friction coefficient {0}")]
    NegativeLambda(f64),
    #[error("lagged state is not penetration-free (bodies {0} and {1})")]
    Penetrating(usize, usize),
}

/// Locally supported leaf potential in the 18 local vertex coordinates; it
/// vanishes identically at center distances at or beyond `d2`.
pub fn local_leaf_potential(ti: &[Vec3; 3], tj: &[Vec3; 3], eps: f64, derivs: Derivs) -> LeafEval {
    let (ci, ri) = sphere(ti);
    let (cj, rj) = sphere(tj);
    leaf_pair_local(ti, tj, &ci, &cj, &BlendSpec::for_radii(ri, rj, eps), derivs, true, true)
}

fn sphere(t: &[Vec3; 3]) -> (Vec3, f64) {
    let c = (t[0] + t[1] + t[2]) / 3.0;
    (c, t.iter().map(|v| (v - c).norm()).fold(0.0, f64::max))
}

/// Data frozen at the lagged state for one leaf pair.
#[derive(Clone, Debug)]
struct LaggedPair {
    /// `(body, vertex)` of the six points, side `i` first.
    verts: [(usize, usize); 6],
    rest: [Vec3; 6],
    x_prev: [Vec3; 6],
    weights: [f64; 6],
    tangent: Mat3,
    n_hat: Vec3,
    /// `∂w_k/∂x^t`, one 18-row per point.
    dw: SMatrix<f64, 6, 18>,
    /// `∂n̂/∂x^t`.
    dn_hat: SMatrix<f64, 3, 18>,
}

/// Friction damping built from a lagged state.
#[derive(Clone, Debug)]
pub struct FrictionModel {
    pub params: FrictionParams,
    pub dt: f64,
    pairs: Vec<LaggedPair>,
}

impl FrictionModel {
    pub fn lagged(bodies: &[TriMeshBody], prev: &SystemState, trees: &[BshTree], params: FrictionParams, dt: f64) -> Result<Self, FrictionError> {
        if params.lambda < 0.0 {
            return Err(FrictionError::NegativeLambda(params.lambda));
        }
        if params.lambda == 0.0 {
            return Ok(Self { params, dt, pairs: Vec::new() });
        }
        let eps = params.epsilon;
        let per_body_pair = crate::par::map(&body_pairs(bodies.len()), |&(a, b)| {
            let near = leaf_pairs_where(prev, &trees[a], &trees[b], |dist, r_sum| dist < (1.0 + eps) * r_sum);
            let mut out = Vec::with_capacity(near.len());
            for (ta, tb) in near {
                let (pts, tri_a, tri_b) = leaf_points(bodies, prev, a, ta, b, tb);
                let (ca, ra) = sphere(&tri_a);
                let (cb, rb) = sphere(&tri_b);
                let spec = BlendSpec::for_radii(ra, rb, eps);
                let (phi, pg, ph) = blend_weight(&spec, &ca, &cb);
                if phi >= 1.0 {
                    continue;
                }
                let sol = pair_potential(&tri_a, &tri_b, true).map_err(|_| FrictionError::Penetrating(a, b))?;
                let exact = pair_dense(&sol, Derivs::Hessian);
                let w = spread_centers(phi, &pg, &ph, Derivs::Hessian);
                let local = blend_dense(Some(&exact), &DenseEval::zero(18), &w, Derivs::Hessian);
                out.push(lag_pair(&pts, &local, &sol.plane.n, &sol.plane_jacobian, params.lambda));
            }
            Ok(out)
        });
        let mut pairs = Vec::new();
        for p in per_body_pair {
            pairs.extend(p?);
        }
        Ok(Self { params, dt, pairs })
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// `D` at `next` with derivatives through `chart` (built at `next`).
    pub fn dissipation(&self, next: &SystemState, chart: &dyn Chart, derivs: Derivs) -> PotentialEval {
        let terms: Vec<PotentialEval> = self
            .pairs
            .iter()
            .map(|p| {
                let mut value = 0.0;
                let mut g = DVector::zeros(if derivs.grad() { 18 } else { 0 });
                let mut h = DMatrix::zeros(if derivs.hess() { 18 } else { 0 }, if derivs.hess() { 18 } else { 0 });
                for k in 0..6 {
                    let (body, v) = p.verts[k];
                    let delta = next.world(body)[v] - p.x_prev[k];
                    let td = p.tangent * delta;
                    value += 0.5 * p.weights[k] * delta.dot(&td) / self.dt;
                    if derivs.grad() {
                        g.fixed_rows_mut::<3>(3 * k).copy_from(&(td * (p.weights[k] / self.dt)));
                    }
                    if derivs.hess() {
                        h.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(&(p.tangent * (p.weights[k] / self.dt)));
                    }
                }
                let points = points_of(p, next);
                chart.pull_back(&points, value, &g, derivs.hess().then_some(&h), derivs)
            })
            .collect();
        PotentialEval::sum(derivs, terms.iter())
    }

    /// `∂²D/∂q∂q^t`: rows over `chart_next` dofs, columns over `chart_prev`
    /// dofs, including the dependence of the frozen weights and projector
    /// on `x^t`.
    pub fn mixed_hessian(&self, next: &SystemState, prev: &SystemState, chart_next: &dyn Chart, chart_prev: &dyn Chart) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(chart_next.dof_count(), chart_prev.dof_count());
        for p in &self.pairs {
            let block = self.mixed_local(p, next);
            let pts_next = points_of(p, next);
            let pts_prev = points_of(p, prev);
            let cols_next: Vec<_> = pts_next.iter().map(|q| chart_next.point_columns(q)).collect();
            let cols_prev: Vec<_> = pts_prev.iter().map(|q| chart_prev.point_columns(q)).collect();
            for k in 0..6 {
                for m in 0..6 {
                    let b = block.fixed_view::<3, 3>(3 * k, 3 * m);
                    for (r, cr) in &cols_next[k] {
                        let row = cr.transpose() * b;
                        for (c, cc) in &cols_prev[m] {
                            out[(*r, *c)] += (row * cc)[0];
                        }
                    }
                }
            }
        }
        out
    }

    /// `∂(∂D/∂x)/∂x^t` in the 18 local coordinates.
    fn mixed_local(&self, p: &LaggedPair, next: &SystemState) -> SMatrix<f64, 18, 18> {
        let mut out = SMatrix::<f64, 18, 18>::zeros();
        let inv_dt = 1.0 / self.dt;
        for k in 0..6 {
            let (body, v) = p.verts[k];
            let delta = next.world(body)[v] - p.x_prev[k];
            let td = p.tangent * delta;
            // Through the weight.
            let mut rows = td * p.dw.row(k) * inv_dt;
            // Through the projector: d(TΔ)/dn̂ = −(n̂·Δ)I − n̂Δᵀ.
            let dt_dn = -Mat3::identity() * p.n_hat.dot(&delta) - p.n_hat * delta.transpose();
            rows += dt_dn * p.dn_hat * (p.weights[k] * inv_dt);
            // Through Δ = x − x^t.
            let mut v = rows.fixed_view_mut::<3, 3>(0, 3 * k);
            v -= p.tangent * (p.weights[k] * inv_dt);
            out.fixed_view_mut::<3, 18>(3 * k, 0).copy_from(&rows);
        }
        out
    }
}

fn points_of(p: &LaggedPair, state: &SystemState) -> [Point<'static>; 6] {
    std::array::from_fn(|k| {
        let (body, v) = p.verts[k];
        Point { body, verts: PointVerts::One(v), rest: p.rest[k], world: state.world(body)[v] }
    })
}

fn lag_pair(pts: &[Point; 6], local: &DenseEval, n: &Vec3, plane_jacobian: &SMatrix<f64, 4, 18>, lambda: f64) -> LaggedPair {
    let n_norm = n.norm();
    let n_hat = n / n_norm;
    let proj = Mat3::identity() - n_hat * n_hat.transpose();
    let dn = plane_jacobian.fixed_rows::<3>(0).into_owned();
    let dn_hat = proj * dn / n_norm;
    let mut weights = [0.0; 6];
    let mut dw = SMatrix::<f64, 6, 18>::zeros();
    for k in 0..6 {
        let g = local.grad.fixed_rows::<3>(3 * k).into_owned();
        let gn = g.norm();
        weights[k] = lambda * gn;
        if gn > 0.0 {
            let u = g / gn;
            let hk = local.hess.view((3 * k, 0), (3, 18));
            let row = hk.transpose() * u * lambda;
            for c in 0..18 {
                dw[(k, c)] = row[c];
            }
        }
    }
    let verts = std::array::from_fn(|k| match pts[k].verts {
        PointVerts::One(v) => (pts[k].body, v),
        PointVerts::Mean(_) => unreachable!("leaf points are single vertices"),
    });
    LaggedPair {
        verts,
        rest: pts.map(|q| q.rest),
        x_prev: pts.map(|q| q.world),
        weights,
        tangent: proj,
        n_hat,
        dw,
        dn_hat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsh::build_trees;
    use crate::eval::VertexChart;
    use crate::geometry::{primitives, Pose};
    use crate::pair_potential::pair_potential;

    fn tri(z: f64, x: f64) -> [Vec3; 3] {
        [Vec3::new(x, 0.0, z), Vec3::new(x + 1.0, 0.0, z), Vec3::new(x, 1.0, z)]
    }

    #[test]
    fn local_leaf_potential_regimes() {
        let ti = tri(0.0, 0.0);
        let (_, r) = sphere(&ti);
        let d1 = 2.0 * r;
        let at = |gap: f64| local_leaf_potential(&ti, &tri(gap, 0.0), 0.1, Derivs::Hessian);
        let far = at(1.1 * d1 + 1e-9);
        let l = far.local.unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0) && l.hess.iter().all(|&h| h == 0.0));
        let near = at(0.5 * d1);
        assert_eq!(near.local.unwrap().value, pair_potential(&ti, &tri(0.5 * d1, 0.0), false).unwrap().value);
        let mid = 1.05 * d1;
        let m = at(mid).local.unwrap().value;
        assert!((m - 0.5 * pair_potential(&ti, &tri(mid, 0.0), false).unwrap().value).abs() < 1e-12 * m);
    }

    fn plate_and_tile(z: f64) -> Vec<TriMeshBody> {
        vec![
            primitives::grid_plate(2, 2, 1.0, 1.0).unwrap().with_fixed(true),
            primitives::grid_plate(1, 1, 1.0, 1.0).unwrap().with_pose(Pose::new(Vec3::new(0.1, -0.05, z), Vec3::new(0.02, -0.01, 0.3))),
        ]
    }

    #[test]
    fn zero_motion_and_far_bodies_give_zero() {
        let bodies = plate_and_tile(0.3);
        let prev = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, 0.1).unwrap();
        let f = FrictionModel::lagged(&bodies, &prev, &trees, FrictionParams { lambda: 0.5, epsilon: 0.1 }, 0.04).unwrap();
        assert!(f.pair_count() > 0);
        let chart = VertexChart::new(&bodies);
        let d = f.dissipation(&prev, &chart, Derivs::Gradient);
        assert_eq!(d.value, 0.0);
        assert!(d.grad.iter().all(|&g| g == 0.0));
        let far = plate_and_tile(10.0);
        let prev = SystemState::from_bodies(&far);
        let f = FrictionModel::lagged(&far, &prev, &trees, FrictionParams { lambda: 0.5, epsilon: 0.1 }, 0.04).unwrap();
        assert_eq!(f.pair_count(), 0);
    }

    #[test]
    fn normal_motion_is_not_damped() {
        let bodies = vec![
            primitives::single_triangle(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), 1.0).unwrap().with_fixed(true),
            primitives::single_triangle(Vec3::new(0.0, 0.0, 0.2), Vec3::new(1.0, 0.0, 0.2), Vec3::new(0.0, 1.0, 0.2), 1.0).unwrap(),
        ];
        let prev = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, 0.1).unwrap();
        let f = FrictionModel::lagged(&bodies, &prev, &trees, FrictionParams { lambda: 1.0, epsilon: 0.1 }, 0.04).unwrap();
        let chart = VertexChart::new(&bodies);
        let mut up = bodies[1].pose;
        up.translation.z += 0.05;
        let next = SystemState::new(&bodies, vec![bodies[0].pose, up], 1);
        assert!(f.dissipation(&next, &chart, Derivs::Value).value.abs() < 1e-20);
        let mut side = bodies[1].pose;
        side.translation.x += 0.05;
        let next = SystemState::new(&bodies, vec![bodies[0].pose, side], 1);
        assert!(f.dissipation(&next, &chart, Derivs::Value).value > 0.0);
    }

    #[test]
    fn friction_grows_with_lambda() {
        let bodies = plate_and_tile(0.3);
        let prev = SystemState::from_bodies(&bodies);
        let trees = build_trees(&bodies, 0.1).unwrap();
        let mut moved = bodies[1].pose;
        moved.translation.x += 0.02;
        let next = SystemState::new(&bodies, vec![bodies[0].pose, moved], 1);
        let chart = VertexChart::new(&bodies);
        let norm = |lambda: f64| {
            let f = FrictionModel::lagged(&bodies, &prev, &trees, FrictionParams { lambda, epsilon: 0.1 }, 0.04).unwrap();
            f.dissipation(&next, &chart, Derivs::Gradient).grad.norm()
        };
        assert!(norm(0.2) > 0.0 && norm(0.4) > norm(0.2));
        assert!((norm(0.4) / norm(0.2) - 2.0).abs() < 1e-12);
    }
}
