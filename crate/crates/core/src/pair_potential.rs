//! Separating-plane potential between two triangles and its centered limit.
//!
//! For triangles `t_i`, `t_j` and a plane `p = (n, d)` the inner objective is
//!
//! ```text
//! L(p, x) = 12·B(1 − ‖n‖) + Σ_k B(⟨x_ik, n⟩ + d) + Σ_k B(−⟨x_jk, n⟩ − d)
//! ```
//!
//! with the barrier `B(s) = 1/s` (or the clamped log barrier of the local
//! baseline). The potential is `P(x) = min_p L(p, x)`; its gradient follows
//! from the envelope theorem and its Hessian from the implicit function
//! theorem, `∇²P = L_xx − L_xp L_pp⁻¹ L_px`.
//!
//! The Newton solve runs in a frame centered between the two triangle centers,
//! which leaves `P` unchanged and keeps the 4×4 system well scaled.

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector4};
use thiserror::Error;

use crate::geometry::{triangle_distance, Vec3};

/// Weight of the plane-norm barrier.
pub const NORM_WEIGHT: f64 = 12.0;

pub const MAX_NEWTON_ITERS: usize = 100;
pub const GRAD_TOL: f64 = 1e-10;
const FRACTION_TO_BOUNDARY: f64 = 0.9;
const ARMIJO_C: f64 = 1e-4;
/// Newton decrement below which further progress is pure rounding.
const DECREMENT_FLOOR: f64 = 1e-22;
/// Decrement (relative to `max(1, |L|)`) below which line search is skipped.
const LOCAL_PHASE: f64 = 1e-10;
/// Relative Newton step below which the iterate no longer changes.
const STEP_FLOOR: f64 = 1e-14;

pub type Vec18 = SVector<f64, 18>;
pub type Mat18 = SMatrix<f64, 18, 18>;
pub type PlaneJacobian = SMatrix<f64, 4, 18>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("triangles are not separable (distance {distance:e})")]
    NotSeparable { distance: f64 },
    #[error("plane solve did not converge in {iterations} iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
}

/// Scalar barrier with its first two derivatives.
pub trait Barrier: Copy + Send + Sync {
    /// `(B, B', B'')` at `s`, or `None` outside the open domain `s > 0`.
    fn eval(&self, s: f64) -> Option<(f64, f64, f64)>;
}

/// `B(s) = 1/max(s, 0)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Reciprocal;

impl Barrier for Reciprocal {
    #[inline]
    fn eval(&self, s: f64) -> Option<(f64, f64, f64)> {
        if s > 0.0 {
            let r = 1.0 / s;
            Some((r, -r * r, 2.0 * r * r * r))
        } else {
            None
        }
    }
}

/// `B(s) = −(s−δ)²·log(s/δ)` for `s < δ`, zero beyond: locally supported and C².
#[derive(Clone, Copy, Debug)]
pub struct ClampedLog {
    pub delta: f64,
}

impl Barrier for ClampedLog {
    #[inline]
    fn eval(&self, s: f64) -> Option<(f64, f64, f64)> {
        if !(s > 0.0) {
            return None;
        }
        if s >= self.delta {
            return Some((0.0, 0.0, 0.0));
        }
        let e = s - self.delta;
        let l = (s / self.delta).ln();
        Some((
            -e * e * l,
            -2.0 * e * l - e * e / s,
            -2.0 * l - 4.0 * e / s + e * e / (s * s),
        ))
    }
}

/// The minimizing plane with solver diagnostics. `d` is in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparatingPlane {
    pub n: Vec3,
    pub d: f64,
    pub newton_iters: usize,
    pub residual: f64,
}

/// Convex-combination witnesses of the stationarity conditions:
/// `n = α·(a − b)` with `a ∈ CH(t_i)`, `b ∈ CH(t_j)` and `α > 0`.
#[derive(Clone, Copy, Debug)]
pub struct Witnesses {
    pub alpha: f64,
    pub a: Vec3,
    pub b: Vec3,
}

/// A solved pair with derivatives over the 18 coordinates `(x_i0, x_i1, x_i2, x_j0, x_j1, x_j2)`.
#[derive(Clone, Debug)]
pub struct PairSolution {
    pub plane: SeparatingPlane,
    pub value: f64,
    /// Barrier arguments `(s_0, s_1, s_2, u_0, u_1, u_2)`.
    pub slacks: [f64; 6],
    pub grad: Vec18,
    pub hess: Mat18,
    /// `∂(n, d)/∂x`; filled when the Hessian is requested.
    pub plane_jacobian: PlaneJacobian,
}

impl PairSolution {
    /// Per-vertex force `−∂P/∂x_k`.
    pub fn force(&self, k: usize) -> Vec3 {
        -self.grad.fixed_rows::<3>(3 * k).into_owned()
    }

    /// Witnesses for the reciprocal barrier (the weights are `1/s²`).
    pub fn witnesses(&self, ti: &[Vec3; 3], tj: &[Vec3; 3]) -> Witnesses {
        let wi: Vec<f64> = self.slacks[..3].iter().map(|s| 1.0 / (s * s)).collect();
        let wj: Vec<f64> = self.slacks[3..].iter().map(|s| 1.0 / (s * s)).collect();
        let si: f64 = wi.iter().sum();
        let sj: f64 = wj.iter().sum();
        let a = (0..3).map(|k| ti[k] * wi[k]).sum::<Vec3>() / si;
        let b = (0..3).map(|k| tj[k] * wj[k]).sum::<Vec3>() / sj;
        let m = self.plane.n.norm();
        Witnesses {
            alpha: m * (1.0 - m) * (1.0 - m) * si / NORM_WEIGHT,
            a,
            b,
        }
    }
}

/// Rows of a square-root factor `F` with `FᵀF = ∂²L/∂p²`: six point rows,
/// four plane-norm rows and four optional regularization rows.
type Factor = SMatrix<f64, 14, 4>;

struct Objective {
    value: f64,
    grad: Vector4<f64>,
    hess: Matrix4<f64>,
    factor: Factor,
}

/// `L`, `∂L/∂p`, `∂²L/∂p²` in the centered frame, or `None` if infeasible.
fn objective<B: Barrier>(bar: &B, xi: &[Vec3; 3], xj: &[Vec3; 3], y: &Vector4<f64>, want_hess: bool) -> Option<Objective> {
    let n = Vec3::new(y[0], y[1], y[2]);
    let m = n.norm();
    let (b0, b1, b2) = bar.eval(1.0 - m)?;
    let mut value = NORM_WEIGHT * b0;
    let mut grad = Vector4::zeros();
    let mut hess = Matrix4::zeros();
    let mut factor = Factor::zeros();
    if m > 0.0 {
        let u = n / m;
        let gn = -NORM_WEIGHT * b1 * u;
        grad.fixed_rows_mut::<3>(0).copy_from(&gn);
        if want_hess {
            let uu = u * u.transpose();
            let proj = Matrix3::identity() - uu;
            let hn = (uu * b2 - proj * (b1 / m)) * NORM_WEIGHT;
            hess.fixed_view_mut::<3, 3>(0, 0).copy_from(&hn);
            // B'' ≥ 0 and −B' ≥ 0 for both barriers; the projector is idempotent.
            factor.fixed_view_mut::<1, 3>(6, 0).copy_from(&(u.transpose() * (NORM_WEIGHT * b2.max(0.0)).sqrt()));
            factor.fixed_view_mut::<3, 3>(7, 0).copy_from(&(proj * (NORM_WEIGHT * (-b1).max(0.0) / m).sqrt()));
        }
    }
    let mut row = 0;
    for (pts, sign) in [(xi, 1.0), (xj, -1.0)] {
        for x in pts {
            let a = Vector4::new(sign * x.x, sign * x.y, sign * x.z, sign);
            let s = a.dot(y);
            let (v0, v1, v2) = bar.eval(s)?;
            value += v0;
            grad += a * v1;
            if want_hess {
                hess += a * a.transpose() * v2;
                factor.set_row(row, &(a.transpose() * v2.max(0.0).sqrt()));
            }
            row += 1;
        }
    }
    Some(Objective { value, grad, hess, factor })
}

/// Adds `r·I` to the system and its factor.
fn regularized(obj: &Objective) -> (Matrix4<f64>, Factor) {
    let r = 1e-12 * (1.0 + obj.hess.trace().abs());
    let mut f = obj.factor;
    for k in 0..4 {
        f[(10 + k, k)] = r.sqrt();
    }
    (obj.hess + Matrix4::identity() * r, f)
}

/// Solves `H·Z = R`. Cholesky when `H` is well conditioned; otherwise a QR
/// of the square-root factor, whose condition is the square root of `H`'s
/// (a single nearly active slack can push `cond(H)` past `1/ε`).
fn solve_plane_system<const C: usize>(h: &Matrix4<f64>, f: &Factor, r: &SMatrix<f64, 4, C>) -> Option<SMatrix<f64, 4, C>> {
    if let Some(ch) = h.cholesky() {
        let d = ch.l_dirty().diagonal();
        if d.min() > 1e-6 * d.max() {
            return Some(ch.solve(r));
        }
    }
    let rf = f.qr().r();
    let z = rf.tr_solve_upper_triangular(r)?;
    rf.solve_upper_triangular(&z)
}

/// Largest step along `dy` that keeps every barrier argument at least 10% of its current value.
fn max_step(xi: &[Vec3; 3], xj: &[Vec3; 3], y: &Vector4<f64>, dy: &Vector4<f64>) -> f64 {
    let mut tau: f64 = 1.0;
    for (pts, sign) in [(xi, 1.0), (xj, -1.0)] {
        for x in pts {
            let a = Vector4::new(sign * x.x, sign * x.y, sign * x.z, sign);
            let s = a.dot(y);
            let ds = a.dot(dy);
            if ds < 0.0 {
                tau = tau.min(FRACTION_TO_BOUNDARY * s / -ds);
            }
        }
    }
    // ‖n + τ·Δn‖ = 1, positive root.
    let n = Vec3::new(y[0], y[1], y[2]);
    let dn = Vec3::new(dy[0], dy[1], dy[2]);
    let qa = dn.norm_squared();
    if qa > 0.0 {
        let qb = n.dot(&dn);
        let qc = n.norm_squared() - 1.0;
        let root = (-qb + (qb * qb - qa * qc).sqrt()) / qa;
        tau = tau.min(FRACTION_TO_BOUNDARY * root);
    }
    tau
}

fn mean3(t: &[Vec3; 3]) -> Vec3 {
    (t[0] + t[1] + t[2]) / 3.0
}

/// Initial plane in the centered frame: whichever of the center-to-center
/// midplane and the closest-feature midplane (both with `‖n‖ = ½`) has the
/// lower objective. Every slack of the closest-feature midplane is at least
/// a quarter of the distance; the center midplane can be feasible with
/// near-zero slacks when the triangles almost share an edge.
fn initial_plane(xi: &[Vec3; 3], xj: &[Vec3; 3]) -> Result<Vector4<f64>, PairError> {
    let ci = mean3(xi);
    let cj = mean3(xj);
    let dc = ci - cj;
    let dist = dc.norm();
    let bar = Reciprocal;
    let value = |y: &Vector4<f64>| objective(&bar, xi, xj, y, false).map(|o| o.value).filter(|v| v.is_finite());
    let center = (dist > 0.0).then(|| {
        let n0 = dc / (2.0 * dist);
        Vector4::new(n0.x, n0.y, n0.z, -n0.dot(&((ci + cj) * 0.5)))
    });
    let center = center.and_then(|y| value(&y).map(|v| (y, v)));
    let td = triangle_distance(xi, xj);
    let feature = (td.distance > 0.0)
        .then(|| {
            let nf = (td.point_a - td.point_b) / (2.0 * td.distance);
            let mid = (td.point_a + td.point_b) * 0.5;
            Vector4::new(nf.x, nf.y, nf.z, -nf.dot(&mid))
        })
        .and_then(|y| value(&y).map(|v| (y, v)));
    match (center, feature) {
        (Some((y0, v0)), Some((yf, vf))) => Ok(if vf < v0 { yf } else { y0 }),
        (Some((y, _)), None) | (None, Some((y, _))) => Ok(y),
        (None, None) => Err(PairError::NotSeparable { distance: td.distance }),
    }
}

fn newton<B: Barrier>(bar: &B, xi: &[Vec3; 3], xj: &[Vec3; 3], mut y: Vector4<f64>, regularize: bool) -> Result<(Vector4<f64>, usize, f64), PairError> {
    let mut obj = objective(bar, xi, xj, &y, true).ok_or(PairError::NotSeparable { distance: 0.0 })?;
    for it in 0..MAX_NEWTON_ITERS {
        let scale = obj.value.abs().max(1.0);
        let gnorm = obj.grad.norm();
        if gnorm <= GRAD_TOL * scale {
            return Ok((y, it, gnorm));
        }
        let (h, f) = if regularize { regularized(&obj) } else { (obj.hess, obj.factor) };
        let Some(dy) = solve_plane_system(&h, &f, &(-obj.grad)) else {
            return Err(PairError::MaxIterations { iterations: it, residual: gnorm });
        };
        let slope = obj.grad.dot(&dy);
        if -slope <= DECREMENT_FLOOR * scale || dy.amax() <= STEP_FLOOR * y.amax() {
            return Ok((y, it, gnorm));
        }
        let mut tau = max_step(xi, xj, &y, &dy);
        let mut accepted = None;
        if -slope <= LOCAL_PHASE * scale {
            // L can no longer resolve the decrease: accept the safeguarded
            // Newton step only while it still reduces the gradient.
            let yt = y + dy * tau;
            if let Some(o) = objective(bar, xi, xj, &yt, true) {
                if o.grad.norm() < gnorm {
                    accepted = Some((yt, o));
                }
            }
        } else {
            for _ in 0..64 {
                let yt = y + dy * tau;
                if let Some(o) = objective(bar, xi, xj, &yt, true) {
                    if o.value <= obj.value + ARMIJO_C * tau * slope {
                        accepted = Some((yt, o));
                        break;
                    }
                }
                tau *= 0.5;
            }
        }
        match accepted {
            Some((yt, o)) if yt != y => {
                y = yt;
                obj = o;
            }
            // No representable progress left: the iterate is optimal to rounding.
            _ => return Ok((y, it, gnorm)),
        }
    }
    let scale = obj.value.abs().max(1.0);
    let gnorm = obj.grad.norm();
    if gnorm <= GRAD_TOL * scale {
        Ok((y, MAX_NEWTON_ITERS, gnorm))
    } else {
        Err(PairError::MaxIterations { iterations: MAX_NEWTON_ITERS, residual: gnorm })
    }
}

fn centered(ti: &[Vec3; 3], tj: &[Vec3; 3]) -> (Vec3, [Vec3; 3], [Vec3; 3]) {
    let c = (mean3(ti) + mean3(tj)) * 0.5;
    (c, ti.map(|v| v - c), tj.map(|v| v - c))
}

/// Minimizing plane for the reciprocal barrier.
pub fn solve_separating_plane(ti: &[Vec3; 3], tj: &[Vec3; 3]) -> Result<SeparatingPlane, PairError> {
    let (c, xi, xj) = centered(ti, tj);
    let y0 = initial_plane(&xi, &xj)?;
    let (y, iters, residual) = newton(&Reciprocal, &xi, &xj, y0, false)?;
    let n = Vec3::new(y[0], y[1], y[2]);
    Ok(SeparatingPlane { n, d: y[3] - c.dot(&n), newton_iters: iters, residual })
}

/// Inner objective at a given world-frame plane (for stationarity checks).
pub fn plane_objective(ti: &[Vec3; 3], tj: &[Vec3; 3], n: &Vec3, d: f64) -> f64 {
    let y = Vector4::new(n.x, n.y, n.z, d);
    objective(&Reciprocal, ti, tj, &y, false).map_or(f64::INFINITY, |o| o.value)
}

/// Exact pair potential with envelope-theorem gradient and IFT Hessian.
pub fn pair_potential(ti: &[Vec3; 3], tj: &[Vec3; 3], want_hess: bool) -> Result<PairSolution, PairError> {
    let (c, xi, xj) = centered(ti, tj);
    let y0 = initial_plane(&xi, &xj)?;
    let (y, iters, residual) = newton(&Reciprocal, &xi, &xj, y0, false)?;
    Ok(differentiate(&Reciprocal, &c, &xi, &xj, &y, iters, residual, want_hess, false))
}

/// Pair potential under the clamped log barrier with support `delta`.
///
/// Returns an exact zero without solving when the triangles' bounding spheres
/// are at least `2δ/(1−δ)` apart: a plane with `‖n‖ = 1−δ` then keeps every
/// argument at or above `δ`.
pub fn clamped_pair_potential(ti: &[Vec3; 3], tj: &[Vec3; 3], delta: f64, want_hess: bool) -> Result<PairSolution, PairError> {
    let (c, xi, xj) = centered(ti, tj);
    let ci = mean3(&xi);
    let cj = mean3(&xj);
    let ri = xi.iter().map(|v| (v - ci).norm()).fold(0.0, f64::max);
    let rj = xj.iter().map(|v| (v - cj).norm()).fold(0.0, f64::max);
    if (ci - cj).norm() - ri - rj >= 2.0 * delta / (1.0 - delta) {
        let dc = (ci - cj).normalize() * (1.0 - delta);
        return Ok(PairSolution {
            plane: SeparatingPlane { n: dc, d: -c.dot(&dc), newton_iters: 0, residual: 0.0 },
            value: 0.0,
            slacks: [f64::INFINITY; 6],
            grad: Vec18::zeros(),
            hess: Mat18::zeros(),
            plane_jacobian: PlaneJacobian::zeros(),
        });
    }
    let bar = ClampedLog { delta };
    let y0 = initial_plane(&xi, &xj)?;
    let (y_start, _, _) = newton(&Reciprocal, &xi, &xj, y0, false)?;
    let (y, iters, residual) = newton(&bar, &xi, &xj, y_start, true)?;
    Ok(differentiate(&bar, &c, &xi, &xj, &y, iters, residual, want_hess, true))
}

#[allow(clippy::too_many_arguments)]
fn differentiate<B: Barrier>(
    bar: &B,
    c: &Vec3,
    xi: &[Vec3; 3],
    xj: &[Vec3; 3],
    y: &Vector4<f64>,
    iters: usize,
    residual: f64,
    want_hess: bool,
    regularize: bool,
) -> PairSolution {
    let n = Vec3::new(y[0], y[1], y[2]);
    let obj = objective(bar, xi, xj, y, want_hess).expect("optimum is feasible");
    let mut grad = Vec18::zeros();
    let mut lxx = Mat18::zeros();
    let mut lpx = PlaneJacobian::zeros();
    let mut slacks = [0.0; 6];
    let nn = n * n.transpose();
    for (side, (pts, sign)) in [(xi, 1.0), (xj, -1.0)].into_iter().enumerate() {
        for (k, x) in pts.iter().enumerate() {
            let idx = 3 * side + k;
            let a = Vector4::new(sign * x.x, sign * x.y, sign * x.z, sign);
            let s = a.dot(y);
            slacks[idx] = s;
            let (_, b1, b2) = bar.eval(s).expect("feasible");
            // ∂s/∂x = sign·n
            grad.fixed_rows_mut::<3>(3 * idx).copy_from(&(n * (sign * b1)));
            if want_hess {
                lxx.fixed_view_mut::<3, 3>(3 * idx, 3 * idx).copy_from(&(nn * b2));
                // ∂/∂p of sign·B'(s)·n  (3×4), stored transposed.
                let mut block = SMatrix::<f64, 4, 3>::zeros();
                block += a * n.transpose() * (sign * b2);
                for r in 0..3 {
                    block[(r, r)] += sign * b1;
                }
                lpx.fixed_view_mut::<4, 3>(0, 3 * idx).copy_from(&block);
            }
        }
    }
    let mut hess = Mat18::zeros();
    let mut plane_jacobian = PlaneJacobian::zeros();
    if want_hess {
        let (h, f) = if regularize { regularized(&obj) } else { (obj.hess, obj.factor) };
        let dpdx: PlaneJacobian = -solve_plane_system(&h, &f, &lpx).unwrap_or_else(PlaneJacobian::zeros);
        hess = lxx + lpx.transpose() * dpdx;
        hess = (hess + hess.transpose()) * 0.5;
        plane_jacobian = dpdx;
        // World-frame offset: d_w = d − ⟨c, n⟩ with the frame origin held fixed.
        let dn = dpdx.fixed_rows::<3>(0).into_owned();
        let row = dpdx.row(3) - c.transpose() * dn;
        plane_jacobian.set_row(3, &row);
    }
    PairSolution {
        plane: SeparatingPlane { n, d: y[3] - c.dot(&n), newton_iters: iters, residual },
        value: obj.value,
        slacks,
        grad,
        hess,
        plane_jacobian,
    }
}

/// Derivatives of the centered potential `12·(1 + D^{−1/2})²`, `D = ‖c_i − c_j‖`,
/// with respect to `(c_i, c_j)`. `None` for coincident centers.
#[derive(Clone, Copy, Debug)]
pub struct CenteredTerm {
    pub value: f64,
    pub grad: SVector<f64, 6>,
    pub hess: SMatrix<f64, 6, 6>,
}

pub fn centered_value(dist: f64) -> f64 {
    let t = 1.0 + dist.powf(-0.5);
    NORM_WEIGHT * t * t
}

pub fn centered_potential(ci: &Vec3, cj: &Vec3) -> Option<CenteredTerm> {
    let delta = ci - cj;
    let dist = delta.norm();
    if !(dist > 0.0) {
        return None;
    }
    let rs = dist.powf(-0.5);
    let f0 = NORM_WEIGHT * (1.0 + rs) * (1.0 + rs);
    let f1 = -NORM_WEIGHT * rs * rs * rs * (1.0 + rs);
    let f2 = 1.5 * NORM_WEIGHT * rs.powi(5) * (1.0 + rs) + 0.5 * NORM_WEIGHT * rs.powi(6);
    let u = delta / dist;
    let g = u * f1;
    let uu = u * u.transpose();
    let h = uu * f2 + (Matrix3::identity() - uu) * (f1 / dist);
    let mut grad = SVector::<f64, 6>::zeros();
    grad.fixed_rows_mut::<3>(0).copy_from(&g);
    grad.fixed_rows_mut::<3>(3).copy_from(&(-g));
    let mut hess = SMatrix::<f64, 6, 6>::zeros();
    hess.fixed_view_mut::<3, 3>(0, 0).copy_from(&h);
    hess.fixed_view_mut::<3, 3>(3, 3).copy_from(&h);
    hess.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-h));
    hess.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-h));
    Some(CenteredTerm { value: f0, grad, hess })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_triangle(rng: &mut impl Rng, center: Vec3, size: f64) -> [Vec3; 3] {
        [0, 1, 2].map(|_| center + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * size)
    }

    /// Random pair with a clear gap, both triangles well shaped.
    fn random_pair(rng: &mut impl Rng) -> ([Vec3; 3], [Vec3; 3]) {
        loop {
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if dir.norm() < 0.1 {
                continue;
            }
            let sep = rng.gen_range(0.8..2.5);
            let ti = random_triangle(rng, dir.normalize() * sep * 0.5, 0.5);
            let tj = random_triangle(rng, -dir.normalize() * sep * 0.5, 0.5);
            let ok = |t: &[Vec3; 3]| crate::geometry::triangle_area(&t[0], &t[1], &t[2]) > 0.05;
            if ok(&ti) && ok(&tj) && triangle_distance(&ti, &tj).distance > 0.05 {
                return (ti, tj);
            }
        }
    }

    fn flatten(ti: &[Vec3; 3], tj: &[Vec3; 3]) -> Vec18 {
        let mut x = Vec18::zeros();
        for (k, v) in ti.iter().chain(tj).enumerate() {
            x.fixed_rows_mut::<3>(3 * k).copy_from(v);
        }
        x
    }

    fn unflatten(x: &Vec18) -> ([Vec3; 3], [Vec3; 3]) {
        let p = |k: usize| Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
        ([p(0), p(1), p(2)], [p(3), p(4), p(5)])
    }

    #[test]
    fn mirrored_triangles_give_the_midplane() {
        let ti = [Vec3::new(0.0, 0.0, 0.5), Vec3::new(1.0, 0.0, 0.5), Vec3::new(0.0, 1.0, 0.5)];
        let tj = ti.map(|v| Vec3::new(v.x, v.y, -v.z));
        let p = solve_separating_plane(&ti, &tj).unwrap();
        assert!(p.n.x.abs() < 1e-12 && p.n.y.abs() < 1e-12);
        assert!(p.n.z > 0.0 && p.n.z < 1.0);
        assert!(p.d.abs() < 1e-12);
    }

    #[test]
    fn touching_triangles_are_not_separable() {
        let ti = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let tj = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.3), Vec3::new(0.0, -1.0, 0.2)];
        assert!(matches!(solve_separating_plane(&ti, &tj), Err(PairError::NotSeparable { .. })));
        assert!(pair_potential(&ti, &tj, true).is_err());
    }

    #[test]
    fn optimum_is_stationary_and_strictly_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (ti, tj) = random_pair(&mut rng);
            let s = pair_potential(&ti, &tj, false).unwrap();
            let m = s.plane.n.norm();
            assert!(m > 0.0 && m < 1.0);
            assert!(s.slacks.iter().all(|&v| v > 0.0));
            assert!(s.plane.residual <= GRAD_TOL * s.value.max(1.0));
            assert!((plane_objective(&ti, &tj, &s.plane.n, s.plane.d) - s.value).abs() < 1e-12 * s.value);
        }
    }

    #[test]
    fn square_root_factor_reproduces_the_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (ti, tj) = random_pair(&mut rng);
            let s = pair_potential(&ti, &tj, false).unwrap();
            let (c, xi, xj) = centered(&ti, &tj);
            let y = Vector4::new(s.plane.n.x, s.plane.n.y, s.plane.n.z, s.plane.d + s.plane.n.dot(&c));
            let obj = objective(&Reciprocal, &xi, &xj, &y, true).unwrap();
            let ftf = obj.factor.transpose() * obj.factor;
            assert!((ftf - obj.hess).norm() <= 1e-10 * obj.hess.norm());
            let (h, f) = regularized(&obj);
            assert!((f.transpose() * f - h).norm() <= 1e-10 * h.norm());
            let rhs = Vector4::new(1.0, -2.0, 0.5, 3.0);
            let z = solve_plane_system(&h, &f, &rhs).unwrap();
            assert!((h * z - rhs).norm() <= 1e-8 * rhs.norm());
        }
    }

    /// Independent oracle: coarse grid over the plane parameters refined by
    /// coordinate descent must not beat the Newton optimum.
    #[test]
    fn newton_optimum_beats_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let (ti, tj) = random_pair(&mut rng);
            let sol = solve_separating_plane(&ti, &tj).unwrap();
            let best_newton = plane_objective(&ti, &tj, &sol.n, sol.d);
            let mut best = (f64::INFINITY, [0.0; 4]);
            let steps = 13;
            for a in 0..steps {
                for b in 0..steps {
                    for c in 0..steps {
                        for e in 0..steps {
                            let g = |i: usize, lo: f64, hi: f64| lo + (hi - lo) * i as f64 / (steps - 1) as f64;
                            let p = [g(a, -0.9, 0.9), g(b, -0.9, 0.9), g(c, -0.9, 0.9), g(e, -1.5, 1.5)];
                            let v = plane_objective(&ti, &tj, &Vec3::new(p[0], p[1], p[2]), p[3]);
                            if v < best.0 {
                                best = (v, p);
                            }
                        }
                    }
                }
            }
            assert!(best.0.is_finite());
            let (mut v, mut p) = best;
            let mut h = 0.05;
            while h > 1e-9 {
                let mut improved = false;
                for k in 0..4 {
                    for sgn in [-1.0, 1.0] {
                        let mut q = p;
                        q[k] += sgn * h;
                        let w = plane_objective(&ti, &tj, &Vec3::new(q[0], q[1], q[2]), q[3]);
                        if w < v {
                            v = w;
                            p = q;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    h *= 0.5;
                }
            }
            assert!(best_newton <= v + 1e-9 * v, "{best_newton} vs {v}");
            assert!((best_newton - v).abs() < 1e-6 * v);
            assert!((Vec3::new(p[0], p[1], p[2]) - sol.n).norm() < 1e-3);
        }
    }

    #[test]
    fn perturbing_the_plane_changes_l_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ti, tj) = random_pair(&mut rng);
        let sol = solve_separating_plane(&ti, &tj).unwrap();
        let l0 = plane_objective(&ti, &tj, &sol.n, sol.d);
        let dir = Vec3::new(0.3, -0.5, 0.2);
        let dl = |e: f64| plane_objective(&ti, &tj, &(sol.n + dir * e), sol.d + 0.4 * e) - l0;
        let (a, b) = (dl(1e-3), dl(5e-4));
        assert!(a > 0.0 && b > 0.0);
        assert!((a / b - 4.0).abs() < 0.05, "ratio {}", a / b);
    }

    #[test]
    fn force_formula_and_witnesses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (ti, tj) = random_pair(&mut rng);
            let s = pair_potential(&ti, &tj, false).unwrap();
            let (n, d) = (s.plane.n, s.plane.d);
            for k in 0..3 {
                let f = s.force(k);
                let expect = n / (ti[k].dot(&n) + d).powi(2);
                assert!((f - expect).norm() <= 1e-8 * expect.norm());
                let fj = s.force(3 + k);
                let expect_j = -n / (-tj[k].dot(&n) - d).powi(2);
                assert!((fj - expect_j).norm() <= 1e-8 * expect_j.norm());
            }
            let w = s.witnesses(&ti, &tj);
            assert!(w.alpha > 0.0);
            assert!((n - (w.a - w.b) * w.alpha).norm() < 1e-8 * n.norm());
            for k in 0..3 {
                assert!(s.force(k).dot(&(w.a - w.b)) > 0.0);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..20 {
            let (ti, tj) = random_pair(&mut rng);
            let x = flatten(&ti, &tj);
            let s = pair_potential(&ti, &tj, true).unwrap();
            let at = |x: &Vec18| {
                let (a, b) = unflatten(x);
                pair_potential(&a, &b, true).unwrap()
            };
            let gscale = s.grad.amax();
            let hscale = s.hess.amax();
            for k in 0..18 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let (sp, sm) = (at(&xp), at(&xm));
                let fd = (sp.value - sm.value) / (2.0 * h);
                assert!((fd - s.grad[k]).abs() < 1e-5 * gscale, "grad {k}");
                let fdh = (sp.grad - sm.grad) / (2.0 * h);
                assert!((fdh - s.hess.column(k)).amax() < 1e-4 * hscale, "hess {k}");
                let pj = |q: &PairSolution| Vector4::new(q.plane.n.x, q.plane.n.y, q.plane.n.z, q.plane.d);
                let fdp = (pj(&sp) - pj(&sm)) / (2.0 * h);
                assert!((fdp - s.plane_jacobian.column(k)).amax() < 1e-5 * (1.0 + s.plane_jacobian.amax()), "dp/dx {k}");
            }
            assert!((s.hess - s.hess.transpose()).amax() <= 1e-9 * hscale);
        }
    }

    #[test]
    fn value_grows_without_bound_toward_contact() {
        let ti = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let at = |gap: f64| {
            let tj = [Vec3::new(0.2, 0.2, -gap), Vec3::new(1.0, 0.3, -1.0), Vec3::new(0.3, 1.0, -1.0)];
            pair_potential(&ti, &tj, false).unwrap().value
        };
        let mut prev = 0.0;
        for e in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
            let v = at(e);
            assert!(v.is_finite() && v > prev);
            prev = v;
        }
        // Vertex–face approach: P·g tends to a positive constant from above,
        // so each decade multiplies P by a factor rising toward 10.
        let r1 = at(1e-5) / at(1e-4);
        let r2 = at(1e-7) / at(1e-6);
        assert!(r1 > 9.0 && r2 > r1 && r2 < 10.0, "{r1} {r2}");
    }

    #[test]
    fn centered_examples() {
        assert!((centered_value(1.0) - 48.0).abs() < 1e-12);
        assert!((centered_value(4.0) - 27.0).abs() < 1e-12);
        let ci = Vec3::new(1.0, 2.0, 0.5);
        let cj = Vec3::new(-0.5, 0.0, 1.0);
        let t = centered_potential(&ci, &cj).unwrap();
        let delta = ci - cj;
        let dist = delta.norm();
        let count = 3.0;
        let per_vertex = -t.grad.fixed_rows::<3>(0) / count;
        let expect = delta * 12.0 / (count * dist.powf(2.5)) * (1.0 + dist.powf(-0.5));
        assert!((per_vertex - expect).norm() < 1e-12 * expect.norm());
        assert!(centered_potential(&ci, &ci).is_none());
    }

    #[test]
    fn centered_derivatives_match_finite_differences() {
        let ci = Vec3::new(0.3, -0.2, 1.1);
        let cj = Vec3::new(-0.4, 0.5, 0.2);
        let t = centered_potential(&ci, &cj).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let bump = |e: f64| {
                let (mut a, mut b) = (ci, cj);
                if k < 3 { a[k] += e } else { b[k - 3] += e }
                centered_potential(&a, &b).unwrap()
            };
            let (p, m) = (bump(h), bump(-h));
            assert!(((p.value - m.value) / (2.0 * h) - t.grad[k]).abs() < 1e-7);
            assert!(((p.grad - m.grad) / (2.0 * h) - t.hess.column(k)).amax() < 1e-6);
        }
    }

    /// Exact pair potential approaches the centered closed form for tiny
    /// triangles far apart (the centered form is the point-pair limit).
    #[test]
    fn centered_form_is_the_far_limit() {
        let size = 1e-4;
        let ti = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(size, 0.0, 0.0), Vec3::new(0.0, size, 0.0)].map(|v| v + Vec3::new(0.0, 0.0, 2.0));
        let tj = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(size, 0.0, 0.0), Vec3::new(0.0, 0.0, size)];
        let exact = pair_potential(&ti, &tj, false).unwrap().value;
        // Six unit barrier terms at distance D: the closed form for 3+3 points.
        let d: f64 = 2.0;
        let point_pair = |dist: f64| {
            // min over m of 12/(1−m) + 12/(m·dist)
            let m = 1.0 / (1.0 + dist.sqrt());
            12.0 / (1.0 - m) + 12.0 / (m * dist)
        };
        assert!((exact - point_pair(d)).abs() < 1e-3 * exact);
        assert!((point_pair(d) - centered_value(d)).abs() < 1e-12 * exact);
    }

    #[test]
    fn clamped_barrier_is_c2_at_delta_and_zero_far() {
        let b = ClampedLog { delta: 0.01 };
        let (v0, v1, v2) = b.eval(0.01 - 1e-12).unwrap();
        assert!(v0.abs() < 1e-20 && v1.abs() < 1e-9 && v2.abs() < 1e-8);
        let ti = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let tj = ti.map(|v| v + Vec3::new(0.0, 0.0, -1000.0));
        let far = clamped_pair_potential(&ti, &tj, 0.01, true).unwrap();
        assert_eq!(far.value, 0.0);
        assert_eq!(far.grad.amax(), 0.0);
        let near_j = ti.map(|v| Vec3::new(v.x, v.y, -v.z) + Vec3::new(0.0, 0.0, -0.004));
        let near = clamped_pair_potential(&ti, &near_j, 0.01, true).unwrap();
        assert!(near.value > 0.0 && near.grad.amax() > 0.0);
    }
}
