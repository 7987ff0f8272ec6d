//! Optimization-based time stepping in rigid generalized coordinates.
//!
//! One step minimizes
//!
//! `L(q) = ½‖q − 2q^t + q^{t−1}‖²_M / δt² − Σ m·g·(t_b − t_b^t) + μP(q) + D(q; q^t) + PD(q)`
//!
//! with `PD = Σ k_p‖q_c − q_c*‖² + k_d‖q_c − q_c^t‖²/δt` over controlled
//! coordinates. Newton directions use a PSD-projected Hessian. Each line
//! search starts from a conservative-advancement bound, so no body can pass
//! through another between iterates, and trial states with an infinite
//! potential are rejected. Step Jacobians come from the implicit function
//! theorem with the exact Hessian.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::bsh::InteractionCounts;
use crate::contact::ContactModel;
use crate::eval::{BodyChart, Derivs, PotentialEval};
use crate::friction::{FrictionError, FrictionModel, FrictionParams};
use crate::geometry::{Pose, SystemState, TriMeshBody, Vec3};

/// Fraction of each pair's distance a line-search step may consume.
const SAFETY: f64 = 0.9;
/// Conservative-advancement rounds per line search, and the relative gain
/// below which advancing stops.
const MAX_ADVANCE_ROUNDS: usize = 50;
const ADVANCE_STALL: f64 = 1e-2;
pub const DEFAULT_NEWTON_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_NEWTON: usize = 100;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Error)]
pub enum StepError {
    #[error("potential is infinite at the warm start (frame {frame})")]
    InfeasibleStart { frame: usize },
    #[error("Newton stagnated after {iterations} iterations (gradient norm {residual:.3e})")]
    Stagnation { iterations: usize, residual: f64 },
    #[error("step Hessian is singular (smallest eigenvalue {min_eigenvalue:.3e})")]
    SingularHessian { min_eigenvalue: f64 },
    #[error(transparent)]
    Friction(#[from] FrictionError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub dt: f64,
    pub mu: f64,
    pub gravity: Vec3,
    pub friction: Option<FrictionParams>,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl StepParams {
    pub fn new(dt: f64, mu: f64) -> Self {
        Self { dt, mu, gravity: Vec3::zeros(), friction: None, newton_tol: DEFAULT_NEWTON_TOL, max_newton: DEFAULT_MAX_NEWTON }
    }
}

/// PD tracking of selected coordinates (`0..6` within the body) of one body.
#[derive(Clone, Debug, PartialEq)]
pub struct PdControl {
    pub body: usize,
    pub coords: Vec<usize>,
    pub kp: f64,
    pub kd: f64,
}

/// Rigid generalized coordinates of the free bodies, six per body.
#[derive(Clone, Debug)]
pub struct DofMap {
    base: Vec<Option<usize>>,
    n: usize,
}

impl DofMap {
    pub fn new(bodies: &[TriMeshBody]) -> Self {
        let mut n = 0;
        let base = bodies
            .iter()
            .map(|b| {
                if b.fixed {
                    None
                } else {
                    n += 6;
                    Some(n - 6)
                }
            })
            .collect();
        Self { base, n }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn base(&self, body: usize) -> Option<usize> {
        self.base[body]
    }

    pub fn pack(&self, poses: &[Pose]) -> DVector<f64> {
        let mut q = DVector::zeros(self.n);
        for (b, p) in poses.iter().enumerate() {
            if let Some(o) = self.base[b] {
                q.rows_mut(o, 6).copy_from_slice(&p.to_array());
            }
        }
        q
    }

    /// Poses from `q`, taking fixed bodies from `template`.
    pub fn unpack(&self, q: &DVector<f64>, template: &[Pose]) -> Vec<Pose> {
        template
            .iter()
            .enumerate()
            .map(|(b, p)| match self.base[b] {
                Some(o) => Pose::from_slice(&q.as_slice()[o..o + 6]),
                None => *p,
            })
            .collect()
    }

    /// Constant generalized mass: `m·I` for translation and the body-frame
    /// inertia for rotation.
    pub fn mass_matrix(&self, bodies: &[TriMeshBody]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (b, body) in bodies.iter().enumerate() {
            if let Some(o) = self.base[b] {
                for k in 0..3 {
                    m[(o + k, o + k)] = body.mass;
                }
                m.view_mut((o + 3, o + 3), (3, 3)).copy_from(&body.inertia);
            }
        }
        m
    }

    /// Dof indices of the controlled coordinates, in control order.
    pub fn control_dofs(&self, controls: &[PdControl]) -> Vec<(usize, f64, f64)> {
        controls
            .iter()
            .flat_map(|c| {
                let base = self.base[c.body].expect("controlled body must be free");
                c.coords.iter().map(move |&k| (base + k, c.kp, c.kd))
            })
            .collect()
    }
}

/// Inputs of one step.
#[derive(Clone, Copy)]
pub struct StepProblem<'a> {
    pub bodies: &'a [TriMeshBody],
    pub model: &'a ContactModel,
    pub params: &'a StepParams,
    pub controls: &'a [PdControl],
    /// One target per controlled coordinate.
    pub targets: &'a [f64],
    /// Poses at `t` and `t−1`.
    pub current: &'a [Pose],
    pub previous: &'a [Pose],
    pub frame: usize,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub poses: Vec<Pose>,
    pub q: DVector<f64>,
    /// `∂q^{t+1}/∂q^t`.
    pub jac_current: DMatrix<f64>,
    /// `∂q^{t+1}/∂q^{t−1}`.
    pub jac_previous: DMatrix<f64>,
    /// `∂q^{t+1}/∂u` over the control targets.
    pub jac_control: DMatrix<f64>,
    pub newton_iters: usize,
    pub lagrangian: f64,
    /// `L` at the warm start and after every accepted iteration.
    pub lagrangian_history: Vec<f64>,
    pub gradient_norm: f64,
    pub potential: f64,
    pub counts: InteractionCounts,
    pub eval_seconds: f64,
}

struct Objective<'a> {
    p: StepProblem<'a>,
    dofs: DofMap,
    mass: DMatrix<f64>,
    q_hat: DVector<f64>,
    q_cur: DVector<f64>,
    ctrl: Vec<(usize, f64, f64)>,
    friction: Option<FrictionModel>,
}

struct ObjectiveEval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    contact_hess: DMatrix<f64>,
    potential: f64,
    counts: InteractionCounts,
    seconds: f64,
}

impl Objective<'_> {
    fn state(&self, q: &DVector<f64>) -> SystemState {
        SystemState::new(self.p.bodies, self.dofs.unpack(q, self.p.current), self.p.frame + 1)
    }

    /// Largest fraction (at most 1) of `dir` along which every body pair
    /// keeps a tenth of its current distance. On the straight path in
    /// exponential coordinates, points of bodies `a` and `b` move relative to
    /// each other by at most `m = ‖Δt_a − Δt_b‖ + R_a‖Δθ_a‖ + R_b‖Δθ_b‖` per
    /// unit fraction, so from any fraction `t` the path is clear for another
    /// `(d(t) − keep)/m`. Advancing repeatedly lets tangential motion at small
    /// gaps proceed without a bound on the whole step.
    fn safe_fraction(&self, q: &DVector<f64>, dir: &DVector<f64>) -> f64 {
        let bodies = self.p.bodies;
        let (shift, spin): (Vec<Vec3>, Vec<f64>) = (0..bodies.len())
            .map(|b| match self.dofs.base(b) {
                Some(o) => (Vec3::new(dir[o], dir[o + 1], dir[o + 2]), bodies[b].rest_radius() * dir.rows(o + 3, 3).norm()),
                None => (Vec3::zeros(), 0.0),
            })
            .unzip();
        let trees = self.p.model.trees();
        let pairs: Vec<(usize, usize, f64)> = crate::bsh::body_pairs(bodies.len())
            .into_iter()
            .map(|(a, b)| (a, b, (shift[a] - shift[b]).norm() + spin[a] + spin[b]))
            .filter(|&(_, _, m)| m > 0.0)
            .collect();
        let mut keep: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut t = 0.0f64;
        for round in 0..MAX_ADVANCE_ROUNDS {
            let state = self.state(&(q + dir * t));
            let mut advance = 1.0 - t;
            for (k, &(a, b, m)) in pairs.iter().enumerate() {
                // Distances beyond `enough` cannot limit this round; a lower bound suffices.
                let enough = if round == 0 { m * advance / SAFETY } else { keep[k] + m * advance };
                let d = crate::bsh::body_distance(bodies, &state, &trees[a], &trees[b], enough);
                if round == 0 {
                    keep.push((1.0 - SAFETY) * d);
                }
                advance = advance.min((d - keep[k]).max(0.0) / m);
            }
            t += advance;
            if t >= 1.0 || advance <= ADVANCE_STALL * t {
                break;
            }
        }
        t.min(1.0)
    }

    /// `None` when the contact potential is infinite.
    fn eval(&self, q: &DVector<f64>, derivs: Derivs) -> Option<ObjectiveEval> {
        let dt = self.p.params.dt;
        let n = self.dofs.len();
        let state = self.state(q);
        let chart = BodyChart::new(self.p.bodies, &state);
        let start = std::time::Instant::now();
        let contact = self.p.model.evaluate(self.p.bodies, &state, &chart, derivs);
        let seconds = start.elapsed().as_secs_f64();
        if contact.potential.infinite {
            return None;
        }
        let dq = q - &self.q_hat;
        let mdq = &self.mass * &dq;
        let mut value = 0.5 * dq.dot(&mdq) / (dt * dt);
        let mut grad = mdq / (dt * dt);
        let mut hess = if derivs.hess() { &self.mass / (dt * dt) } else { DMatrix::zeros(0, 0) };
        for (b, body) in self.p.bodies.iter().enumerate() {
            if let Some(o) = self.dofs.base(b) {
                let t = Vec3::new(q[o], q[o + 1], q[o + 2]);
                let t0 = Vec3::new(self.q_cur[o], self.q_cur[o + 1], self.q_cur[o + 2]);
                value -= body.mass * self.p.params.gravity.dot(&(t - t0));
                for k in 0..3 {
                    grad[o + k] -= body.mass * self.p.params.gravity[k];
                }
            }
        }
        for (i, &(dof, kp, kd)) in self.ctrl.iter().enumerate() {
            let e = q[dof] - self.p.targets[i];
            let v = q[dof] - self.q_cur[dof];
            value += kp * e * e + kd * v * v / dt;
            grad[dof] += 2.0 * kp * e + 2.0 * kd * v / dt;
            if derivs.hess() {
                hess[(dof, dof)] += 2.0 * kp + 2.0 * kd / dt;
            }
        }
        let mu = self.p.params.mu;
        let contact_value = contact.potential.value;
        let counts = contact.counts;
        let mut extra: Vec<PotentialEval> = vec![contact.potential.scaled(mu)];
        if let Some(f) = &self.friction {
            extra.push(f.dissipation(&state, &chart, derivs));
        }
        let mut contact_hess = DMatrix::zeros(0, 0);
        let total = PotentialEval::sum(derivs, extra.iter());
        value += total.value;
        grad += total.dense_grad(n);
        if derivs.hess() {
            contact_hess = total.dense_hess(n);
            hess += &contact_hess;
        }
        Some(ObjectiveEval { value, grad, hess, contact_hess, potential: contact_value, counts, seconds })
    }
}

/// Symmetric eigenvalue clamp at zero.
pub fn project_psd(h: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((h + h.transpose()) * 0.5).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// One implicit step with its sensitivities.
pub fn step(problem: StepProblem) -> Result<StepResult, StepError> {
    let params = problem.params;
    let dt = params.dt;
    let dofs = DofMap::new(problem.bodies);
    let n = dofs.len();
    let q_cur = dofs.pack(problem.current);
    let q_prev = dofs.pack(problem.previous);
    let q_hat = &q_cur * 2.0 - &q_prev;
    let mass = dofs.mass_matrix(problem.bodies);
    let ctrl = dofs.control_dofs(problem.controls);
    assert_eq!(ctrl.len(), problem.targets.len(), "one target per controlled coordinate");
    let prev_state = SystemState::new(problem.bodies, problem.current.to_vec(), problem.frame);
    let friction = match params.friction {
        Some(fp) if fp.lambda > 0.0 => Some(FrictionModel::lagged(problem.bodies, &prev_state, problem.model.trees(), fp, dt)?),
        _ => None,
    };
    let obj = Objective { p: problem, dofs, mass, q_hat, q_cur: q_cur.clone(), ctrl, friction };

    let mut q = q_cur.clone();
    let mut cur = obj.eval(&q, Derivs::Hessian).ok_or(StepError::InfeasibleStart { frame: problem.frame })?;
    let mut history = vec![cur.value];
    let mut eval_seconds = cur.seconds;
    let mut iters = 0;
    loop {
        let gnorm = cur.grad.norm();
        if gnorm <= params.newton_tol * cur.value.abs().max(1.0) {
            break;
        }
        if iters >= params.max_newton {
            return Err(StepError::Stagnation { iterations: iters, residual: gnorm });
        }
        let contact_part = project_psd(&cur.contact_hess);
        let h = &cur.hess - &cur.contact_hess + contact_part;
        let dir = match h.clone().cholesky() {
            Some(ch) => -ch.solve(&cur.grad),
            None => {
                let shift = 1e-12 * (1.0 + h.diagonal().amax());
                match (h + DMatrix::identity(n, n) * shift).cholesky() {
                    Some(ch) => -ch.solve(&cur.grad),
                    None => -&cur.grad,
                }
            }
        };
        let slope = cur.grad.dot(&dir);
        let alpha_safe = obj.safe_fraction(&q, &dir);
        let mut alpha = alpha_safe;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = &q + &dir * alpha;
            if let Some(e) = obj.eval(&trial, Derivs::Value) {
                eval_seconds += e.seconds;
                if e.value < cur.value && e.value <= cur.value + ARMIJO_C * alpha * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        iters += 1;
        let Some(next) = accepted else {
            // No representable decrease along a descent direction: L is at
            // its rounding floor. Keep taking the step while it still
            // shrinks the gradient, then stop.
            if slope.abs() <= 1e-10 * cur.value.abs().max(1.0) {
                let trial = &q + &dir * alpha_safe;
                match obj.eval(&trial, Derivs::Gradient) {
                    Some(e) if e.grad.norm() < 0.5 * gnorm => {
                        eval_seconds += e.seconds;
                        q = trial;
                        cur = obj.eval(&q, Derivs::Hessian).expect("accepted iterate is feasible");
                        eval_seconds += cur.seconds;
                        history.push(cur.value);
                        continue;
                    }
                    _ => break,
                }
            }
            return Err(StepError::Stagnation { iterations: iters, residual: gnorm });
        };
        q = next;
        cur = obj.eval(&q, Derivs::Hessian).expect("accepted iterate is feasible");
        eval_seconds += cur.seconds;
        history.push(cur.value);
    }

    // Implicit function theorem with the exact Hessian.
    let a = &cur.hess;
    let lu = a.clone().lu();
    let singular = || StepError::SingularHessian { min_eigenvalue: min_eigenvalue(a) };
    let inv_dt2 = 1.0 / (dt * dt);
    let mut b_cur = &obj.mass * (-2.0 * inv_dt2);
    for &(dof, _, kd) in &obj.ctrl {
        b_cur[(dof, dof)] -= 2.0 * kd / dt;
    }
    if let Some(f) = &obj.friction {
        let next_state = obj.state(&q);
        let chart_next = BodyChart::new(problem.bodies, &next_state);
        let chart_prev = BodyChart::new(problem.bodies, &prev_state);
        b_cur += f.mixed_hessian(&next_state, &prev_state, &chart_next, &chart_prev);
    }
    let b_prev = &obj.mass * inv_dt2;
    let mut b_ctrl = DMatrix::zeros(n, obj.ctrl.len());
    for (i, &(dof, kp, _)) in obj.ctrl.iter().enumerate() {
        b_ctrl[(dof, i)] = -2.0 * kp;
    }
    let jac_current = -lu.solve(&b_cur).ok_or_else(singular)?;
    let jac_previous = -lu.solve(&b_prev).ok_or_else(singular)?;
    let jac_control = -lu.solve(&b_ctrl).ok_or_else(singular)?;

    Ok(StepResult {
        poses: obj.dofs.unpack(&q, problem.current),
        q,
        jac_current,
        jac_previous,
        jac_control,
        newton_iters: iters,
        lagrangian: cur.value,
        lagrangian_history: history,
        gradient_norm: cur.grad.norm(),
        potential: cur.potential,
        counts: cur.counts,
        eval_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsh::DEFAULT_EPSILON;
    use crate::contact::Backend;
    use crate::geometry::primitives;

    fn lone_cube() -> Vec<TriMeshBody> {
        vec![primitives::cube(0.5, 2.0).unwrap().with_pose(Pose::new(Vec3::new(0.1, -0.2, 0.3), Vec3::new(0.2, 0.0, 0.1)))]
    }

    fn solve(bodies: &[TriMeshBody], params: &StepParams, controls: &[PdControl], targets: &[f64], previous: &[Pose]) -> Result<StepResult, StepError> {
        let model = ContactModel::new(bodies, Backend::Bsh, DEFAULT_EPSILON).unwrap();
        let current: Vec<Pose> = bodies.iter().map(|b| b.pose).collect();
        step(StepProblem { bodies, model: &model, params, controls, targets, current: &current, previous, frame: 0 })
    }

    fn shifted(p: &Pose, d: [f64; 6]) -> Pose {
        let a = p.to_array();
        Pose::from_slice(&std::array::from_fn::<f64, 6, _>(|k| a[k] + d[k]))
    }

    #[test]
    fn free_flight_extrapolates_linearly() {
        let bodies = lone_cube();
        let v = [0.3, 0.0, -0.1, 0.0, 0.05, 0.0];
        let prev = vec![shifted(&bodies[0].pose, v.map(|x| -x))];
        let r = solve(&bodies, &StepParams::new(0.04, 1e-6), &[], &[], &prev).unwrap();
        let expect = shifted(&bodies[0].pose, v).to_array();
        for k in 0..6 {
            assert!((r.q[k] - expect[k]).abs() < 1e-9, "dof {k}: {} vs {}", r.q[k], expect[k]);
        }
        assert!((&r.jac_current - DMatrix::identity(6, 6) * 2.0).amax() < 1e-8);
        assert!((&r.jac_previous + DMatrix::identity(6, 6)).amax() < 1e-8);
        assert_eq!(r.jac_control.ncols(), 0);
    }

    #[test]
    fn gravity_adds_g_dt_squared() {
        let bodies = lone_cube();
        let mut params = StepParams::new(0.05, 1e-6);
        params.gravity = Vec3::new(0.0, 0.0, -9.8);
        let r = solve(&bodies, &params, &[], &[], &[bodies[0].pose]).unwrap();
        let dz = r.poses[0].translation.z - bodies[0].pose.translation.z;
        assert!((dz + 9.8 * 0.05 * 0.05).abs() < 1e-9, "dz = {dz}");
        assert!((r.poses[0].rotation - bodies[0].pose.rotation).norm() < 1e-9);
    }

    #[test]
    fn pd_control_pulls_toward_the_target_with_a_consistent_jacobian() {
        let bodies = lone_cube();
        let controls = [PdControl { body: 0, coords: vec![0], kp: 20.0, kd: 1.0 }];
        let params = StepParams::new(0.04, 1e-6);
        let x0 = bodies[0].pose.translation.x;
        let at = |u: f64| solve(&bodies, &params, &controls, &[u], &[bodies[0].pose]).unwrap();
        let r = at(x0 + 1.0);
        assert!(r.q[0] > x0, "moves toward the target");
        let h = 1e-5;
        let fd = (at(x0 + 1.0 + h).q[0] - at(x0 + 1.0 - h).q[0]) / (2.0 * h);
        assert!((fd - r.jac_control[(0, 0)]).abs() < 1e-6, "{fd} vs {}", r.jac_control[(0, 0)]);
    }

    #[test]
    fn fixed_bodies_have_no_dofs_and_overlap_is_rejected() {
        let plate = primitives::cube(1.0, 1.0).unwrap().with_fixed(true).with_pose(Pose::identity());
        let straddling = primitives::cube(0.5, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(0.5, 0.1, 0.05)));
        let bodies = vec![plate, straddling];
        let dofs = DofMap::new(&bodies);
        assert_eq!((dofs.len(), dofs.base(0), dofs.base(1)), (6, None, Some(0)));
        let poses: Vec<Pose> = bodies.iter().map(|b| b.pose).collect();
        assert_eq!(dofs.unpack(&dofs.pack(&poses), &poses), poses);
        let err = solve(&bodies, &StepParams::new(0.04, 1e-6), &[], &[], &poses).unwrap_err();
        assert!(matches!(err, StepError::InfeasibleStart { frame: 0 }), "{err}");
    }

    #[test]
    fn psd_projection_clamps_negative_eigenvalues() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = project_psd(&h);
        assert!(min_eigenvalue(&p) > -1e-12);
        let expect = DMatrix::from_row_slice(2, 2, &[1.5, 1.5, 1.5, 1.5]);
        assert!((p - expect).amax() < 1e-12);
    }
}
