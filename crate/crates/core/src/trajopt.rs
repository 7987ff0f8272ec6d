//! Rollouts, hinge losses on final positions, reverse-mode trajectory
//! gradients through the step Jacobians, and Adam.

use std::time::Instant;

use nalgebra::DVector;
use thiserror::Error;

use crate::contact::ContactModel;
use crate::geometry::{Pose, TriMeshBody, Vec3};
use crate::stepper::{step, DofMap, PdControl, StepError, StepParams, StepProblem, StepResult};

pub const DEFAULT_EPS_TARGET: f64 = 0.05;
const MAX_FEASIBILITY_HALVINGS: usize = 30;
/// Consecutive fallbacks to the previous iterate after which Adam stops: the
/// update points out of the feasible set at every scale tried.
const MAX_PINNED_ITERATIONS: usize = 3;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("step {frame} failed: {source}")]
    Step { frame: usize, source: StepError },
    #[error("decision vector has length {got}, expected {expected}")]
    DecisionLength { got: usize, expected: usize },
}

/// Bodies, contact model and stepping parameters shared by all rollouts.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub bodies: Vec<TriMeshBody>,
    pub model: ContactModel,
    pub params: StepParams,
    pub controls: Vec<PdControl>,
    /// Generalized velocity per body at frame 0 (zero for fixed bodies).
    pub velocities: Vec<[f64; 6]>,
    pub horizon: usize,
}

impl Scenario {
    pub fn initial_poses(&self) -> Vec<Pose> {
        self.bodies.iter().map(|b| b.pose).collect()
    }
}

/// What the decision vector parameterizes.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    /// `[x, y, v_x, v_y]` of one body at frame 0.
    InitialPlanar { body: usize },
    /// One PD target vector per step, concatenated.
    PdTargets,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub body: usize,
    pub position: Vec3,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub scenario: Scenario,
    pub decision: Decision,
    pub targets: Vec<Target>,
    pub eps_target: f64,
    /// Accumulate the hinge over every frame instead of the last only.
    pub per_frame: bool,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Poses at frames `0..=H`.
    pub frames: Vec<Vec<Pose>>,
    /// Poses at frame `−1`.
    pub before: Vec<Pose>,
    pub steps: Vec<StepResult>,
    pub loss: f64,
}

impl Task {
    pub fn control_width(&self) -> usize {
        self.scenario.controls.iter().map(|c| c.coords.len()).sum()
    }

    pub fn decision_len(&self) -> usize {
        match self.decision {
            Decision::InitialPlanar { .. } => 4,
            Decision::PdTargets => self.scenario.horizon * self.control_width(),
        }
    }

    /// Decision vector that reproduces the scenario as configured.
    pub fn default_decision(&self) -> DVector<f64> {
        match self.decision {
            Decision::InitialPlanar { body } => {
                let p = self.scenario.bodies[body].pose.translation;
                let v = self.scenario.velocities[body];
                DVector::from_vec(vec![p.x, p.y, v[0], v[1]])
            }
            Decision::PdTargets => {
                let dofs = DofMap::new(&self.scenario.bodies);
                let q0 = dofs.pack(&self.scenario.initial_poses());
                let hold: Vec<f64> = dofs.control_dofs(&self.scenario.controls).iter().map(|&(d, _, _)| q0[d]).collect();
                DVector::from_iterator(self.decision_len(), (0..self.scenario.horizon).flat_map(|_| hold.iter().copied()))
            }
        }
    }

    /// Frame-0 and frame-(−1) poses for decision `u`.
    fn initial_state(&self, u: &DVector<f64>) -> (Vec<Pose>, Vec<Pose>) {
        let s = &self.scenario;
        let dt = s.params.dt;
        let mut q0 = s.initial_poses();
        if let Decision::InitialPlanar { body } = self.decision {
            q0[body].translation.x = u[0];
            q0[body].translation.y = u[1];
        }
        let before = q0
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let mut v = s.velocities[b];
                if let Decision::InitialPlanar { body } = self.decision {
                    if b == body {
                        v[0] = u[2];
                        v[1] = u[3];
                    }
                }
                let a = p.to_array();
                Pose::from_slice(&std::array::from_fn::<f64, 6, _>(|k| a[k] - v[k] * dt))
            })
            .collect();
        (q0, before)
    }

    fn step_targets<'u>(&self, u: &'u DVector<f64>, k: usize) -> &'u [f64] {
        match self.decision {
            Decision::PdTargets => {
                let w = self.control_width();
                &u.as_slice()[k * w..(k + 1) * w]
            }
            Decision::InitialPlanar { .. } => &[],
        }
    }

    fn hinge(&self, poses: &[Pose]) -> f64 {
        self.targets
            .iter()
            .map(|t| ((poses[t.body].translation - t.position).norm_squared() - self.eps_target * self.eps_target).max(0.0))
            .sum()
    }
}

/// Forward simulation over the task horizon.
pub fn rollout(task: &Task, u: &DVector<f64>) -> Result<Trajectory, RolloutError> {
    if u.len() != task.decision_len() {
        return Err(RolloutError::DecisionLength { got: u.len(), expected: task.decision_len() });
    }
    let s = &task.scenario;
    let (q0, before) = task.initial_state(u);
    let mut frames = vec![q0];
    let mut steps = Vec::with_capacity(s.horizon);
    let mut previous = before.clone();
    for k in 0..s.horizon {
        let targets = task.step_targets(u, k);
        let current = frames.last().expect("frame 0 exists").clone();
        let problem = StepProblem {
            bodies: &s.bodies,
            model: &s.model,
            params: &s.params,
            controls: if matches!(task.decision, Decision::PdTargets) { &s.controls } else { &[] },
            targets,
            current: &current,
            previous: &previous,
            frame: k,
        };
        let r = step(problem).map_err(|source| RolloutError::Step { frame: k, source })?;
        previous = current;
        frames.push(r.poses.clone());
        steps.push(r);
    }
    let loss = loss(&frames, task);
    Ok(Trajectory { frames, before, steps, loss })
}

/// Hinge loss `Σ ReLU(‖x_COM − x*‖² − ε²)` at the final frame, or summed over
/// frames `1..=H` when `per_frame` is set.
pub fn loss(frames: &[Vec<Pose>], task: &Task) -> f64 {
    if task.per_frame {
        frames[1..].iter().map(|f| task.hinge(f)).sum()
    } else {
        task.hinge(frames.last().expect("non-empty trajectory"))
    }
}

fn hinge_grad(task: &Task, dofs: &DofMap, poses: &[Pose]) -> DVector<f64> {
    let mut g = DVector::zeros(dofs.len());
    for t in &task.targets {
        let d = poses[t.body].translation - t.position;
        if d.norm_squared() - task.eps_target * task.eps_target > 0.0 {
            if let Some(o) = dofs.base(t.body) {
                for k in 0..3 {
                    g[o + k] += 2.0 * d[k];
                }
            }
        }
    }
    g
}

/// Reverse-mode gradient of the loss with respect to the decision vector.
pub fn grad_loss(traj: &Trajectory, task: &Task) -> DVector<f64> {
    let s = &task.scenario;
    let dofs = DofMap::new(&s.bodies);
    let h = s.horizon;
    // adj[j + 1] is the total derivative of the loss with respect to q^j, j = −1..=H.
    let mut adj = vec![DVector::zeros(dofs.len()); h + 2];
    let direct = |j: usize| -> DVector<f64> {
        if task.per_frame && j >= 1 || j == h {
            hinge_grad(task, &dofs, &traj.frames[j])
        } else {
            DVector::zeros(dofs.len())
        }
    };
    for j in (0..=h).rev() {
        let mut a = direct(j);
        if j < h {
            a += traj.steps[j].jac_current.transpose() * &adj[j + 2];
        }
        if j + 1 < h {
            a += traj.steps[j + 1].jac_previous.transpose() * &adj[j + 3];
        }
        adj[j + 1] = a;
    }
    // q^{−1} only feeds step 0.
    adj[0] = if h > 0 { traj.steps[0].jac_previous.transpose() * &adj[2] } else { DVector::zeros(dofs.len()) };

    match task.decision {
        Decision::InitialPlanar { body } => {
            let o = dofs.base(body).expect("decision body must be free");
            let dt = s.params.dt;
            let (a0, am) = (&adj[1], &adj[0]);
            // q^0_xy = p, q^{−1}_xy = p − v·δt.
            DVector::from_vec(vec![a0[o] + am[o], a0[o + 1] + am[o + 1], -dt * am[o], -dt * am[o + 1]])
        }
        Decision::PdTargets => {
            let w = task.control_width();
            let mut g = DVector::zeros(h * w);
            for k in 0..h {
                let gk = traj.steps[k].jac_control.transpose() * &adj[k + 2];
                g.rows_mut(k * w, w).copy_from(&gk);
            }
            g
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Denominator guard; kept far below the gradient scales produced by a
    /// small contact weight so that tiny far-field gradients still move `u`.
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 3e-2, beta1: 0.3, beta2: 0.5, epsilon: 1e-16, iterations: 400 }
    }
}

/// Adam state.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub u: DVector<f64>,
    m: DVector<f64>,
    v: DVector<f64>,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub wall_seconds: Vec<f64>,
}

impl OptimState {
    pub fn new(u: DVector<f64>) -> Self {
        let n = u.len();
        Self { u, m: DVector::zeros(n), v: DVector::zeros(n), iteration: 0, loss_history: Vec::new(), grad_norm_history: Vec::new(), wall_seconds: Vec::new() }
    }

    /// One Adam update with gradient `g`.
    pub fn update(&mut self, g: &DVector<f64>, cfg: &AdamConfig) {
        self.iteration += 1;
        let t = self.iteration as i32;
        self.m = &self.m * cfg.beta1 + g * (1.0 - cfg.beta1);
        self.v = &self.v * cfg.beta2 + g.component_mul(g) * (1.0 - cfg.beta2);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..self.u.len() {
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            self.u[k] -= cfg.alpha * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// One recorded optimizer iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_seconds: f64,
}

/// Adam on a generic objective returning `(loss, gradient)`.
pub fn adam<E>(
    u0: DVector<f64>,
    cfg: &AdamConfig,
    mut objective: impl FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>), E>,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<OptimState, E> {
    let mut st = OptimState::new(u0);
    let start = Instant::now();
    let mut prev: Option<DVector<f64>> = None;
    let mut pinned = 0;
    for it in 0..cfg.iterations {
        let ((l, g), fell_back) = evaluate_backtracking(&mut st.u, prev.as_ref(), &mut objective)?;
        pinned = if fell_back { pinned + 1 } else { 0 };
        let rec = IterationRecord { iteration: it, loss: l, grad_norm: g.norm(), wall_seconds: start.elapsed().as_secs_f64() };
        st.loss_history.push(l);
        st.grad_norm_history.push(rec.grad_norm);
        st.wall_seconds.push(rec.wall_seconds);
        on_iteration(&rec);
        if pinned >= MAX_PINNED_ITERATIONS {
            break;
        }
        prev = Some(st.u.clone());
        st.update(&g, cfg);
    }
    Ok(st)
}

/// Evaluates the objective at `u`; on failure (e.g. an initial state that
/// penetrates) pulls `u` halfway back toward `prev` and retries, finally
/// falling back to `prev` itself. The flag reports that fallback.
fn evaluate_backtracking<R, E>(u: &mut DVector<f64>, prev: Option<&DVector<f64>>, objective: &mut impl FnMut(&DVector<f64>) -> Result<R, E>) -> Result<(R, bool), E> {
    let mut tries = 0;
    loop {
        match objective(u) {
            Ok(r) => return Ok((r, tries > MAX_FEASIBILITY_HALVINGS)),
            Err(e) => match prev {
                Some(p) if tries < MAX_FEASIBILITY_HALVINGS => {
                    *u = (&*u + p) * 0.5;
                    tries += 1;
                }
                // The previous iterate was evaluated successfully.
                Some(p) if tries == MAX_FEASIBILITY_HALVINGS => {
                    *u = p.clone();
                    tries += 1;
                }
                _ => return Err(e),
            },
        }
    }
}

/// Trajectory optimization of `task` from `u0`; returns the optimizer state
/// and the rollout at the final decision.
pub fn optimize(task: &Task, u0: DVector<f64>, cfg: &AdamConfig, on_iteration: impl FnMut(&IterationRecord)) -> Result<(OptimState, Trajectory), RolloutError> {
    let mut last: Option<DVector<f64>> = None;
    let mut st = adam(
        u0,
        cfg,
        |u| {
            let tr = rollout(task, u)?;
            last = Some(u.clone());
            Ok((tr.loss, grad_loss(&tr, task)))
        },
        on_iteration,
    )?;
    // The last update may land on a penetrating start; back off as in the loop.
    let (tr, _) = evaluate_backtracking(&mut st.u, last.as_ref(), &mut |u| rollout(task, u))?;
    Ok((st, tr))
}

/// Receding-horizon control for PD-target tasks: at each frame optimize a
/// window of `window` steps from the current state, apply its first action
/// and shift the remaining actions as the next warm start.
pub fn receding_horizon(task: &Task, window: usize, cfg: &AdamConfig) -> Result<(Vec<f64>, Trajectory), RolloutError> {
    assert_eq!(task.decision, Decision::PdTargets, "receding horizon needs per-step controls");
    let w = task.control_width();
    let h = task.scenario.horizon;
    let mut applied = Vec::with_capacity(h * w);
    let mut scenario = task.scenario.clone();
    let mut warm = task.default_decision();
    let mut losses = Vec::with_capacity(h);
    for k in 0..h {
        let len = window.min(h - k);
        scenario.horizon = len;
        let sub = Task { scenario: scenario.clone(), ..task.clone() };
        let u0 = DVector::from_iterator(len * w, warm.iter().copied().take(len * w));
        let (st, _) = optimize(&sub, u0, cfg, |_| {})?;
        let first: Vec<f64> = st.u.as_slice()[..w].to_vec();
        applied.extend_from_slice(&first);
        let one = Task { scenario: Scenario { horizon: 1, ..scenario.clone() }, ..task.clone() };
        let tr = rollout(&one, &DVector::from_vec(first))?;
        losses.push(tr.loss);
        // Advance the scenario by one frame.
        let dt = scenario.params.dt;
        let next = tr.frames[1].clone();
        for (b, body) in scenario.bodies.iter_mut().enumerate() {
            let (a1, a0) = (next[b].to_array(), body.pose.to_array());
            scenario.velocities[b] = std::array::from_fn(|i| (a1[i] - a0[i]) / dt);
            body.pose = next[b];
        }
        let mut shifted: Vec<f64> = st.u.as_slice()[w.min(st.u.len())..].to_vec();
        shifted.extend_from_slice(&st.u.as_slice()[st.u.len() - w..]);
        warm = DVector::from_vec(shifted);
    }
    let full = rollout(task, &DVector::from_vec(applied.clone()))?;
    Ok((applied, full))
}
