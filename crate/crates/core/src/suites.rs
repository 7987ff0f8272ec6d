//! Property and acceptance suites built on the oracles.
//!
//! Each suite returns a [`SuiteReport`] of named checks with the measured
//! value and its threshold. Suites are deterministic given their seed.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsh::{build_trees, total_potential, BshTree, EvalOptions, DEFAULT_EPSILON};
use crate::contact::{brute_force_potential, Backend, ContactModel};
use crate::eval::{BodyChart, Chart, Derivs, VertexChart};
use crate::geometry::{min_pair_distance, primitives, Pose, SystemState, TriMeshBody, Vec3};
use crate::oracle::{self, fd_gradient, fd_jacobian, FiniteDiffReport};
use crate::pair_potential::pair_potential;
use crate::scenes;
use crate::stepper::{step, DofMap, PdControl, StepParams, StepProblem, StepResult};
use crate::trajopt::{optimize, AdamConfig, Scenario};

/// Seed used by the acceptance target and `bshc verify`.
pub const DEFAULT_SEED: u64 = 20241014;

/// One measured quantity against its threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: &'static str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name, passed: value <= threshold, value, threshold, detail: detail.into() }
    }

    pub fn below(name: &'static str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name, passed: value < threshold, value, threshold, detail: detail.into() }
    }

    pub fn at_least(name: &'static str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name, passed: value >= threshold, value, threshold, detail: detail.into() }
    }

    pub fn above(name: &'static str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name, passed: value > threshold, value, threshold, detail: detail.into() }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// `PASS name: check=value (threshold), ...`
    pub fn line(&self) -> String {
        let parts: Vec<String> = self
            .checks
            .iter()
            .map(|c| format!("{}{}={:.4e} (thr {:.3e})", if c.passed { "" } else { "!" }, c.name, c.value, c.threshold))
            .collect();
        format!("{} {} [{:.1}s]: {}", if self.passed() { "PASS" } else { "FAIL" }, self.name, self.seconds, parts.join(", "))
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Vec<Check>) -> SuiteReport {
    let start = Instant::now();
    let checks = f();
    SuiteReport { name, checks, seconds: start.elapsed().as_secs_f64() }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn rotation_vector(rng: &mut impl Rng) -> Vec3 {
    unit_vector(rng) * rng.gen_range(0.0..std::f64::consts::PI)
}

/// A small convex mesh with radius in `[0.6, 1.0]`.
fn random_convex(rng: &mut impl Rng, kinds: usize) -> TriMeshBody {
    let r = rng.gen_range(0.6..1.0);
    match rng.gen_range(0..kinds) {
        0 => primitives::tetrahedron(r, 1.0),
        1 => primitives::octahedron(r, 1.0),
        2 => primitives::cube(r * 2.0 / 3f64.sqrt(), 1.0),
        _ => primitives::icosphere(r, 0, 1.0),
    }
    .expect("primitive is valid")
}

/// Two random convex bodies, the second at `dist` times the sum of
/// their radii along a random direction.
fn random_pair(rng: &mut impl Rng, kinds: usize, dist: f64) -> Vec<TriMeshBody> {
    let a = random_convex(rng, kinds);
    let b = random_convex(rng, kinds);
    let d = dist * (a.rest_radius() + b.rest_radius());
    let ra = rotation_vector(rng);
    let rb = rotation_vector(rng);
    let dir = unit_vector(rng);
    vec![a.with_pose(Pose::new(Vec3::zeros(), ra)), b.with_pose(Pose::new(dir * d, rb))]
}

fn bsh_value(bodies: &[TriMeshBody], state: &SystemState, trees: &[BshTree]) -> f64 {
    let chart = VertexChart::new(bodies);
    total_potential(bodies, state, trees, &chart, EvalOptions::new(Derivs::Value)).potential.value
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn vec_rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-300)
}

/// Two unit cubes face to face at `gap`.
pub fn cube_pair(gap: f64) -> Vec<TriMeshBody> {
    vec![
        primitives::cube(1.0, 1.0).expect("unit cube"),
        primitives::cube(1.0, 1.0).expect("unit cube").with_pose(Pose::from_translation(Vec3::new(1.0 + gap, 0.0, 0.0))),
    ]
}

/// Finite potential exactly on separated configurations, and growth of the
/// potential as a face-to-face gap shrinks from 1e-2 to 1e-6.
pub fn barrier(seed: u64, samples: usize) -> SuiteReport {
    timed("barrier", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let configs: Vec<Vec<TriMeshBody>> = (0..samples).map(|_| { let f = rng.gen_range(0.5..1.3); random_pair(&mut rng, 4, f) }).collect();
        let outcomes = crate::par::map(&configs, |bodies| {
            let state = SystemState::from_bodies(bodies);
            let trees = build_trees(bodies, DEFAULT_EPSILON).expect("non-empty");
            let finite = bsh_value(bodies, &state, &trees).is_finite();
            (finite, min_pair_distance(bodies, &state) > 0.0)
        });
        let mismatches = outcomes.iter().filter(|(f, s)| f != s).count();
        let separated = outcomes.iter().filter(|(_, s)| *s).count();

        let gaps = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
        let values: Vec<f64> = gaps
            .iter()
            .map(|&g| {
                let bodies = cube_pair(g);
                let state = SystemState::from_bodies(&bodies);
                bsh_value(&bodies, &state, &build_trees(&bodies, DEFAULT_EPSILON).expect("non-empty"))
            })
            .collect();
        let monotone = values.windows(2).all(|w| w[1] > w[0]);
        let ratio = values[4] / values[0];
        vec![
            Check::at_most("finite_iff_separated_mismatches", mismatches as f64, 0.0, format!("{samples} configurations, {separated} separated")),
            Check::at_least("both_classes_sampled", separated.min(samples - separated) as f64, 1.0, ""),
            Check::at_least("monotone_in_gap", monotone as u8 as f64, 1.0, format!("{values:?}")),
            Check::at_least("gap_ratio_1e-6_over_1e-2", ratio, 1e4, format!("P(1e-2)={:.4e}, P(1e-6)={:.4e}", values[0], values[4])),
        ]
    })
}

/// A random separated pair whose root center distance is within `±1e-3` of
/// `d1` (`which = 0`) or `d2` (`which = 1`).
fn seam_pair(rng: &mut impl Rng, which: usize) -> Vec<TriMeshBody> {
    loop {
        let mut bodies = random_pair(rng, 3, 1.0);
        let trees = build_trees(&bodies, DEFAULT_EPSILON).expect("non-empty");
        let (na, nb) = (&trees[0].nodes[trees[0].root], &trees[1].nodes[trees[1].root]);
        let d1 = na.radius + nb.radius;
        let target = if which == 0 { d1 } else { (1.0 + DEFAULT_EPSILON) * d1 } + rng.gen_range(-1e-3..1e-3);
        let state = SystemState::from_bodies(&bodies);
        let ca = trees[0].world_center(&state, trees[0].root);
        let offset = trees[1].world_center(&state, trees[1].root) - bodies[1].pose.translation;
        let dir = unit_vector(rng);
        bodies[1].pose.translation = ca + dir * target - offset;
        let state = SystemState::from_bodies(&bodies);
        if min_pair_distance(&bodies, &state) > 0.02 {
            return bodies;
        }
    }
}

fn fd_state_vertex(bodies: &[TriMeshBody], trees: &[BshTree], x: &DVector<f64>) -> (FiniteDiffReport, FiniteDiffReport) {
    let chart = VertexChart::new(bodies);
    let n = chart.dof_count();
    let eval = |x: &DVector<f64>, d: Derivs| {
        let s = SystemState::from_vertex_vector(bodies, x.as_slice());
        total_potential(bodies, &s, trees, &chart, EvalOptions::new(d)).potential
    };
    let e = eval(x, Derivs::Hessian);
    let g = fd_gradient(|y| Some(eval(y, Derivs::Value).value).filter(|v| v.is_finite()), x, &e.dense_grad(n), 1e-6).expect("finite stencil");
    let h = fd_jacobian(|y| Some(eval(y, Derivs::Gradient)).filter(|p| p.is_finite()).map(|p| p.dense_grad(n)), x, &e.dense_hess(n), 1e-6).expect("finite stencil");
    (g, h)
}

fn fd_state_body(bodies: &[TriMeshBody], trees: &[BshTree]) -> (FiniteDiffReport, FiniteDiffReport) {
    let dofs = DofMap::new(bodies);
    let template: Vec<Pose> = bodies.iter().map(|b| b.pose).collect();
    let q0 = dofs.pack(&template);
    let n = dofs.len();
    let eval = |q: &DVector<f64>, d: Derivs| {
        let s = SystemState::new(bodies, dofs.unpack(q, &template), 0);
        let chart = BodyChart::new(bodies, &s);
        total_potential(bodies, &s, trees, &chart, EvalOptions::new(d)).potential
    };
    let e = eval(&q0, Derivs::Hessian);
    let g = fd_gradient(|y| Some(eval(y, Derivs::Value).value).filter(|v| v.is_finite()), &q0, &e.dense_grad(n), 1e-6).expect("finite stencil");
    let h = fd_jacobian(|y| Some(eval(y, Derivs::Gradient)).filter(|p| p.is_finite()).map(|p| p.dense_grad(n)), &q0, &e.dense_hess(n), 1e-6).expect("finite stencil");
    (g, h)
}

/// Gradient and Hessian of the hierarchical potential against central
/// differences, in vertex and in rigid coordinates, at random separated
/// states of which at least `seam` straddle a root blend seam.
pub fn smoothness(seed: u64, states: usize, seam: usize) -> SuiteReport {
    timed("smoothness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes: Vec<Vec<TriMeshBody>> = (0..states)
            .map(|k| {
                if k < seam {
                    seam_pair(&mut rng, k % 2)
                } else {
                    loop {
                        let f = rng.gen_range(0.6..1.6);
                        let b = random_pair(&mut rng, 3, f);
                        if min_pair_distance(&b, &SystemState::from_bodies(&b)) > 0.02 {
                            break b;
                        }
                    }
                }
            })
            .collect();
        let mut worst = [FiniteDiffReport { max_rel_err: 0.0, argmax: 0, h: 1e-6, stencil: "central" }; 4];
        for bodies in &scenes {
            let trees = build_trees(bodies, DEFAULT_EPSILON).expect("non-empty");
            let x = DVector::from_vec(SystemState::from_bodies(bodies).vertex_vector());
            let (gv, hv) = fd_state_vertex(bodies, &trees, &x);
            let (gb, hb) = fd_state_body(bodies, &trees);
            for (w, r) in worst.iter_mut().zip([gv, hv, gb, hb]) {
                *w = w.worst(r);
            }
        }
        vec![
            Check::below("grad_rel_err_vertex", worst[0].max_rel_err, 1e-5, format!("{states} states, {seam} on seams, h=1e-6")),
            Check::below("hess_rel_err_vertex", worst[1].max_rel_err, 1e-4, ""),
            Check::below("grad_rel_err_rigid", worst[2].max_rel_err, 1e-5, ""),
            Check::below("hess_rel_err_rigid", worst[3].max_rel_err, 1e-4, ""),
        ]
    })
}

/// Net force on the second body of random separated convex pairs points
/// away from the first; far-field gradients survive only for the globally
/// supported potential.
pub fn non_prehensile(seed: u64, samples: usize) -> SuiteReport {
    timed("non_prehensile", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let configs: Vec<Vec<TriMeshBody>> = (0..samples)
            .map(|_| loop {
                let f = rng.gen_range(0.6..3.0);
                let b = random_pair(&mut rng, 4, f);
                if min_pair_distance(&b, &SystemState::from_bodies(&b)) > 1e-3 {
                    break b;
                }
            })
            .collect();
        let alignments = crate::par::map(&configs, |bodies| {
            let state = SystemState::from_bodies(bodies);
            let trees = build_trees(bodies, DEFAULT_EPSILON).expect("non-empty");
            let chart = BodyChart::new(bodies, &state);
            let g = total_potential(bodies, &state, &trees, &chart, EvalOptions::new(Derivs::Gradient)).potential.dense_grad(chart.dof_count());
            let force = -Vec3::new(g[6], g[7], g[8]);
            let mean = |b: usize| state.world(b).iter().sum::<Vec3>() / state.world(b).len() as f64;
            let sep = (mean(1) - mean(0)).normalize();
            force.dot(&sep) / force.norm()
        });
        let min_cos = alignments.iter().copied().fold(f64::INFINITY, f64::min);

        let far = |backend: Backend| {
            let bodies = vec![
                primitives::icosphere(0.5, 1, 1.0).expect("sphere"),
                primitives::icosphere(0.5, 1, 1.0).expect("sphere").with_pose(Pose::from_translation(Vec3::new(1e3, 0.0, 0.0))),
            ];
            let state = SystemState::from_bodies(&bodies);
            let chart = BodyChart::new(&bodies, &state);
            let m = ContactModel::new(&bodies, backend, DEFAULT_EPSILON).expect("non-empty");
            m.evaluate(&bodies, &state, &chart, Derivs::Gradient).potential.dense_grad(chart.dof_count()).norm()
        };
        let (ours, baseline) = (far(Backend::Bsh), far(Backend::LocalBaseline));
        vec![
            Check::above("min_cos_force_vs_separation", min_cos, 0.0, format!("{samples} pairs")),
            Check::above("far_grad_norm_bsh", ours, 0.0, "separation 1e3 m"),
            Check::at_most("far_grad_norm_baseline", baseline, 0.0, "separation 1e3 m"),
        ]
    })
}

fn random_triangle(rng: &mut impl Rng, center: Vec3, size: f64) -> [Vec3; 3] {
    std::array::from_fn(|_| center + unit_vector(rng) * size * rng.gen_range(0.3..1.0))
}

/// The analytic per-vertex force equals `n/s²` on side `i` and `−n/u²` on
/// side `j`, with `s, u` the barrier slacks at the optimal plane.
pub fn leaf_force(seed: u64, samples: usize) -> SuiteReport {
    timed("leaf_force", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < samples {
            let dir = unit_vector(&mut rng);
            let ti = random_triangle(&mut rng, Vec3::zeros(), 1.0);
            let c = dir * rng.gen_range(1.5..4.0);
            let tj = random_triangle(&mut rng, c, 1.0);
            let Ok(sol) = pair_potential(&ti, &tj, false) else { continue };
            let n = sol.plane.n;
            let scale = (0..6).map(|k| sol.force(k).norm()).fold(0.0, f64::max);
            for k in 0..6 {
                let s = sol.slacks[k];
                let formula = if k < 3 { n / (s * s) } else { -n / (s * s) };
                worst = worst.max((sol.force(k) - formula).norm() / scale);
            }
            // The slacks must be the plane's barrier arguments.
            for k in 0..3 {
                worst = worst.max(rel_diff(sol.slacks[k], ti[k].dot(&n) + sol.plane.d));
                worst = worst.max(rel_diff(sol.slacks[3 + k], -tj[k].dot(&n) - sol.plane.d));
            }
            done += 1;
        }
        vec![Check::below("force_formula_rel_err", worst, 1e-8, format!("{samples} pairs"))]
    })
}

/// Close-range scenes in which every visited node pair sits inside its
/// `d1`: the hierarchy equals the raw brute-force sum. On arbitrary scenes
/// pruning is value-neutral.
pub fn bsh_equivalence(seed: u64, scenes_wanted: usize) -> SuiteReport {
    timed("bsh_equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_close = 0.0f64;
        let mut close = 0;
        let mut attempts = 0;
        while close < scenes_wanted && attempts < 50 * scenes_wanted {
            attempts += 1;
            let plate = |rng: &mut ChaCha8Rng| {
                let b = if rng.gen_bool(0.5) {
                    primitives::grid_plate(1, 1, rng.gen_range(0.7..1.3), 1.0)
                } else {
                    let t = random_triangle(rng, Vec3::zeros(), 1.0);
                    primitives::single_triangle(t[0], t[1], t[2], 1.0)
                };
                b.expect("valid plate")
            };
            let a = plate(&mut rng).with_pose(Pose::new(Vec3::zeros(), unit_vector(&mut rng) * 0.2));
            let b = plate(&mut rng).with_pose(Pose::new(
                Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.05..0.4)),
                unit_vector(&mut rng) * 0.2,
            ));
            let bodies = vec![a, b];
            let state = SystemState::from_bodies(&bodies);
            if min_pair_distance(&bodies, &state) <= 1e-3 {
                continue;
            }
            let trees = build_trees(&bodies, DEFAULT_EPSILON).expect("non-empty");
            let chart = VertexChart::new(&bodies);
            let n = chart.dof_count();
            let opts = EvalOptions { derivs: Derivs::Gradient, prune: true, trace: true };
            let e = total_potential(&bodies, &state, &trees, &chart, opts);
            if !e.trace.iter().all(|t| t.dist < t.spec.d1) {
                continue;
            }
            let brute = brute_force_potential(&bodies, &state, &chart, Derivs::Gradient, None);
            worst_close = worst_close.max(rel_diff(e.potential.value, brute.potential.value));
            worst_close = worst_close.max(vec_rel_diff(&e.potential.dense_grad(n), &brute.potential.dense_grad(n)));
            close += 1;
        }

        let mut worst_prune = 0.0f64;
        for k in 0..20 {
            let mut bodies = Vec::new();
            for b in 0..3 {
                let body = if k % 2 == 0 { random_convex(&mut rng, 4) } else { primitives::icosphere(0.5, 1, 1.0).expect("sphere") };
                let t = Vec3::new(b as f64 * rng.gen_range(1.1..3.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                bodies.push(body.with_pose(Pose::new(t, rotation_vector(&mut rng))));
            }
            let state = SystemState::from_bodies(&bodies);
            if min_pair_distance(&bodies, &state) <= 1e-3 {
                continue;
            }
            let trees = build_trees(&bodies, DEFAULT_EPSILON).expect("non-empty");
            let chart = BodyChart::new(&bodies, &state);
            let n = chart.dof_count();
            let with = total_potential(&bodies, &state, &trees, &chart, EvalOptions { derivs: Derivs::Hessian, prune: true, trace: false }).potential;
            let without = total_potential(&bodies, &state, &trees, &chart, EvalOptions { derivs: Derivs::Hessian, prune: false, trace: false }).potential;
            worst_prune = worst_prune.max(rel_diff(with.value, without.value));
            worst_prune = worst_prune.max(vec_rel_diff(&with.dense_grad(n), &without.dense_grad(n)));
            let (hw, ho) = (with.dense_hess(n), without.dense_hess(n));
            worst_prune = worst_prune.max((&hw - &ho).amax() / hw.amax().max(ho.amax()).max(1e-300));
        }
        vec![
            Check::at_least("close_range_scenes", close as f64, scenes_wanted as f64, format!("{attempts} sampled")),
            Check::below("bsh_vs_brute_rel_err", worst_close, 1e-10, ""),
            Check::below("prune_neutrality_rel_err", worst_prune, 1e-10, "value, gradient and Hessian"),
        ]
    })
}

/// Interaction-term growth of the stacked-plate grid experiment and
/// evaluation-time growth of the billiards-rack refinement.
pub fn complexity(grid_ns: &[usize], refinement: &[(usize, usize)]) -> (SuiteReport, Vec<oracle::ComplexityRow>, Vec<oracle::RefinementRow>) {
    let mut rows = Vec::new();
    let mut refine = Vec::new();
    let report = timed("complexity", || {
        rows = oracle::uniform_grid_experiment(grid_ns, 0.01, DEFAULT_EPSILON);
        let max_growth = rows.windows(2).map(|w| w[1].terms() as f64 / w[0].terms() as f64).fold(0.0, f64::max);
        refine = oracle::billiards_refinement(refinement, 3);
        let (lo, hi) = (refine[0], refine[refine.len() - 1]);
        let tri_ratio = hi.triangles as f64 / lo.triangles as f64;
        let time_ratio = hi.eval_seconds / lo.eval_seconds;
        let terms: Vec<usize> = rows.iter().map(|r| r.terms()).collect();
        vec![
            Check::at_most("grid_terms_growth_per_4x", max_growth, 6.0, format!("terms {terms:?}")),
            Check::below(
                "refinement_time_growth",
                time_ratio,
                tri_ratio.powf(1.5),
                format!("{}→{} triangles, {:.3}s→{:.3}s", lo.triangles, hi.triangles, lo.eval_seconds, hi.eval_seconds),
            ),
        ]
    });
    (report, rows, refine)
}

/// Rise in `L` between Newton iterates attributed to rounding: `L` sums
/// inertial, gravity and barrier terms that partly cancel, so its floor is
/// absolute near `|L| < 1`. Observed rises stay near `1e-15`.
const MONOTONE_SLACK: f64 = 1e-13;

/// Per-frame record of a preset simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub poses: Vec<Pose>,
    pub min_distance: f64,
    pub potential: f64,
    pub newton_iters: usize,
    /// Newton values never rise above the rounding floor of `L`.
    pub monotone: bool,
    pub eval_seconds: f64,
    pub exact_terms: usize,
    pub centered_terms: usize,
}

/// Runs `steps` frames of a zero-control scenario from rest.
pub fn simulate(bodies: &[TriMeshBody], model: &ContactModel, params: &StepParams, steps: usize) -> Result<Vec<FrameRecord>, crate::stepper::StepError> {
    let cur: Vec<Pose> = bodies.iter().map(|b| b.pose).collect();
    simulate_from(bodies, model, params, &[], &[], cur.clone(), cur, steps)
}

/// Runs a scenario over its horizon from its initial velocities, with PD
/// targets held at the initial coordinates.
pub fn simulate_scenario(s: &Scenario) -> Result<Vec<FrameRecord>, crate::stepper::StepError> {
    let cur = s.initial_poses();
    let prev: Vec<Pose> = cur
        .iter()
        .zip(&s.velocities)
        .map(|(p, v)| {
            let a = p.to_array();
            Pose::from_slice(&std::array::from_fn::<f64, 6, _>(|k| a[k] - v[k] * s.params.dt))
        })
        .collect();
    let dofs = DofMap::new(&s.bodies);
    let q0 = dofs.pack(&cur);
    let hold: Vec<f64> = dofs.control_dofs(&s.controls).iter().map(|&(d, _, _)| q0[d]).collect();
    simulate_from(&s.bodies, &s.model, &s.params, &s.controls, &hold, cur, prev, s.horizon)
}

#[allow(clippy::too_many_arguments)]
fn simulate_from(
    bodies: &[TriMeshBody],
    model: &ContactModel,
    params: &StepParams,
    controls: &[PdControl],
    targets: &[f64],
    mut cur: Vec<Pose>,
    mut prev: Vec<Pose>,
    steps: usize,
) -> Result<Vec<FrameRecord>, crate::stepper::StepError> {
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let r = step(StepProblem { bodies, model, params, controls, targets, current: &cur, previous: &prev, frame: k })?;
        let state = SystemState::new(bodies, r.poses.clone(), k + 1);
        out.push(FrameRecord {
            frame: k + 1,
            poses: r.poses.clone(),
            min_distance: min_pair_distance(bodies, &state),
            potential: r.potential,
            newton_iters: r.newton_iters,
            monotone: r.lagrangian_history.windows(2).all(|w| w[1] <= w[0] + MONOTONE_SLACK * w[0].abs().max(1.0)),
            eval_seconds: r.eval_seconds,
            exact_terms: r.counts.exact,
            centered_terms: r.counts.centered,
        });
        prev = std::mem::replace(&mut cur, r.poses);
    }
    Ok(out)
}

/// Whether the straight coordinate path from `from` to `to` keeps all
/// bodies apart. Conservative advancement with brute-force distances: rigid
/// points move at most `‖Δt‖ + R‖Δθ‖` over the whole path.
pub fn swept_clear(bodies: &[TriMeshBody], from: &[Pose], to: &[Pose]) -> bool {
    let mut motion: Vec<f64> = bodies
        .iter()
        .zip(from.iter().zip(to))
        .map(|(b, (p, q))| (q.translation - p.translation).norm() + b.rest_radius() * (q.rotation - p.rotation).norm())
        .collect();
    motion.sort_by(|a, b| b.total_cmp(a));
    let rate = motion.iter().take(2).sum::<f64>();
    let at = |s: f64| {
        let poses: Vec<Pose> = from
            .iter()
            .zip(to)
            .map(|(p, q)| Pose::new(p.translation.lerp(&q.translation, s), p.rotation.lerp(&q.rotation, s)))
            .collect();
        min_pair_distance(bodies, &SystemState::new(bodies, poses, 0))
    };
    let mut s = 0.0;
    for _ in 0..100_000 {
        let d = at(s);
        if !(d > 0.0) {
            return false;
        }
        if s >= 1.0 || rate == 0.0 {
            return true;
        }
        s = (s + 0.5 * d / rate).min(1.0);
    }
    false
}

/// Ball-drop and stacking presets stay penetration-free, along the swept
/// path between frames too, with monotone Newton iterations.
pub fn penetration_free(steps: usize) -> SuiteReport {
    timed("penetration_free", || {
        let mut checks = Vec::new();
        for (name, bodies) in [("ball_drop", scenes::ball_drop()), ("stack", scenes::stack())] {
            let sc = scenes::drop_scenario(bodies.expect("preset"), Backend::Bsh, steps);
            let (min_d, bad, swept, done) = match simulate(&sc.bodies, &sc.model, &sc.params, steps) {
                Ok(frames) => {
                    let start: Vec<Pose> = sc.bodies.iter().map(|b| b.pose).collect();
                    let mut swept = 0;
                    let mut from = &start;
                    for f in &frames {
                        swept += usize::from(!swept_clear(&sc.bodies, from, &f.poses));
                        from = &f.poses;
                    }
                    (
                        frames.iter().map(|f| f.min_distance).fold(f64::INFINITY, f64::min),
                        frames.iter().filter(|f| !f.monotone).count(),
                        swept,
                        frames.len(),
                    )
                }
                Err(_) => (f64::NAN, usize::MAX, usize::MAX, 0),
            };
            checks.push(Check::at_least(if name == "stack" { "stack_frames" } else { "ball_drop_frames" }, done as f64, steps as f64, ""));
            checks.push(Check::above(if name == "stack" { "stack_min_distance" } else { "ball_drop_min_distance" }, min_d, 0.0, ""));
            checks.push(Check::at_most(if name == "stack" { "stack_non_monotone_steps" } else { "ball_drop_non_monotone_steps" }, bad as f64, 0.0, ""));
            checks.push(Check::at_most(if name == "stack" { "stack_swept_path_contacts" } else { "ball_drop_swept_path_contacts" }, swept as f64, 0.0, "frames whose interpolated motion can touch"));
        }
        checks
    })
}

/// A contact-active step: its problem data and the result.
pub struct ActiveStep {
    pub name: &'static str,
    pub bodies: Vec<TriMeshBody>,
    pub model: ContactModel,
    pub params: StepParams,
    pub controls: Vec<PdControl>,
    pub targets: Vec<f64>,
    pub current: Vec<Pose>,
    pub previous: Vec<Pose>,
    /// `μ‖∇P‖` relative to the inertial gradient scale `‖M(q^t − q^{t−1})‖/δt²`
    /// plus gravity.
    pub contact_share: f64,
}

impl ActiveStep {
    pub fn problem(&self) -> StepProblem<'_> {
        StepProblem {
            bodies: &self.bodies,
            model: &self.model,
            params: &self.params,
            controls: &self.controls,
            targets: &self.targets,
            current: &self.current,
            previous: &self.previous,
            frame: 0,
        }
    }

    pub fn solve(&self) -> StepResult {
        step(self.problem()).expect("contact-active preset steps")
    }
}

fn contact_share(bodies: &[TriMeshBody], model: &ContactModel, params: &StepParams, poses: &[Pose], r: &StepResult) -> f64 {
    let state = SystemState::new(bodies, r.poses.clone(), 1);
    let chart = BodyChart::new(bodies, &state);
    let g = model.evaluate(bodies, &state, &chart, Derivs::Gradient).potential.dense_grad(chart.dof_count());
    let dofs = DofMap::new(bodies);
    let m = dofs.mass_matrix(bodies);
    let inertial = (&m * (&r.q - dofs.pack(poses))).norm() / (params.dt * params.dt) + params.gravity.norm();
    params.mu * g.norm() / inertial.max(1e-300)
}

/// Contact-active steps: a ball settling on a plate, a billiard impact, and
/// a PD-driven pusher leaning on a box.
const RESTING_FRAME: usize = 100;

pub fn active_steps() -> Vec<ActiveStep> {
    let mut out = Vec::new();

    let sc = scenes::drop_scenario(scenes::ball_drop().expect("preset"), Backend::Bsh, 0);
    let frames = simulate(&sc.bodies, &sc.model, &sc.params, RESTING_FRAME + 1).expect("ball drop runs");
    let (current, previous) = (frames[RESTING_FRAME].poses.clone(), frames[RESTING_FRAME - 1].poses.clone());
    out.push(ActiveStep { name: "resting_ball", bodies: sc.bodies, model: sc.model, params: sc.params, controls: vec![], targets: vec![], current, previous, contact_share: 0.0 });

    let task = scenes::billiards_mini(Backend::Bsh).expect("preset");
    let s = task.scenario;
    let mut current: Vec<Pose> = s.bodies.iter().map(|b| b.pose).collect();
    current[0].translation.x = -0.52;
    let mut previous = current.clone();
    previous[0].translation.x -= 2.0 * s.params.dt;
    out.push(ActiveStep { name: "billiard_impact", bodies: s.bodies, model: s.model, params: s.params, controls: vec![], targets: vec![], current, previous, contact_share: 0.0 });

    let task = scenes::push_mini(Backend::Bsh, 1).expect("preset");
    let s = task.scenario;
    let mut current: Vec<Pose> = s.bodies.iter().map(|b| b.pose).collect();
    current[0].translation.x = -0.36;
    let previous = current.clone();
    let targets = vec![0.2, 0.05];
    out.push(ActiveStep { name: "pd_push", bodies: s.bodies, model: s.model, params: s.params, controls: s.controls, targets, current, previous, contact_share: 0.0 });

    for a in &mut out {
        let r = a.solve();
        a.contact_share = contact_share(&a.bodies, &a.model, &a.params, &a.current, &r);
    }
    out
}

/// Implicit-function-theorem Jacobians of a step against central
/// differences of the full step map.
pub fn step_jacobian_errors(a: &ActiveStep, h: f64) -> [FiniteDiffReport; 3] {
    let r = a.solve();
    let dofs = DofMap::new(&a.bodies);
    let map = |current: Vec<Pose>, previous: Vec<Pose>, targets: Vec<f64>| {
        let p = StepProblem { current: &current, previous: &previous, targets: &targets, ..a.problem() };
        step(p).ok().map(|r| r.q)
    };
    let qc = dofs.pack(&a.current);
    let qp = dofs.pack(&a.previous);
    let wrt_current = fd_jacobian(|q| map(dofs.unpack(q, &a.current), a.previous.clone(), a.targets.clone()), &qc, &r.jac_current, h).expect("finite stencil");
    let wrt_previous = fd_jacobian(|q| map(a.current.clone(), dofs.unpack(q, &a.previous), a.targets.clone()), &qp, &r.jac_previous, h).expect("finite stencil");
    let wrt_control = if a.targets.is_empty() {
        FiniteDiffReport { max_rel_err: 0.0, argmax: 0, h, stencil: "central" }
    } else {
        let u = DVector::from_vec(a.targets.clone());
        fd_jacobian(|u| map(a.current.clone(), a.previous.clone(), u.as_slice().to_vec()), &u, &r.jac_control, h).expect("finite stencil")
    };
    [wrt_current, wrt_previous, wrt_control]
}

/// Central-difference step for the step-map oracle: large enough that the
/// Newton stopping residual does not dominate, small enough for the stiff
/// impact case's truncation error.
pub const JACOBIAN_FD_STEP: f64 = 1e-5;

/// Step Jacobians on contact-active states.
pub fn step_jacobians() -> SuiteReport {
    timed("step_jacobians", || {
        let mut checks = Vec::new();
        let mut worst = 0.0f64;
        let mut min_share = f64::INFINITY;
        let mut detail = Vec::new();
        for a in active_steps() {
            let errs = step_jacobian_errors(&a, JACOBIAN_FD_STEP);
            let e = errs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            detail.push(format!("{}: err {:.2e}, contact share {:.2e}", a.name, e, a.contact_share));
            worst = worst.max(e);
            min_share = min_share.min(a.contact_share);
        }
        checks.push(Check::below("jacobian_rel_err", worst, 1e-4, detail.join("; ")));
        checks.push(Check::above("min_contact_share", min_share, 1e-3, "contact gradient relative to inertial plus gravity scale"));
        checks
    })
}

/// The planar point–segment barrier has second-derivative jumps at the
/// Voronoi switches while our pair potential stays twice continuous on the
/// analogous sweep.
pub fn ipc_demo(samples: usize) -> (SuiteReport, Vec<oracle::IpcSample>) {
    let curve = oracle::ipc_counterexample(samples);
    let report = timed("ipc_counterexample", || {
        let max_d1_step = curve.windows(2).map(|w| (w[1].d_prime - w[0].d_prime).abs()).fold(0.0, f64::max);
        let dx = 3.0 / samples as f64;
        let jump = oracle::ipc_second_derivative_jump(1.0).abs().min(oracle::ipc_second_derivative_jump(2.0).abs());
        let mut ours = 0.0f64;
        for seam in [1.0, 2.0] {
            let e = 1e-6;
            let (l, r) = (oracle::sweep_second_derivative(seam - e), oracle::sweep_second_derivative(seam + e));
            ours = ours.max((l - r).abs() / (1.0 + l.abs()));
        }
        // Independent of the analytic Hessian: second differences of the value.
        let fd2 = |x: f64, h: f64| (oracle::sweep_value(x + h) - 2.0 * oracle::sweep_value(x) + oracle::sweep_value(x - h)) / (h * h);
        let mut ours_fd = 0.0f64;
        for seam in [1.0, 2.0] {
            let (l, r) = (fd2(seam - 1e-3, 1e-3), fd2(seam + 1e-3, 1e-3));
            let mid = fd2(seam, 1e-3);
            ours_fd = ours_fd.max((l - 2.0 * mid + r).abs() / (1.0 + mid.abs()));
        }
        vec![
            Check::below("d_prime_max_step", max_d1_step, 2.0 * dx, format!("{samples} intervals")),
            Check::above("d_second_jump_at_1_and_2", jump, 0.3, ""),
            Check::below("pair_second_derivative_jump", ours, 1e-4, "analytic Hessian at seam ± 1e-6"),
            Check::below("pair_second_difference_kink", ours_fd, 1e-4, "value-only second differences"),
        ]
    });
    (report, curve)
}

/// Result of one optimization run in the A/B comparison.
#[derive(Clone, Debug)]
pub struct AbRun {
    pub backend: Backend,
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub wall_seconds: Vec<f64>,
    pub final_loss: f64,
}

impl AbRun {
    pub fn initial(&self) -> f64 {
        self.loss_history[0]
    }

    pub fn best(&self) -> f64 {
        self.loss_history.iter().copied().fold(self.final_loss, f64::min)
    }
}

pub fn ab_run(backend: Backend, cfg: &AdamConfig) -> AbRun {
    let task = scenes::billiards_mini(backend).expect("preset");
    let (st, tr) = optimize(&task, task.default_decision(), cfg, |_| {}).expect("billiards-mini rollouts succeed");
    AbRun { backend, loss_history: st.loss_history, grad_norm_history: st.grad_norm_history, wall_seconds: st.wall_seconds, final_loss: tr.loss }
}

/// Billiards-mini from trivially separated initial conditions.
pub fn trajopt_ab(cfg: &AdamConfig) -> (SuiteReport, Vec<AbRun>) {
    let mut runs = Vec::new();
    let report = timed("trajopt_ab", || {
        let ours = ab_run(Backend::Bsh, cfg);
        let base = ab_run(Backend::LocalBaseline, cfg);
        let reduction = 1.0 - ours.best() / ours.initial();
        let baseline_change = base.loss_history.iter().chain([&base.final_loss]).map(|l| (l - base.initial()).abs()).fold(0.0, f64::max);
        let checks = vec![
            Check::at_least(
                "bsh_loss_reduction",
                reduction,
                0.9,
                format!("{} of {} iterations, loss {:.4} → best {:.4}, final {:.4}", ours.loss_history.len(), cfg.iterations, ours.initial(), ours.best(), ours.final_loss),
            ),
            Check::above("bsh_initial_grad_norm", ours.grad_norm_history[0], 0.0, ""),
            Check::at_most("baseline_loss_change", baseline_change, 0.0, format!("loss {:.4}", base.initial())),
        ];
        runs = vec![ours, base];
        checks
    });
    (report, runs)
}

/// Step Jacobian residual at the unconstrained inertial minimum.
pub fn free_flight_jacobian_error() -> f64 {
    let bodies = vec![primitives::cube(1.0, 2.0).expect("cube").with_pose(Pose::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.3, 0.1, -0.2)))];
    let model = ContactModel::new(&bodies, Backend::Bsh, DEFAULT_EPSILON).expect("non-empty");
    let params = StepParams::new(scenes::DT, scenes::MU_PUSH);
    let cur = vec![bodies[0].pose];
    let mut prev = cur.clone();
    prev[0].translation.x -= 0.01;
    let r = step(StepProblem { bodies: &bodies, model: &model, params: &params, controls: &[], targets: &[], current: &cur, previous: &prev, frame: 0 }).expect("free step");
    let i = DMatrix::<f64>::identity(6, 6);
    (&r.jac_current - &i * 2.0).amax().max((&r.jac_previous + &i).amax())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_compare_with_their_thresholds() {
        assert!(Check::below("a", 1.0, 2.0, "").passed);
        assert!(!Check::below("a", 2.0, 2.0, "").passed);
        assert!(Check::at_most("a", 2.0, 2.0, "").passed);
        assert!(!Check::above("a", 0.0, 0.0, "").passed);
        let r = SuiteReport { name: "x", checks: vec![Check::at_least("c", 1.0, 2.0, "")], seconds: 0.0 };
        assert!(!r.passed());
        assert!(r.line().starts_with("FAIL x"));
        assert_eq!(r.failed_checks().count(), 1);
    }

    #[test]
    fn leaf_force_small_sample() {
        assert!(leaf_force(7, 20).passed());
    }

    #[test]
    fn free_flight_jacobians_are_two_and_minus_one() {
        assert!(free_flight_jacobian_error() < 1e-10);
    }
}
