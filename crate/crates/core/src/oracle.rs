//! Independent verification machinery: central finite differences, the
//! two-dimensional point–segment barrier counterexample, and the
//! hierarchy scaling experiments.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bsh::{build_trees, count_interactions, total_potential, EvalOptions, InteractionCounts};
use crate::eval::{BodyChart, Chart, Derivs};
use crate::geometry::{primitives, Pose, SystemState, TriMeshBody, Vec3};
use crate::pair_potential::pair_potential;

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("function is not finite within the stencil at coordinate {0}")]
    NonFinite(usize),
}

/// Result of one finite-difference comparison.
///
/// `max_rel_err` is normwise: `max_k |fd_k − a_k| / max(max_k |a_k|, floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub argmax: usize,
    pub h: f64,
    pub stencil: &'static str,
}

impl FiniteDiffReport {
    /// Worse of two reports.
    pub fn worst(self, other: Self) -> Self {
        if other.max_rel_err > self.max_rel_err {
            other
        } else {
            self
        }
    }
}

/// Lower bound on the normalizer so that exactly-zero references compare
/// absolutely.
pub const FD_FLOOR: f64 = 1e-12;

fn report(fd: &[f64], analytic: &[f64], h: f64) -> FiniteDiffReport {
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(FD_FLOOR);
    let (argmax, err) = fd
        .iter()
        .zip(analytic)
        .map(|(f, a)| (f - a).abs())
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    FiniteDiffReport { max_rel_err: err / scale, argmax, h, stencil: "central" }
}

/// Central differences of a scalar map against an analytic gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> Option<f64> + Sync, x: &DVector<f64>, grad: &DVector<f64>, h: f64) -> Result<FiniteDiffReport, FdError> {
    let fd = crate::par::map_range(x.len(), |k| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        match (f(&xp), f(&xm)) {
            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => Ok((a - b) / (2.0 * h)),
            _ => Err(FdError::NonFinite(k)),
        }
    });
    let fd: Vec<f64> = fd.into_iter().collect::<Result<_, _>>()?;
    Ok(report(&fd, grad.as_slice(), h))
}

/// Central differences of a gradient map against an analytic Jacobian
/// (a Hessian when `g` is a gradient). `jac` is `m × n`.
pub fn fd_jacobian(g: impl Fn(&DVector<f64>) -> Option<DVector<f64>> + Sync, x: &DVector<f64>, jac: &DMatrix<f64>, h: f64) -> Result<FiniteDiffReport, FdError> {
    let cols = crate::par::map_range(x.len(), |k| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        match (g(&xp), g(&xm)) {
            (Some(a), Some(b)) if a.iter().chain(b.iter()).all(|v| v.is_finite()) => Ok((a - b) / (2.0 * h)),
            _ => Err(FdError::NonFinite(k)),
        }
    });
    let cols: Vec<DVector<f64>> = cols.into_iter().collect::<Result<_, _>>()?;
    let fd = DMatrix::from_columns(&cols);
    Ok(report(fd.as_slice(), jac.as_slice(), h))
}

/// One sample of the point–segment counterexample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IpcSample {
    pub x: f64,
    pub d: f64,
    pub d_prime: f64,
    pub d_second: f64,
    /// `−log d`.
    pub barrier: f64,
}

/// Distance from the point `(x, 1)` to the segment `(1,0)–(2,0)` with its
/// first two derivatives in `x`.
pub fn point_segment_distance(x: f64) -> (f64, f64, f64) {
    let nearest = x.clamp(1.0, 2.0);
    let dx = x - nearest;
    let d = (dx * dx + 1.0).sqrt();
    if dx == 0.0 {
        (d, 0.0, 0.0)
    } else {
        (d, dx / d, 1.0 / (d * d * d))
    }
}

/// `n + 1` uniform samples of the counterexample over `[0, 3]`.
pub fn ipc_counterexample(n: usize) -> Vec<IpcSample> {
    (0..=n)
        .map(|k| {
            let x = 3.0 * k as f64 / n as f64;
            let (d, d1, d2) = point_segment_distance(x);
            IpcSample { x, d, d_prime: d1, d_second: d2, barrier: -d.ln() }
        })
        .collect()
}

/// One-sided second derivatives of the distance at `x`.
pub fn ipc_second_derivative_jump(x: f64) -> f64 {
    let e = 1e-9;
    point_segment_distance(x + e).2 - point_segment_distance(x - e).2
}

/// Triangle pair analogous to the planar counterexample: a small triangle
/// whose nearest vertex sits at `(x, 1, 0)` above a triangle with edge
/// `(1,0,0)–(2,0,0)`.
pub fn sweep_triangles(x: f64) -> ([Vec3; 3], [Vec3; 3]) {
    (
        [Vec3::new(x, 1.0, 0.0), Vec3::new(x - 0.2, 1.3, 0.1), Vec3::new(x + 0.2, 1.3, -0.1)],
        [Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.5, -0.8, 0.0)],
    )
}

/// Second derivative of the pair potential as the first triangle
/// translates along `x`, from the analytic Hessian.
pub fn sweep_second_derivative(x: f64) -> f64 {
    let (ti, tj) = sweep_triangles(x);
    let sol = pair_potential(&ti, &tj, true).expect("sweep triangles are disjoint");
    let mut h = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            h += sol.hess[(3 * a, 3 * b)];
        }
    }
    h
}

/// Pair-potential value along the same sweep.
pub fn sweep_value(x: f64) -> f64 {
    let (ti, tj) = sweep_triangles(x);
    pair_potential(&ti, &tj, false).expect("sweep triangles are disjoint").value
}

/// Two `n × n` unit-cell plates stacked face to face at `gap`.
pub fn uniform_grid_scene(n: usize, gap: f64) -> Vec<TriMeshBody> {
    let plate = || primitives::grid_plate(n, n, 1.0, 1.0).expect("positive grid");
    vec![
        plate().with_pose(Pose::from_translation(Vec3::zeros())),
        plate().with_pose(Pose::from_translation(Vec3::new(0.0, 0.0, gap))),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityRow {
    pub n: usize,
    pub triangles: usize,
    pub counts: InteractionCounts,
}

impl ComplexityRow {
    pub fn terms(&self) -> usize {
        self.counts.exact + self.counts.centered
    }
}

/// Interaction counts of the stacked-plate scene for each `n`.
pub fn uniform_grid_experiment(ns: &[usize], gap: f64, epsilon: f64) -> Vec<ComplexityRow> {
    ns.iter()
        .map(|&n| {
            let bodies = uniform_grid_scene(n, gap);
            let state = SystemState::from_bodies(&bodies);
            let trees = build_trees(&bodies, epsilon).expect("plates are non-empty");
            let chart = BodyChart::new(&bodies, &state);
            ComplexityRow { n, triangles: bodies.iter().map(|b| b.triangle_count()).sum(), counts: count_interactions(&bodies, &state, &trees, &chart) }
        })
        .collect()
}

/// Fifteen balls racked in a triangle (rows of 1..5) plus a cue ball, each
/// a UV sphere with `slices × stacks` cells, neighbouring balls `gap` apart.
pub fn billiards_rack(slices: usize, stacks: usize, radius: f64, gap: f64) -> Vec<TriMeshBody> {
    let pitch = 2.0 * radius + gap;
    let mut bodies = Vec::with_capacity(16);
    for row in 0..5 {
        for k in 0..=row {
            let x = row as f64 * pitch * (3.0f64).sqrt() / 2.0;
            let y = (k as f64 - row as f64 / 2.0) * pitch;
            bodies.push(primitives::uv_sphere(radius, slices, stacks, 1.0).expect("valid sphere").with_pose(Pose::from_translation(Vec3::new(x, y, 0.0))));
        }
    }
    bodies.push(primitives::uv_sphere(radius, slices, stacks, 1.0).expect("valid sphere").with_pose(Pose::from_translation(Vec3::new(-4.0 * pitch, 0.0, 0.0))));
    bodies
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinementRow {
    pub triangles: usize,
    pub counts: InteractionCounts,
    pub eval_seconds: f64,
}

/// Interaction counts and the best-of-`repeats` wall time of one full
/// value–gradient–Hessian evaluation of the rack at each resolution.
pub fn billiards_refinement(resolutions: &[(usize, usize)], repeats: usize) -> Vec<RefinementRow> {
    resolutions
        .iter()
        .map(|&(slices, stacks)| {
            let bodies = billiards_rack(slices, stacks, 0.5, 0.02);
            let state = SystemState::from_bodies(&bodies);
            let trees = build_trees(&bodies, crate::bsh::DEFAULT_EPSILON).expect("non-empty");
            let chart = BodyChart::new(&bodies, &state);
            let mut best = f64::INFINITY;
            let mut counts = InteractionCounts::default();
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let e = total_potential(&bodies, &state, &trees, &chart, EvalOptions::new(Derivs::Hessian));
                best = best.min(start.elapsed().as_secs_f64());
                counts = e.counts;
                assert!(e.potential.is_finite() && chart.dof_count() > 0);
            }
            RefinementRow { triangles: bodies.iter().map(|b| b.triangle_count()).sum(), counts, eval_seconds: best }
        })
        .collect()
}
