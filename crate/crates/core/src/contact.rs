//! Contact potential backends behind one interface.
//!
//! * [`Backend::Bsh`]: the hierarchical, globally supported potential.
//! * [`Backend::Brute`]: the leaf-blended potential summed over every
//!   inter-body triangle pair, with no hierarchy.
//! * [`Backend::LocalBaseline`]: the clamped-log pair potential over nearby
//!   triangle pairs; exactly zero beyond its support.

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

use crate::blending::BlendSpec;
use crate::bsh::{body_pairs, build_trees, leaf_pair_local, leaf_pairs_where, leaf_points, total_potential, BshError, BshTree, EvalOptions, InteractionCounts};
use crate::eval::{Chart, Derivs, PotentialEval};
use crate::geometry::{SystemState, TriMeshBody, Vec3};
use crate::pair_potential::{clamped_pair_potential, pair_potential};

/// Default support of the clamped baseline barrier, meters.
pub const DEFAULT_BASELINE_DELTA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Bsh,
    Brute,
    LocalBaseline,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Bsh, Backend::Brute, Backend::LocalBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Bsh => "bsh",
            Backend::Brute => "brute",
            Backend::LocalBaseline => "local-baseline",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Backend::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown backend '{s}' (expected bsh, brute or local-baseline)"))
    }
}

/// Potential with the instrumentation counters of the evaluation.
#[derive(Clone, Debug)]
pub struct ContactEval {
    pub potential: PotentialEval,
    pub counts: InteractionCounts,
}

/// A backend bound to a fixed set of bodies.
#[derive(Clone, Debug)]
pub struct ContactModel {
    pub backend: Backend,
    pub epsilon: f64,
    pub baseline_delta: f64,
    trees: Vec<BshTree>,
}

impl ContactModel {
    pub fn new(bodies: &[TriMeshBody], backend: Backend, epsilon: f64) -> Result<Self, BshError> {
        Ok(Self { backend, epsilon, baseline_delta: DEFAULT_BASELINE_DELTA, trees: build_trees(bodies, epsilon)? })
    }

    pub fn with_baseline_delta(mut self, delta: f64) -> Self {
        self.baseline_delta = delta;
        self
    }

    pub fn trees(&self) -> &[BshTree] {
        &self.trees
    }

    pub fn evaluate(&self, bodies: &[TriMeshBody], state: &SystemState, chart: &dyn Chart, derivs: Derivs) -> ContactEval {
        match self.backend {
            Backend::Bsh => {
                let e = total_potential(bodies, state, &self.trees, chart, EvalOptions::new(derivs));
                ContactEval { potential: e.potential, counts: e.counts }
            }
            Backend::Brute => brute_force_potential(bodies, state, chart, derivs, Some(self.epsilon)),
            Backend::LocalBaseline => local_baseline_potential(bodies, state, &self.trees, chart, derivs, self.baseline_delta),
        }
    }
}

fn triangle_sphere(tri: &[Vec3; 3]) -> (Vec3, f64) {
    let c = (tri[0] + tri[1] + tri[2]) / 3.0;
    (c, tri.iter().map(|v| (v - c).norm()).fold(0.0, f64::max))
}

/// Σ over every inter-body triangle pair. With `leaf_blend = Some(ε)` each
/// pair is the leaf-level blend toward the centered form; with `None` it is
/// the raw exact pair potential.
pub fn brute_force_potential(bodies: &[TriMeshBody], state: &SystemState, chart: &dyn Chart, derivs: Derivs, leaf_blend: Option<f64>) -> ContactEval {
    let rows: Vec<(usize, usize, usize)> = body_pairs(bodies.len())
        .into_iter()
        .flat_map(|(a, b)| (0..bodies[a].triangle_count()).map(move |t| (a, b, t)))
        .collect();
    let per_row = crate::par::map(&rows, |&(a, b, ta)| {
        let mut counts = InteractionCounts::default();
        let mut terms = Vec::with_capacity(bodies[b].triangle_count());
        for tb in 0..bodies[b].triangle_count() {
            let (pts, tri_a, tri_b) = leaf_points(bodies, state, a, ta, b, tb);
            let local = match leaf_blend {
                Some(eps) => {
                    let (ca, ra) = triangle_sphere(&tri_a);
                    let (cb, rb) = triangle_sphere(&tri_b);
                    let spec = BlendSpec::for_radii(ra, rb, eps);
                    let le = leaf_pair_local(&tri_a, &tri_b, &ca, &cb, &spec, derivs, true, false);
                    counts += le.counts;
                    le.local
                }
                None => {
                    counts.exact += 1;
                    pair_potential(&tri_a, &tri_b, derivs.hess()).ok().map(|s| crate::blending::DenseEval {
                        value: s.value,
                        grad: nalgebra::DVector::from_column_slice(s.grad.as_slice()),
                        hess: nalgebra::DMatrix::from_column_slice(18, 18, s.hess.as_slice()),
                    })
                }
            };
            terms.push(match local {
                Some(l) => chart.pull_back(&pts, l.value, &l.grad, derivs.hess().then_some(&l.hess), derivs),
                None => PotentialEval::infinite(derivs),
            });
        }
        (PotentialEval::sum(derivs, terms.iter()), counts)
    });
    let mut counts = InteractionCounts::default();
    for (_, c) in &per_row {
        counts += *c;
    }
    ContactEval { potential: PotentialEval::sum(derivs, per_row.iter().map(|(e, _)| e)), counts }
}

/// Σ of the clamped-log pair potential over triangle pairs whose bounding
/// spheres are closer than the barrier's support gap.
pub fn local_baseline_potential(bodies: &[TriMeshBody], state: &SystemState, trees: &[BshTree], chart: &dyn Chart, derivs: Derivs, delta: f64) -> ContactEval {
    let cutoff = 2.0 * delta / (1.0 - delta);
    let pairs = body_pairs(bodies.len());
    let per_pair = crate::par::map(&pairs, |&(a, b)| {
        let near = leaf_pairs_where(state, &trees[a], &trees[b], |dist, r_sum| dist - r_sum < cutoff);
        let mut counts = InteractionCounts::default();
        let terms: Vec<PotentialEval> = near
            .iter()
            .map(|&(ta, tb)| {
                let (pts, tri_a, tri_b) = leaf_points(bodies, state, a, ta, b, tb);
                counts.exact += 1;
                match clamped_pair_potential(&tri_a, &tri_b, delta, derivs.hess()) {
                    Ok(s) => {
                        let g = nalgebra::DVector::from_column_slice(s.grad.as_slice());
                        let h = nalgebra::DMatrix::from_column_slice(18, 18, s.hess.as_slice());
                        chart.pull_back(&pts, s.value, &g, derivs.hess().then_some(&h), derivs)
                    }
                    Err(_) => PotentialEval::infinite(derivs),
                }
            })
            .collect();
        (PotentialEval::sum(derivs, terms.iter()), counts)
    });
    let mut counts = InteractionCounts::default();
    for (_, c) in &per_pair {
        counts += *c;
    }
    ContactEval { potential: PotentialEval::sum(derivs, per_pair.iter().map(|(e, _)| e)), counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{BodyChart, VertexChart};
    use crate::geometry::{primitives, Pose};

    #[test]
    fn backend_names_round_trip() {
        for b in Backend::ALL {
            assert_eq!(b.name().parse::<Backend>().unwrap(), b);
        }
        assert!("ipc".parse::<Backend>().is_err());
    }

    #[test]
    fn brute_counts_every_pair() {
        let bodies = vec![
            primitives::tetrahedron(0.5, 1.0).unwrap(),
            primitives::tetrahedron(0.5, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(3.0, 0.0, 0.0))),
        ];
        let state = SystemState::from_bodies(&bodies);
        let chart = VertexChart::new(&bodies);
        let e = brute_force_potential(&bodies, &state, &chart, Derivs::Value, None);
        assert_eq!(e.counts.exact, 16);
    }

    #[test]
    fn baseline_vanishes_far_away() {
        let bodies = vec![
            primitives::cube(1.0, 1.0).unwrap(),
            primitives::cube(1.0, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(5.0, 0.0, 0.0))),
        ];
        let state = SystemState::from_bodies(&bodies);
        let chart = BodyChart::new(&bodies, &state);
        let m = ContactModel::new(&bodies, Backend::LocalBaseline, 0.1).unwrap();
        let e = m.evaluate(&bodies, &state, &chart, Derivs::Gradient);
        assert_eq!(e.potential.value, 0.0);
        assert_eq!(e.counts.exact, 0);
        assert!(e.potential.dense_grad(chart.dof_count()).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn baseline_is_a_barrier_near_contact() {
        let at = |gap: f64| {
            let bodies = vec![
                primitives::cube(1.0, 1.0).unwrap(),
                primitives::cube(1.0, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(1.0 + gap, 0.0, 0.0))),
            ];
            let state = SystemState::from_bodies(&bodies);
            let chart = BodyChart::new(&bodies, &state);
            ContactModel::new(&bodies, Backend::LocalBaseline, 0.1).unwrap().evaluate(&bodies, &state, &chart, Derivs::Value).potential.value
        };
        assert!(at(1e-3) > at(3e-3) && at(3e-3) > 0.0);
    }
}
