//! Parallel vs sequential body-pair evaluation, and BSH vs brute force.
//!
//! `cargo bench -p bsh-contact` measures both maps in the default build;
//! with `--no-default-features` the "parallel" map is sequential too.

use bsh_contact::bsh::{body_pairs, build_trees, process_pair, total_potential, EvalOptions, DEFAULT_EPSILON};
use bsh_contact::contact::brute_force_potential;
use bsh_contact::eval::{BodyChart, Derivs};
use bsh_contact::geometry::SystemState;
use bsh_contact::{oracle, par};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn pair_maps(c: &mut Criterion) {
    let bodies = oracle::billiards_rack(6, 7, 0.5, 0.02);
    let state = SystemState::from_bodies(&bodies);
    let trees = build_trees(&bodies, DEFAULT_EPSILON).unwrap();
    let chart = BodyChart::new(&bodies, &state);
    let pairs = body_pairs(bodies.len());
    let opts = EvalOptions::new(Derivs::Hessian);
    let eval = |&(a, b): &(usize, usize)| process_pair(&bodies, &state, &chart, &trees[a], &trees[b], opts).potential.value;
    let mut g = c.benchmark_group("rack_pairs");
    g.sample_size(10);
    g.bench_function(if par::is_parallel() { "parallel" } else { "parallel_disabled" }, |b| b.iter(|| black_box(par::map(&pairs, eval))));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_seq(&pairs, eval))));
    g.finish();
}

fn backends(c: &mut Criterion) {
    let bodies = oracle::uniform_grid_scene(8, 0.1);
    let state = SystemState::from_bodies(&bodies);
    let trees = build_trees(&bodies, DEFAULT_EPSILON).unwrap();
    let chart = BodyChart::new(&bodies, &state);
    let mut g = c.benchmark_group("plates_8x8_gradient");
    g.sample_size(10);
    g.bench_function("bsh", |b| b.iter(|| black_box(total_potential(&bodies, &state, &trees, &chart, EvalOptions::new(Derivs::Gradient)).potential.value)));
    g.bench_function("brute", |b| b.iter(|| black_box(brute_force_potential(&bodies, &state, &chart, Derivs::Gradient, None).potential.value)));
    g.finish();
}

criterion_group!(benches, pair_maps, backends);
criterion_main!(benches);
