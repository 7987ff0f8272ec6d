//! Subcommand bodies. Each returns a [`Failure`] carrying its exit class.

use std::path::{Path, PathBuf};

use bsh_contact::config::{ConfigError, SceneConfig};
use bsh_contact::contact::Backend;
use bsh_contact::geometry::Pose;
use bsh_contact::suites::{self, SuiteReport};
use bsh_contact::trajopt::{self, AdamConfig, Trajectory};

use crate::table::{cell, Table};
use crate::{Failure, Suite};

pub use bsh_contact::suites::DEFAULT_SEED;

pub struct RunOptions {
    pub config: PathBuf,
    pub backend: Option<Backend>,
    pub seed: Option<u64>,
    pub timing: bool,
}

impl RunOptions {
    fn load(&self) -> Result<(SceneConfig, Backend, u64), Failure> {
        let cfg = SceneConfig::load(&self.config).map_err(usage)?;
        let backend = self.backend.unwrap_or(cfg.backend);
        let seed = self.seed.unwrap_or(cfg.seed);
        Ok((cfg, backend, seed))
    }

    fn seconds(&self, s: f64) -> f64 {
        if self.timing {
            s
        } else {
            0.0
        }
    }
}

fn usage(e: ConfigError) -> Failure {
    Failure::Usage(e.to_string())
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Usage(format!("cannot write {}: {e}", path.display()))
}

fn write(table: &Table, path: &Path) -> Result<(), Failure> {
    table.write(path).map_err(io_failure(path))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(io_failure(dir))
}

const POSE_COLUMNS: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];

fn pose_header(bodies: usize) -> Vec<String> {
    (0..bodies).flat_map(|b| POSE_COLUMNS.iter().map(move |c| format!("b{b}_{c}"))).collect()
}

fn pose_cells(poses: &[Pose]) -> impl Iterator<Item = String> + '_ {
    poses.iter().flat_map(|p| p.to_array().map(cell))
}

pub fn simulate(opts: &RunOptions, out: &Path) -> Result<(), Failure> {
    let (cfg, backend, _) = opts.load()?;
    let scenario = cfg.scenario(backend).map_err(usage)?;
    let frames = suites::simulate_scenario(&scenario).map_err(|e| Failure::Failed(format!("simulation failed: {e}")))?;
    let mut header = vec!["frame".to_string()];
    header.extend(pose_header(scenario.bodies.len()));
    header.extend(["min_pair_distance", "potential", "eval_seconds", "exact_terms", "centered_terms", "newton_iters"].map(String::from));
    let mut t = Table::new(header);
    for f in &frames {
        let mut row = vec![cell(f.frame)];
        row.extend(pose_cells(&f.poses));
        row.extend([
            cell(f.min_distance),
            cell(f.potential),
            cell(opts.seconds(f.eval_seconds)),
            cell(f.exact_terms),
            cell(f.centered_terms),
            cell(f.newton_iters),
        ]);
        t.push(row);
    }
    write(&t, out)?;
    let min = frames.iter().map(|f| f.min_distance).fold(f64::INFINITY, f64::min);
    println!("{} frames with backend {backend}, min pair distance {min:.6e}, wrote {}", frames.len(), out.display());
    Ok(())
}

fn trajectory_table(traj: &Trajectory) -> Table {
    let bodies = traj.frames.first().map_or(0, Vec::len);
    let mut header = vec!["frame".to_string()];
    header.extend(pose_header(bodies));
    let mut t = Table::new(header);
    for (k, poses) in traj.frames.iter().enumerate() {
        let mut row = vec![cell(k)];
        row.extend(pose_cells(poses));
        t.push(row);
    }
    t
}

fn decision_table(u: &[f64]) -> Table {
    let mut t = Table::new(["index", "value"]);
    for (i, v) in u.iter().enumerate() {
        t.push(vec![cell(i), cell(v)]);
    }
    t
}

pub fn optimize(opts: &RunOptions, out: &Path, iterations: Option<usize>) -> Result<(), Failure> {
    let (cfg, backend, seed) = opts.load()?;
    let task = cfg.task(backend).map_err(usage)?;
    let mut adam: AdamConfig = cfg.adam();
    if let Some(n) = iterations {
        adam.iterations = n;
    }
    create_dir(out)?;
    let rollout_failed = |e: trajopt::RolloutError| Failure::Failed(format!("optimization failed: {e}"));
    let window = cfg.task.as_ref().map_or(0, |t| t.receding);
    let (u, traj) = if window > 0 {
        let (applied, traj) = trajopt::receding_horizon(&task, window, &adam).map_err(rollout_failed)?;
        println!("receding horizon, window {window}: final loss {:.6e}", traj.loss);
        (applied, traj)
    } else {
        let u0 = cfg.initial_decision(&task, seed);
        let mut conv = Table::new(["iteration", "loss", "grad_norm", "wall_seconds"]);
        let (st, traj) = trajopt::optimize(&task, u0, &adam, |r| {
            conv.push(vec![cell(r.iteration), cell(r.loss), cell(r.grad_norm), cell(opts.seconds(r.wall_seconds))]);
        })
        .map_err(rollout_failed)?;
        write(&conv, &out.join("convergence.csv"))?;
        let first = st.loss_history.first().copied().unwrap_or(traj.loss);
        println!("{} iterations with backend {backend}: loss {first:.6e} -> final {:.6e}", conv.len(), traj.loss);
        (st.u.as_slice().to_vec(), traj)
    };
    write(&decision_table(&u), &out.join("decision.csv"))?;
    write(&trajectory_table(&traj), &out.join("trajectory.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Sample counts per suite: full size, or reduced with `quick`.
fn run_suite(suite: Suite, seed: u64, quick: bool, out: &Path) -> Result<Vec<SuiteReport>, Failure> {
    let pick = |full: usize, small: usize| if quick { small } else { full };
    Ok(match suite {
        Suite::Gradients => vec![
            suites::smoothness(seed, pick(200, 20), pick(50, 5)),
            suites::leaf_force(seed, pick(500, 50)),
            suites::step_jacobians(),
        ],
        Suite::Properties => vec![
            suites::barrier(seed, pick(1000, 100)),
            suites::non_prehensile(seed, pick(200, 20)),
            suites::bsh_equivalence(seed, pick(20, 3)),
            suites::penetration_free(pick(200, 30)),
        ],
        Suite::Complexity => {
            let (grid, refine): (&[usize], &[(usize, usize)]) = if quick { (&[4, 8], &[(4, 5), (6, 7)]) } else { (&[8, 16, 32, 64], &[(4, 5), (14, 15)]) };
            let (report, rows, refinement) = suites::complexity(grid, refine);
            let mut g = Table::new(["n", "triangles", "exact_terms", "centered_terms", "total_terms"]);
            for r in &rows {
                g.push(vec![cell(r.n), cell(r.triangles), cell(r.counts.exact), cell(r.counts.centered), cell(r.terms())]);
            }
            write(&g, &out.join("complexity_grid.csv"))?;
            let mut f = Table::new(["triangles", "exact_terms", "centered_terms", "eval_seconds"]);
            for r in &refinement {
                f.push(vec![cell(r.triangles), cell(r.counts.exact), cell(r.counts.centered), cell(r.eval_seconds)]);
            }
            write(&f, &out.join("complexity_refinement.csv"))?;
            vec![report]
        }
        Suite::IpcDemo => {
            let (report, curve) = suites::ipc_demo(pick(300, 60));
            let mut c = Table::new(["x", "d", "d_prime", "d_second", "barrier"]);
            for s in &curve {
                c.push(vec![cell(s.x), cell(s.d), cell(s.d_prime), cell(s.d_second), cell(s.barrier)]);
            }
            write(&c, &out.join("ipc_curve.csv"))?;
            vec![report]
        }
        Suite::TrajoptAb => {
            let mut cfg = AdamConfig::default();
            cfg.iterations = pick(cfg.iterations, 20);
            let (report, runs) = suites::trajopt_ab(&cfg);
            let mut c = Table::new(["backend", "iteration", "loss", "grad_norm", "wall_seconds"]);
            for r in &runs {
                for (i, (l, (g, w))) in r.loss_history.iter().zip(r.grad_norm_history.iter().zip(&r.wall_seconds)).enumerate() {
                    c.push(vec![cell(r.backend), cell(i), cell(l), cell(g), cell(w)]);
                }
            }
            write(&c, &out.join("trajopt_ab.csv"))?;
            vec![report]
        }
    })
}

pub fn verify(suite: Suite, out: &Path, seed: u64, quick: bool) -> Result<(), Failure> {
    create_dir(out)?;
    let reports = run_suite(suite, seed, quick, out)?;
    let mut t = Table::new(["suite", "check", "value", "threshold", "passed", "detail"]);
    for r in &reports {
        println!("{}", r.line());
        for c in &r.checks {
            t.push(vec![cell(r.name), cell(c.name), cell(c.value), cell(c.threshold), cell(c.passed), c.detail.clone()]);
        }
    }
    write(&t, &out.join("report.csv"))?;
    let failed: Vec<String> = reports.iter().flat_map(|r| r.failed_checks().map(move |c| format!("{}/{}", r.name, c.name))).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}
