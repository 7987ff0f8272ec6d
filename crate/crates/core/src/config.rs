//! TOML scene and task configuration.
//!
//! One file describes the bodies, stepping parameters, an optional task and
//! the optimizer. Unknown keys are rejected; mesh paths are relative to the
//! file's directory.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::bsh::{BshError, DEFAULT_EPSILON};
use crate::contact::{Backend, ContactModel, DEFAULT_BASELINE_DELTA};
use crate::friction::FrictionParams;
use crate::geometry::{primitives, GeometryError, Pose, TriMeshBody, Vec3};
use crate::stepper::{PdControl, StepParams, DEFAULT_MAX_NEWTON, DEFAULT_NEWTON_TOL};
use crate::trajopt::{AdamConfig, Decision, Scenario, Target, Task, DEFAULT_EPS_TARGET};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("body {body}: {source}")]
    Mesh {
        body: usize,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Tree(#[from] BshError),
    #[error("config has no [task] section")]
    NoTask,
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub seed: u64,
    pub dt: f64,
    pub horizon: usize,
    /// Contact weight `μ`.
    pub mu: f64,
    #[serde(default)]
    pub gravity: [f64; 3],
    /// BSH blend margin.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default = "default_baseline_delta")]
    pub baseline_delta: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_max_newton")]
    pub max_newton: usize,
    pub friction: Option<FrictionConfig>,
    pub bodies: Vec<BodyConfig>,
    #[serde(default)]
    pub controls: Vec<ControlConfig>,
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_backend() -> Backend {
    Backend::Bsh
}
fn default_baseline_delta() -> f64 {
    DEFAULT_BASELINE_DELTA
}
fn default_newton_tol() -> f64 {
    DEFAULT_NEWTON_TOL
}
fn default_max_newton() -> usize {
    DEFAULT_MAX_NEWTON
}
fn default_mass() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrictionConfig {
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    #[serde(default)]
    pub name: String,
    pub mesh: MeshSpec,
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default)]
    pub fixed: bool,
    /// World position of the vertex mean.
    #[serde(default)]
    pub translation: [f64; 3],
    /// Rotation vector.
    #[serde(default)]
    pub rotation: [f64; 3],
    /// Generalized velocity `[v; ω_coords]` at frame 0.
    #[serde(default)]
    pub velocity: [f64; 6],
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    Obj { path: PathBuf },
    Cube { size: f64 },
    Cuboid { half: [f64; 3] },
    Icosphere { radius: f64, subdivisions: u32 },
    UvSphere { radius: f64, slices: usize, stacks: usize },
    GridPlate { nx: usize, ny: usize, cell: f64 },
    Tetrahedron { radius: f64 },
    Octahedron { radius: f64 },
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub body: usize,
    pub coords: Vec<usize>,
    pub kp: f64,
    pub kd: f64,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    InitialPlanar,
    PdTargets,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub decision: DecisionKind,
    /// Body whose initial state is decided (`initial_planar`).
    pub body: Option<usize>,
    pub targets: Vec<TargetConfig>,
    #[serde(default = "default_eps_target")]
    pub eps_target: f64,
    #[serde(default)]
    pub per_frame: bool,
    /// Receding-horizon window for `pd_targets`; `0` optimizes the whole
    /// horizon at once.
    #[serde(default)]
    pub receding: usize,
    /// Uniform jitter of the initial decision in `[−j, j]`, drawn from `seed`.
    #[serde(default)]
    pub init_jitter: f64,
}

fn default_eps_target() -> f64 {
    DEFAULT_EPS_TARGET
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub body: usize,
    pub position: [f64; 3],
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { alpha: a.alpha, beta1: a.beta1, beta2: a.beta2, epsilon: a.epsilon, iterations: a.iterations }
    }
}

impl From<OptimizerConfig> for AdamConfig {
    fn from(o: OptimizerConfig) -> Self {
        AdamConfig { alpha: o.alpha, beta1: o.beta1, beta2: o.beta2, epsilon: o.epsilon, iterations: o.iterations }
    }
}

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Parses and validates; `origin` prefixes error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(invalid(field, format!("must be positive, got {v}"))) };
        positive("dt", self.dt)?;
        positive("mu", self.mu)?;
        positive("epsilon", self.epsilon)?;
        positive("baseline_delta", self.baseline_delta)?;
        positive("newton_tol", self.newton_tol)?;
        if self.bodies.is_empty() {
            return Err(invalid("bodies", "at least one body is required"));
        }
        if let Some(f) = &self.friction {
            if !(f.lambda >= 0.0) {
                return Err(invalid("friction.lambda", format!("must be non-negative, got {}", f.lambda)));
            }
            positive("friction.epsilon", f.epsilon)?;
        }
        for (i, b) in self.bodies.iter().enumerate() {
            positive(&format!("bodies[{i}].mass"), b.mass)?;
        }
        let n = self.bodies.len();
        for (i, c) in self.controls.iter().enumerate() {
            if c.body >= n || self.bodies[c.body].fixed {
                return Err(invalid(format!("controls[{i}].body"), format!("{} is not a free body", c.body)));
            }
            if c.coords.is_empty() || c.coords.iter().any(|&k| k >= 6) {
                return Err(invalid(format!("controls[{i}].coords"), "coordinates must be in 0..6"));
            }
            positive(&format!("controls[{i}].kp"), c.kp)?;
            if !(c.kd >= 0.0) {
                return Err(invalid(format!("controls[{i}].kd"), "must be non-negative"));
            }
        }
        if let Some(t) = &self.task {
            positive("task.eps_target", t.eps_target)?;
            if !(t.init_jitter >= 0.0) {
                return Err(invalid("task.init_jitter", "must be non-negative"));
            }
            for (i, tg) in t.targets.iter().enumerate() {
                if tg.body >= n {
                    return Err(invalid(format!("task.targets[{i}].body"), format!("no body {}", tg.body)));
                }
            }
            match t.decision {
                DecisionKind::InitialPlanar => match t.body {
                    Some(b) if b < n && !self.bodies[b].fixed => {}
                    _ => return Err(invalid("task.body", "initial_planar needs a free body")),
                },
                DecisionKind::PdTargets => {
                    if self.controls.is_empty() {
                        return Err(invalid("task.decision", "pd_targets needs at least one [[controls]] entry"));
                    }
                }
            }
            if t.receding > 0 && t.decision != DecisionKind::PdTargets {
                return Err(invalid("task.receding", "receding horizon needs pd_targets"));
            }
            positive("optimizer.alpha", self.optimizer.alpha)?;
        }
        Ok(())
    }

    pub fn build_bodies(&self) -> Result<Vec<TriMeshBody>, ConfigError> {
        self.bodies
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let m = b.mass;
                let mesh = match &b.mesh {
                    MeshSpec::Obj { path } => TriMeshBody::from_obj_file(&self.base_dir.join(path), m),
                    MeshSpec::Cube { size } => primitives::cube(*size, m),
                    MeshSpec::Cuboid { half } => primitives::cuboid(vec3(*half), m),
                    MeshSpec::Icosphere { radius, subdivisions } => primitives::icosphere(*radius, *subdivisions, m),
                    MeshSpec::UvSphere { radius, slices, stacks } => primitives::uv_sphere(*radius, *slices, *stacks, m),
                    MeshSpec::GridPlate { nx, ny, cell } => primitives::grid_plate(*nx, *ny, *cell, m),
                    MeshSpec::Tetrahedron { radius } => primitives::tetrahedron(*radius, m),
                    MeshSpec::Octahedron { radius } => primitives::octahedron(*radius, m),
                }
                .map_err(|source| ConfigError::Mesh { body: i, source })?;
                Ok(mesh.with_fixed(b.fixed).with_pose(Pose::new(vec3(b.translation), vec3(b.rotation))))
            })
            .collect()
    }

    pub fn step_params(&self) -> StepParams {
        let mut p = StepParams::new(self.dt, self.mu);
        p.gravity = vec3(self.gravity);
        p.friction = self.friction.map(|f| FrictionParams { lambda: f.lambda, epsilon: f.epsilon });
        p.newton_tol = self.newton_tol;
        p.max_newton = self.max_newton;
        p
    }

    /// The scenario with `backend` in place of the configured one.
    pub fn scenario(&self, backend: Backend) -> Result<Scenario, ConfigError> {
        let bodies = self.build_bodies()?;
        let model = ContactModel::new(&bodies, backend, self.epsilon)?.with_baseline_delta(self.baseline_delta);
        let velocities = self.bodies.iter().map(|b| if b.fixed { [0.0; 6] } else { b.velocity }).collect();
        let controls = self.controls.iter().map(|c| PdControl { body: c.body, coords: c.coords.clone(), kp: c.kp, kd: c.kd }).collect();
        Ok(Scenario { bodies, model, params: self.step_params(), controls, velocities, horizon: self.horizon })
    }

    pub fn task(&self, backend: Backend) -> Result<Task, ConfigError> {
        let t = self.task.as_ref().ok_or(ConfigError::NoTask)?;
        let decision = match t.decision {
            DecisionKind::InitialPlanar => Decision::InitialPlanar { body: t.body.expect("validated") },
            DecisionKind::PdTargets => Decision::PdTargets,
        };
        Ok(Task {
            scenario: self.scenario(backend)?,
            decision,
            targets: t.targets.iter().map(|tg| Target { body: tg.body, position: vec3(tg.position) }).collect(),
            eps_target: t.eps_target,
            per_frame: t.per_frame,
        })
    }

    /// Initial decision: the configured state plus seeded jitter.
    pub fn initial_decision(&self, task: &Task, seed: u64) -> DVector<f64> {
        let mut u = task.default_decision();
        let jitter = self.task.as_ref().map_or(0.0, |t| t.init_jitter);
        if jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            u.iter_mut().for_each(|x| *x += rng.gen_range(-jitter..=jitter));
        }
        u
    }

    pub fn adam(&self) -> AdamConfig {
        self.optimizer.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DROP: &str = r#"
        dt = 0.04
        horizon = 3
        mu = 1e-6
        gravity = [0.0, 0.0, -9.8]

        [[bodies]]
        mesh = { kind = "grid_plate", nx = 2, ny = 2, cell = 1.0 }
        fixed = true

        [[bodies]]
        mesh = { kind = "icosphere", radius = 0.3, subdivisions = 0 }
        translation = [0.0, 0.0, 0.5]
    "#;

    #[test]
    fn parses_a_minimal_scene() {
        let cfg = SceneConfig::parse(DROP, "drop.toml").unwrap();
        assert_eq!(cfg.bodies.len(), 2);
        assert_eq!(cfg.backend, Backend::Bsh);
        assert_eq!(cfg.epsilon, DEFAULT_EPSILON);
        let s = cfg.scenario(Backend::Brute).unwrap();
        assert!(s.bodies[0].fixed);
        assert_eq!(s.bodies[1].pose.translation, Vec3::new(0.0, 0.0, 0.5));
        assert_eq!(s.params.gravity.z, -9.8);
        assert!(matches!(cfg.task(Backend::Bsh), Err(ConfigError::NoTask)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = SceneConfig::parse(&format!("{DROP}\nspeed = 3\n"), "x.toml").unwrap_err();
        assert!(e.to_string().contains("speed"), "{e}");
        let bad_mesh = DROP.replace("subdivisions = 0", "subdivisions = 0, colour = 1");
        assert!(SceneConfig::parse(&bad_mesh, "x.toml").is_err());
    }

    #[test]
    fn physical_parameters_must_be_positive() {
        let e = SceneConfig::parse(&DROP.replace("dt = 0.04", "dt = -0.04"), "x.toml").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref field, .. } if field == "dt"));
    }

    #[test]
    fn missing_mesh_names_the_path() {
        let text = DROP.replace(r#"{ kind = "icosphere", radius = 0.3, subdivisions = 0 }"#, r#"{ kind = "obj", path = "nowhere/ball.obj" }"#);
        let cfg = SceneConfig::parse(&text, "x.toml").unwrap();
        let e = cfg.build_bodies().unwrap_err();
        assert!(e.to_string().contains("nowhere/ball.obj"), "{e}");
    }

    #[test]
    fn task_and_jitter() {
        let text = format!(
            "{DROP}\n[task]\ndecision = \"initial_planar\"\nbody = 1\ntargets = [{{ body = 1, position = [1.0, 0.0, 0.5] }}]\ninit_jitter = 0.1\n"
        );
        let cfg = SceneConfig::parse(&text, "x.toml").unwrap();
        let task = cfg.task(Backend::Bsh).unwrap();
        assert_eq!(task.decision_len(), 4);
        let a = cfg.initial_decision(&task, 3);
        assert_eq!(a, cfg.initial_decision(&task, 3));
        assert_ne!(a, cfg.initial_decision(&task, 4));
        assert!((a - task.default_decision()).amax() <= 0.1);
        let no_body = text.replace("body = 1\ntargets", "targets");
        assert!(SceneConfig::parse(&no_body, "x.toml").is_err());
    }
}
