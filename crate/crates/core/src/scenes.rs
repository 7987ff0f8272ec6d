//! Canonical desk-scale scenes shared by tests, the acceptance suite and the
//! CLI presets.

use crate::contact::{Backend, ContactModel};
use crate::friction::FrictionParams;
use crate::geometry::{primitives, GeometryError, Pose, TriMeshBody, Vec3};
use crate::stepper::{PdControl, StepParams};
use crate::trajopt::{Decision, Scenario, Target, Task, DEFAULT_EPS_TARGET};

pub const DT: f64 = 0.04;
pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.8);
pub const MU_BILLIARDS: f64 = 1e-7;
pub const MU_PUSH: f64 = 1e-6;
/// Friction weight per unit barrier stiffness in the drop scenes: the
/// tangential-to-normal force ratio is this times the sliding speed (s/m).
pub const DROP_FRICTION_RATIO: f64 = 5.0;

/// 4 m × 4 m fixed plate centered at the origin in `z = 0`.
fn plate() -> Result<TriMeshBody, GeometryError> {
    Ok(primitives::grid_plate(4, 4, 1.0, 1.0)?.with_fixed(true).with_pose(Pose::identity()))
}

fn model(bodies: &[TriMeshBody], backend: Backend) -> ContactModel {
    ContactModel::new(bodies, backend, crate::bsh::DEFAULT_EPSILON).expect("preset meshes are valid")
}

/// Icosphere of radius 0.5 m dropped from 1 m onto the plate.
pub fn ball_drop() -> Result<Vec<TriMeshBody>, GeometryError> {
    Ok(vec![
        plate()?,
        primitives::icosphere(0.5, 1, 1.0)?.with_pose(Pose::new(Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.1, 0.2, 0.0))),
    ])
}

/// Two 0.5 m cubes stacked over a fixed plate, released from small gaps.
pub fn stack() -> Result<Vec<TriMeshBody>, GeometryError> {
    let plate = plate()?;
    let lower = primitives::cube(0.5, 1.0)?.with_pose(Pose::from_translation(Vec3::new(0.0, 0.0, 0.3)));
    let upper = primitives::cube(0.5, 1.0)?.with_pose(Pose::new(Vec3::new(0.05, 0.0, 0.9), Vec3::new(0.0, 0.0, 0.2)));
    Ok(vec![plate, lower, upper])
}

/// Free-fall scenario over `horizon` steps with gravity and friction on.
pub fn drop_scenario(bodies: Vec<TriMeshBody>, backend: Backend, horizon: usize) -> Scenario {
    let mut params = StepParams::new(DT, MU_PUSH);
    params.gravity = GRAVITY;
    params.friction = Some(FrictionParams { lambda: DROP_FRICTION_RATIO * MU_PUSH, epsilon: crate::bsh::DEFAULT_EPSILON });
    let velocities = vec![[0.0; 6]; bodies.len()];
    Scenario { model: model(&bodies, backend), bodies, params, controls: Vec::new(), velocities, horizon }
}

/// Three coarse balls in the plane `z = 0` with no gravity: a resting cue
/// ball at `x = −2`, an object ball at the origin and a bystander off to the
/// side. The decision is the cue ball's initial planar position and velocity;
/// the loss asks the object ball to end near `(0.8, 0)`.
pub fn billiards_mini(backend: Backend) -> Result<Task, GeometryError> {
    let ball = |x: f64, y: f64| primitives::icosphere(0.25, 0, 1.0).map(|b| b.with_pose(Pose::from_translation(Vec3::new(x, y, 0.0))));
    let bodies = vec![ball(-2.0, 0.0)?, ball(0.0, 0.0)?, ball(0.0, 1.5)?];
    let horizon = 25;
    let scenario = Scenario {
        model: model(&bodies, backend),
        params: StepParams::new(DT, MU_BILLIARDS),
        controls: Vec::new(),
        velocities: vec![[0.0; 6]; bodies.len()],
        bodies,
        horizon,
    };
    Ok(Task {
        scenario,
        decision: Decision::InitialPlanar { body: 0 },
        targets: vec![Target { body: 1, position: Vec3::new(0.8, 0.0, 0.0) }],
        eps_target: DEFAULT_EPS_TARGET,
        per_frame: false,
    })
}

/// A PD-driven cube pusher behind a free box on a frictionless plane, no
/// gravity. The decision is the pusher's planar target per step.
pub fn push_mini(backend: Backend, horizon: usize) -> Result<Task, GeometryError> {
    let pusher = primitives::cube(0.3, 1.0)?.with_pose(Pose::from_translation(Vec3::new(-1.0, 0.0, 0.0)));
    let object = primitives::cube(0.4, 1.0)?.with_pose(Pose::from_translation(Vec3::new(0.0, 0.0, 0.0)));
    let bodies = vec![pusher, object];
    let scenario = Scenario {
        model: model(&bodies, backend),
        params: StepParams::new(DT, MU_PUSH),
        controls: vec![PdControl { body: 0, coords: vec![0, 1], kp: 50.0, kd: 5.0 }],
        velocities: vec![[0.0; 6]; bodies.len()],
        bodies,
        horizon,
    };
    Ok(Task {
        scenario,
        decision: Decision::PdTargets,
        targets: vec![Target { body: 1, position: Vec3::new(0.5, 0.0, 0.0) }],
        eps_target: DEFAULT_EPS_TARGET,
        per_frame: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        assert_eq!(ball_drop().unwrap().len(), 2);
        assert_eq!(stack().unwrap().len(), 3);
        let t = billiards_mini(Backend::Bsh).unwrap();
        assert_eq!(t.decision_len(), 4);
        assert_eq!(push_mini(Backend::Bsh, 5).unwrap().decision_len(), 10);
    }
}
