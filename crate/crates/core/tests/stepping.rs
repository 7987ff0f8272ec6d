use bsh_contact::contact::Backend;
use bsh_contact::friction::FrictionParams;
use bsh_contact::geometry::{primitives, Pose, Vec3};
use bsh_contact::scenes;
use bsh_contact::suites::{simulate, simulate_scenario, swept_clear};

#[test]
fn ball_drop_lands_and_stays_separated() {
    let s = scenes::drop_scenario(scenes::ball_drop().unwrap(), Backend::Bsh, 40);
    let frames = simulate_scenario(&s).unwrap();
    let mut from = s.initial_poses();
    for f in &frames {
        assert!(f.min_distance > 0.0, "frame {}", f.frame);
        assert!(swept_clear(&s.bodies, &from, &f.poses), "frame {}", f.frame);
        from = f.poses.clone();
    }
    let z = frames.last().unwrap().poses[1].translation.z;
    assert!((0.4..0.55).contains(&z), "resting height {z}");
}

#[test]
fn simulation_is_deterministic() {
    let s = scenes::drop_scenario(scenes::stack().unwrap(), Backend::Bsh, 10);
    let strip = |v: Vec<bsh_contact::suites::FrameRecord>| v.into_iter().map(|f| (f.poses, f.potential, f.newton_iters)).collect::<Vec<_>>();
    assert_eq!(strip(simulate_scenario(&s).unwrap()), strip(simulate_scenario(&s).unwrap()));
}

#[test]
fn friction_slows_a_sliding_box() {
    let run = |friction: Option<FrictionParams>| {
        let plate = primitives::grid_plate(4, 4, 1.0, 1.0).unwrap().with_fixed(true).with_pose(Pose::identity());
        let block = primitives::cube(0.4, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(-0.5, 0.0, 0.205)));
        let mut s = scenes::drop_scenario(vec![plate, block], Backend::Bsh, 15);
        s.params.friction = friction;
        s.velocities[1] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let frames = simulate_scenario(&s).unwrap();
        assert!(frames.iter().all(|f| f.min_distance > 0.0));
        frames.last().unwrap().poses[1].translation.x + 0.5
    };
    let free = run(None);
    let damped = run(Some(FrictionParams { lambda: 5.0 * scenes::MU_PUSH, epsilon: bsh_contact::bsh::DEFAULT_EPSILON }));
    assert!(free > 0.4, "frictionless slide {free}");
    assert!(damped < 0.8 * free, "friction {damped} vs free {free}");
}

#[test]
fn zero_velocity_scene_without_gravity_stays_put() {
    let bodies = vec![
        primitives::icosphere(0.3, 0, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(-1.0, 0.0, 0.0))),
        primitives::icosphere(0.3, 0, 1.0).unwrap().with_pose(Pose::from_translation(Vec3::new(1.0, 0.0, 0.0))),
    ];
    let s = scenes::drop_scenario(bodies, Backend::LocalBaseline, 5);
    let mut params = s.params;
    params.gravity = Vec3::zeros();
    let frames = simulate(&s.bodies, &s.model, &params, 5).unwrap();
    for f in frames {
        for (p, b) in f.poses.iter().zip(&s.bodies) {
            assert!((p.translation - b.pose.translation).norm() < 1e-12);
        }
    }
}
