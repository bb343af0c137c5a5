use flowplan::io;
use flowplan::planner::{compose_trajectory, plan, FutureFrames, PlanConfig, Tracker};
use flowplan::sceneflow::build_scene_flow;
use flowplan::simulator::{generate_scene, random_scene, MotionStyle, SceneParams};
use flowplan::solver::{solve_transform_sequence, SolveOptions};

fn params() -> SceneParams {
    SceneParams { num_steps: 5, ..Default::default() }
}

#[test]
fn plan_survives_a_trip_through_files() {
    let scene = random_scene(21, &params());
    let (frames, gt) = generate_scene(&scene).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    io::save_rgbdv(&d.join("s.rgbdv"), &frames).unwrap();
    io::save_pgm(&d.join("m.pgm"), &gt.masks[0]).unwrap();
    io::save_tracks(&d.join("t.trks"), &gt.tracks).unwrap();
    io::save_flow(&d.join("f.sflw"), &gt.flow).unwrap();

    let loaded = io::load_rgbdv(&d.join("s.rgbdv")).unwrap();
    let mask = io::load_pgm(&d.join("m.pgm")).unwrap();
    let tracks = io::load_tracks(&d.join("t.trks")).unwrap();
    assert_eq!(loaded, frames);
    assert_eq!(mask, gt.masks[0]);
    // Positions are stored as f32; depth hints keep full precision.
    assert_eq!(tracks.depth_hints(), gt.tracks.depth_hints());
    for (a, b) in tracks.positions().iter().zip(gt.tracks.positions()) {
        assert!((a[0] - b[0]).abs() < 1e-4 && (a[1] - b[1]).abs() < 1e-4);
    }
    io::save_tracks(&d.join("t2.trks"), &tracks).unwrap();
    assert_eq!(std::fs::read(d.join("t.trks")).unwrap(), std::fs::read(d.join("t2.trks")).unwrap());
    let flow = io::load_flow(&d.join("f.sflw")).unwrap();
    assert_eq!(flow.validity(), gt.flow.validity());
    for (a, b) in flow.displacements().iter().zip(gt.flow.displacements()) {
        assert!((a - b).abs().max() < 1e-8);
    }
    io::save_flow(&d.join("f2.sflw"), &flow).unwrap();
    assert_eq!(std::fs::read(d.join("f.sflw")).unwrap(), std::fs::read(d.join("f2.sflw")).unwrap());

    let cfg = PlanConfig::new(scene.intrinsics);
    let run = |frames: &[flowplan::RgbdFrame], mask, tracks| {
        plan(&frames[0], mask, FutureFrames::Provided(frames[1..].to_vec()), &Tracker::Oracle(tracks), &cfg).unwrap()
    };
    let a = run(&frames, &gt.masks[0], gt.tracks.clone());
    let b = run(&loaded, &mask, tracks);
    for (p, q) in a.trajectory.poses.iter().zip(&b.trajectory.poses) {
        assert!((p.to_matrix4() - q.to_matrix4()).abs().max() < 1e-6);
    }
}

#[test]
fn plan_equals_its_stages_run_by_hand() {
    let scene = random_scene(22, &params());
    let (frames, gt) = generate_scene(&scene).unwrap();
    let cfg = PlanConfig::new(scene.intrinsics);
    let out = plan(
        &frames[0],
        &gt.masks[0],
        FutureFrames::Provided(frames[1..].to_vec()),
        &Tracker::Oracle(gt.tracks.clone()),
        &cfg,
    )
    .unwrap();

    let flow = build_scene_flow(&gt.tracks, &frames, &scene.intrinsics).unwrap();
    assert_eq!(flow, out.flow);
    let fits = solve_transform_sequence(&out.cloud0, &flow, &SolveOptions::default()).unwrap();
    let transforms: Vec<_> = fits.iter().map(|f| f.transform).collect();
    let residuals: Vec<_> = fits.iter().map(|f| f.rms_residual).collect();
    let by_hand = compose_trajectory(out.grasp.pose, &transforms, &residuals);
    assert_eq!(by_hand.poses, out.trajectory.poses);
    assert!(out.trajectory.verify());
}

#[test]
fn static_scene_plans_a_stationary_gripper() {
    let scene = random_scene(23, &SceneParams { motion: MotionStyle::Static, ..params() });
    let (frames, gt) = generate_scene(&scene).unwrap();
    let out = plan(
        &frames[0],
        &gt.masks[0],
        FutureFrames::Provided(frames[1..].to_vec()),
        &Tracker::BlockMatch(Default::default()),
        &PlanConfig::new(scene.intrinsics),
    )
    .unwrap();
    let p0 = out.trajectory.poses[0];
    for p in &out.trajectory.poses {
        assert!(p.translation_distance(&p0) < 1e-9);
        assert!(p.rotation_distance(&p0) < 1e-9);
    }
}
