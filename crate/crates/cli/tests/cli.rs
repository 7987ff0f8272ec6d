use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bshc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bshc")).args(args).output().expect("bshc runs")
}

fn scene(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes").join(name)
}

/// A copy of a shipped scene with a shorter horizon.
fn short_scene(dir: &Path, name: &str, horizon: usize) -> PathBuf {
    let text = std::fs::read_to_string(scene(name)).unwrap();
    let line = text.lines().find(|l| l.starts_with("horizon")).unwrap().to_string();
    let path = dir.join(name);
    std::fs::write(&path, text.replace(&line, &format!("horizon = {horizon}"))).unwrap();
    path
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn ball_drop_writes_one_row_per_frame_with_positive_distance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scene(dir.path(), "ball_drop.toml", 30);
    let out = dir.path().join("ball.csv");
    let o = bshc(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(rows.len(), 30);
    let d = column(&header, "min_pair_distance");
    let z = column(&header, "b1_tz");
    for r in &rows {
        assert!(r[d].parse::<f64>().unwrap() > 0.0);
    }
    let last_z: f64 = rows[29][z].parse().unwrap();
    assert!(last_z < 0.6 && last_z > 0.4, "ball rests on the plate, z = {last_z}");
}

#[test]
fn no_timing_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scene(dir.path(), "stack.toml", 8);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = bshc(&["--threads", "1", "simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-timing"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn backends_are_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scene(dir.path(), "ball_drop.toml", 3);
    for backend in ["bsh", "brute", "local-baseline"] {
        let out = dir.path().join(format!("{backend}.csv"));
        let o = bshc(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--backend", backend]);
        assert!(o.status.success(), "{backend}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(read_csv(&out).1.len(), 3);
    }
    let o = bshc(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "x.csv", "--backend", "octree"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_mesh_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scene("obj_drop.toml")).unwrap().replace("meshes/tetra.obj", "meshes/absent.obj");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("never.csv");
    let o = bshc(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.obj"));
    assert!(!out.exists());
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(scene("ball_drop.toml")).unwrap();
    for (name, text) in [
        ("neg_dt.toml", base.replace("dt = 0.04", "dt = -0.04")),
        ("unknown_key.toml", format!("{base}\nwobble = 1\n")),
        ("not_toml.toml", "dt = [".to_string()),
    ] {
        let cfg = dir.path().join(name);
        std::fs::write(&cfg, text).unwrap();
        let o = bshc(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x.csv").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}");
    }
    let o = bshc(&["optimize", "--config", scene("ball_drop.toml").to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "scene without a task");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bshc(&["verify", "everything"]).status.code(), Some(2));
    assert_eq!(bshc(&["simulate"]).status.code(), Some(2));
    assert_eq!(bshc(&[]).status.code(), Some(2));
}

#[test]
fn ipc_demo_writes_curve_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = bshc(&["verify", "ipc-demo", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let (header, rows) = read_csv(&dir.path().join("ipc_curve.csv"));
    assert_eq!(header, ["x", "d", "d_prime", "d_second", "barrier"]);
    assert_eq!(rows.len(), 301);
    let (header, rows) = read_csv(&dir.path().join("report.csv"));
    assert_eq!(header[..5], ["suite", "check", "value", "threshold", "passed"]);
    assert_eq!(header[5], "detail");
    assert!(rows.iter().all(|r| r[0] == "ipc_counterexample" && r[4] == "true"));
}

#[test]
fn optimize_writes_convergence_decision_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    let o = bshc(&["optimize", "--config", scene("billiards_mini.toml").to_str().unwrap(), "--out", out.to_str().unwrap(), "--iterations", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("convergence.csv"));
    assert_eq!(header, ["iteration", "loss", "grad_norm", "wall_seconds"]);
    assert_eq!(rows.len(), 5);
    assert_eq!(read_csv(&out.join("decision.csv")).1.len(), 4);
    assert_eq!(read_csv(&out.join("trajectory.csv")).1.len(), 26);
}

#[test]
fn receding_horizon_push() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scene("push_mini.toml")).unwrap().replace("horizon = 10", "horizon = 4").replace("[task]", "[task]\nreceding = 2");
    let cfg = dir.path().join("push.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("opt");
    let o = bshc(&["optimize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--iterations", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_csv(&out.join("decision.csv")).1.len(), 8);
    assert_eq!(read_csv(&out.join("trajectory.csv")).1.len(), 5);
}
