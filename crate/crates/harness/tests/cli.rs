use std::path::Path;
use std::process::{Command, Output};

use fslam_core::geometry::{Mat3, Pose, Vec3};
use fslam_core::gsmap::{write_cspl, Gaussian, GaussianMap};
use fslam_core::tracking::Rgb;
use fslam_harness::io::write_tum_file;

fn fslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fslam")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    let out = fslam(&["simulate", "--scene", "loop", "--seed", "3", "--out", arg(&seq)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "rgb_0000.png",
        "depth_0000.png",
        "mono_0000.f32",
        "mv_depth_0000.f32",
        "groundtruth.txt",
    ] {
        assert!(seq.join(f).exists(), "{f}");
    }

    let gt = seq.join("groundtruth.txt");
    let out = fslam(&["evaluate", "--est", arg(&gt), "--gt", arg(&gt), "--align", "none"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["ate_rmse"].as_f64().unwrap() < 1e-6);

    let odo = seq.join("odometry.txt");
    let depth = seq.join("depth_0000.png");
    let out = fslam(&[
        "evaluate",
        "--est",
        arg(&odo),
        "--gt",
        arg(&gt),
        "--est-depth",
        arg(&depth),
        "--gt-depth",
        arg(&depth),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["ate_rmse"].as_f64().unwrap() > 1e-3);
    assert_eq!(v["depth_l1"].as_f64().unwrap(), 0.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[fusion]\neta = -1.0\n").unwrap();
    let out = fslam(&["run", "--config", arg(&bad), "--out", arg(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.txt");
    let out = fslam(&["evaluate", "--est", arg(&missing), "--gt", arg(&missing)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[scene]\nname = \"smoke\"\nseed = 2\n[mapping]\niters_per_keyframe = 0\nfinal_iters = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = fslam(&["run", "--config", arg(&cfg), "--sequential", "--out", arg(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["ate_rmse"].is_number());
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("map.cspl").exists());
}

#[test]
fn render_writes_one_image_per_pose() {
    let dir = tempfile::tempdir().unwrap();
    let map = GaussianMap::new(vec![Gaussian {
        mean: Vec3::new(0.0, 0.0, 2.0),
        rotation: Mat3::identity(),
        log_scales: Vec3::repeat(0.2f64.ln()),
        opacity_logit: 4.0,
        color: Rgb::new(1.0, 0.0, 0.0),
        anchor_kf: 0,
    }]);
    let mut buf = Vec::new();
    write_cspl(&map, &mut buf).unwrap();
    let map_path = dir.path().join("m.cspl");
    std::fs::write(&map_path, buf).unwrap();
    let traj = dir.path().join("t.txt");
    let poses = [
        (0.0, Pose::identity()),
        (1.0, Pose::from_translation(Vec3::new(0.1, 0.0, 0.0))),
    ];
    write_tum_file(&traj, &poses).unwrap();
    let out_dir = dir.path().join("views");
    let out = fslam(&[
        "render",
        "--map",
        arg(&map_path),
        "--trajectory",
        arg(&traj),
        "--out",
        arg(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = fslam_harness::io::read_rgb_png(&out_dir.join("render_0000.png")).unwrap();
    let c = img.get(31, 23);
    assert!(c.x > 0.9 && c.y < 0.05);
    assert!(out_dir.join("render_0001.png").exists());
}
