use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fslam_core::gsmap::{read_cspl, render};
use fslam_harness::config::HarnessConfig;
use fslam_harness::error::{HarnessError, Result};
use fslam_harness::io::{
    read_depth_png, read_tum_file, write_depth_png, write_raw_f32_file, write_rgb_png, write_tum_file,
};
use fslam_harness::metrics::{ate_rmse, depth_l1, Alignment};
use fslam_harness::pipeline::{run_pipeline, write_artifacts};
use fslam_harness::scenario::{default_camera, Scenario};
use fslam_harness::sequence::generate_sequence;

#[derive(Parser)]
#[command(name = "fslam", about = "Synthetic monocular SLAM runs and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    None,
    Rigid,
    Similarity,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic sequence (images, depths, priors, trajectory).
    Simulate {
        #[arg(long, default_value = "smoke")]
        scene: Scenario,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write the report and artifacts.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: Option<Scenario>,
        #[arg(long)]
        seed: Option<u64>,
        /// Map on the tracking thread.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATE between two TUM trajectories, optionally depth L1 between two depth PNGs.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "similarity")]
        align: AlignArg,
        #[arg(long, requires = "gt_depth")]
        est_depth: Option<PathBuf>,
        #[arg(long, requires = "est_depth")]
        gt_depth: Option<PathBuf>,
    },
    /// Render a serialized map from every pose of a TUM trajectory.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn simulate(scene: Scenario, seed: u64, out: &Path) -> Result<()> {
    let (world, spec) = scene.build(seed);
    let seq = generate_sequence(&world, &spec)?;
    std::fs::create_dir_all(out)?;
    for (i, f) in seq.frames.iter().enumerate() {
        write_rgb_png(&out.join(format!("rgb_{i:04}.png")), &f.image)?;
        write_depth_png(&out.join(format!("depth_{i:04}.png")), &f.gt_depth)?;
        write_raw_f32_file(&out.join(format!("mono_{i:04}.f32")), &seq.mono_priors[i])?;
        write_raw_f32_file(&out.join(format!("mv_depth_{i:04}.f32")), &seq.mv_depth[i])?;
    }
    let stamp = |poses: Vec<fslam_core::geometry::Pose>| -> Vec<(f64, _)> {
        poses.into_iter().enumerate().map(|(i, p)| (i as f64, p)).collect()
    };
    write_tum_file(&out.join("groundtruth.txt"), &stamp(seq.gt_poses()))?;
    write_tum_file(&out.join("odometry.txt"), &stamp(seq.odometry.clone()))?;
    println!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

fn run(config: Option<&Path>, scene: Option<Scenario>, seed: Option<u64>, sequential: bool, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = scene {
        cfg.scene.name = s;
    }
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    cfg.pipeline.sequential |= sequential;
    let (world, spec) = cfg.scene.name.build(cfg.scene.seed);
    let output = run_pipeline(&world, &spec, &cfg)?;
    write_artifacts(out, &output)?;
    let json =
        serde_json::to_string_pretty(&output.report.to_json()).map_err(|e| HarnessError::Format(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn evaluate(est: &Path, gt: &Path, align: AlignArg, depths: Option<(&Path, &Path)>) -> Result<()> {
    let e: Vec<_> = read_tum_file(est)?.into_iter().map(|(_, p)| p).collect();
    let g: Vec<_> = read_tum_file(gt)?.into_iter().map(|(_, p)| p).collect();
    let alignment = match align {
        AlignArg::None => Alignment::None,
        AlignArg::Rigid => Alignment::Rigid,
        AlignArg::Similarity => Alignment::Similarity,
    };
    let ate = ate_rmse(&e, &g, alignment)?;
    let mut m = serde_json::Map::new();
    m.insert("ate_rmse".into(), ate.rmse.into());
    m.insert("ate_mean".into(), ate.mean.into());
    m.insert("ate_median".into(), ate.median.into());
    if let Some((ed, gd)) = depths {
        m.insert(
            "depth_l1".into(),
            depth_l1(&read_depth_png(ed)?, &read_depth_png(gd)?, None)?.into(),
        );
    }
    println!("{}", serde_json::Value::Object(m));
    Ok(())
}

fn render_cmd(map: &Path, trajectory: &Path, out: &Path) -> Result<()> {
    let gaussians = read_cspl(std::fs::File::open(map)?)?;
    let camera = default_camera();
    std::fs::create_dir_all(out)?;
    let poses = read_tum_file(trajectory)?;
    for (i, (_, pose)) in poses.iter().enumerate() {
        let r = render(&gaussians, &camera, pose);
        write_rgb_png(&out.join(format!("render_{i:04}.png")), &r.color)?;
    }
    println!("rendered {} views", poses.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Simulate { scene, seed, out } => simulate(*scene, *seed, out),
        Cmd::Run {
            config,
            scene,
            seed,
            sequential,
            out,
        } => run(config.as_deref(), *scene, *seed, *sequential, out),
        Cmd::Evaluate {
            est,
            gt,
            align,
            est_depth,
            gt_depth,
        } => evaluate(est, gt, *align, est_depth.as_deref().zip(gt_depth.as_deref())),
        Cmd::Render { map, trajectory, out } => render_cmd(map, trajectory, out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
