//! Named scenes with their sequence specs.

use fslam_core::geometry::{Camera, Pose, Twist, Vec3};
use serde::{Deserialize, Serialize};

use crate::scene::{loop_scene, smoke_scene, SyntheticScene};
use crate::sequence::{pose_at, CorruptRegion, SequenceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Three planes, twelve keyframes, mild noise.
    #[default]
    Smoke,
    /// Circular trajectory over a ground plane with biased odometry.
    Loop,
    /// Smoke scene with a texture-poor rectangle whose multi-view depth is
    /// corrupted.
    CorruptRegion,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smoke" => Ok(Scenario::Smoke),
            "loop" => Ok(Scenario::Loop),
            "corrupt_region" => Ok(Scenario::CorruptRegion),
            other => Err(format!("unknown scene '{other}' (smoke, loop, corrupt_region)")),
        }
    }
}

pub fn default_camera() -> Camera {
    Camera::new(56.0, 56.0, 31.5, 23.5, 64, 48).expect("valid camera")
}

/// Sideways sweep in front of the back wall.
pub fn smoke_trajectory() -> Vec<Pose> {
    (0..12)
        .map(|i| {
            let s = i as f64;
            pose_at(
                Vec3::new(-1.4 + 0.25 * s, -0.1 * (0.5 * s).sin(), 0.05 * s),
                Vec3::new(0.01 * (0.7 * s).sin(), -0.02 + 0.008 * s, 0.0),
            )
        })
        .collect()
}

/// Closed circle of radius 1 m in the plane z = 0, rolling with the heading.
pub fn loop_trajectory(count: usize) -> Vec<Pose> {
    (0..count)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / count as f64;
            pose_at(Vec3::new(a.cos(), a.sin(), 0.0), Vec3::new(0.0, 0.0, a))
        })
        .collect()
}

impl Scenario {
    pub fn build(self, seed: u64) -> (SyntheticScene, SequenceSpec) {
        let cam = default_camera();
        match self {
            Scenario::Smoke => {
                let mut spec = SequenceSpec::new(smoke_trajectory(), cam, seed);
                spec.flow_noise_sigma = 0.1;
                spec.prior_scale = 0.7;
                spec.prior_shift = 0.03;
                spec.prior_noise_sigma = 0.01;
                spec.mv_depth_noise = 0.02;
                (smoke_scene(), spec)
            }
            Scenario::CorruptRegion => {
                let mut spec = SequenceSpec::new(smoke_trajectory(), cam, seed);
                spec.flow_noise_sigma = 0.2;
                spec.prior_scale = 0.7;
                spec.prior_shift = 0.03;
                spec.prior_noise_sigma = 0.01;
                spec.mv_depth_noise = 0.02;
                spec.corrupt_region = Some(CorruptRegion {
                    x0: 20,
                    y0: 12,
                    x1: 44,
                    y1: 32,
                    factor: 1.3,
                });
                (smoke_scene(), spec)
            }
            Scenario::Loop => {
                let mut spec = SequenceSpec::new(loop_trajectory(16), cam, seed);
                spec.flow_noise_sigma = 0.05;
                spec.prior_scale = 0.7;
                spec.prior_shift = 0.03;
                spec.prior_noise_sigma = 0.01;
                spec.mv_depth_noise = 0.02;
                spec.odometry_drift = Twist::new(0.0, 0.024, 0.0, 0.0, 0.0, 0.02);
                (loop_scene(), spec)
            }
        }
    }
}
