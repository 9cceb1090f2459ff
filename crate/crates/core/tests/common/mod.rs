#![allow(dead_code)]

use fslam_core::backend::warp_edge;
use fslam_core::geometry::{se3_exp, Camera, PixelGrid, Pose, Twist, Vec2, Vec3};
use fslam_core::tracking::{FactorGraph, Keyframe, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera() -> Camera {
    Camera::new(30.0, 30.0, 11.5, 8.5, 24, 18).unwrap()
}

/// Tilted plane `z = 4 + 0.1 x + 0.05 y` in world coordinates.
pub fn plane_inv_depth(camera: &Camera, pose: &Pose, x: usize, y: usize) -> f64 {
    let n = Vec3::new(-0.1, -0.05, 1.0);
    let dir = pose.rotation * camera.ray(&Vec2::new(x as f64, y as f64));
    let t = (4.0 - n.dot(&pose.translation)) / n.dot(&dir);
    1.0 / t
}

pub fn texture(p: &Vec3) -> Rgb {
    Rgb::new(
        0.5 + 0.4 * (3.1 * p.x + 0.7 * p.y).sin(),
        0.5 + 0.4 * (2.3 * p.y - 1.3 * p.x).cos(),
        0.5 + 0.3 * (1.7 * (p.x + p.y)).sin(),
    )
}

pub fn keyframe(camera: &Camera, id: u32, pose: Pose) -> Keyframe {
    let inv = PixelGrid::from_fn(camera.width, camera.height, |x, y| plane_inv_depth(camera, &pose, x, y));
    let image = PixelGrid::from_fn(camera.width, camera.height, |x, y| {
        let p = pose.transform(&(camera.ray(&Vec2::new(x as f64, y as f64)) / *inv.get(x, y)));
        texture(&p)
    });
    let prior = inv.map(|d| 1.0 / d);
    Keyframe::new(id, pose, image, inv, prior).unwrap()
}

pub fn ground_truth_poses() -> Vec<Pose> {
    vec![
        Pose::identity(),
        se3_exp(&Twist::new(0.12, 0.02, 0.03, 0.01, -0.02, 0.015)),
        se3_exp(&Twist::new(-0.05, 0.1, -0.04, -0.015, 0.01, -0.02)),
    ]
}

/// Graph at ground truth with exact warp edges between every ordered pair.
pub fn plane_graph(poses: &[Pose]) -> FactorGraph {
    let cam = camera();
    let mut g = FactorGraph::new(cam);
    for (i, p) in poses.iter().enumerate() {
        g.add_keyframe(keyframe(&cam, i as u32, *p)).unwrap();
    }
    let n = poses.len() as u32;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push(warp_edge(&g, i, j, 0.1).unwrap());
            }
        }
    }
    for e in edges {
        g.add_edge(e).unwrap();
    }
    g.slide_window(poses.len());
    g
}

pub fn random_twist(rng: &mut impl Rng, sigma: f64) -> Twist {
    let n = Normal::new(0.0, sigma).unwrap();
    Twist::from_fn(|_, _| n.sample(rng))
}
