//! Synthetic sequences: ground-truth frames plus stand-ins for the learned
//! front end (noisy flow, affinely distorted monocular priors and a
//! multi-view depth initialization).

use fslam_core::geometry::{se3_exp, Camera, PixelGrid, Pose, Twist, Vec2, Vec3};
use fslam_core::tracking::{FlowEdge, KeyframeId, Rgb};
use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HarnessError, Result};
use crate::scene::SyntheticScene;

/// Pixels inside the half-open rectangle `[x0, x1) x [y0, y1)` are texture
/// poor and their multi-view depth is multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub factor: f64,
}

impl CorruptRegion {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub trajectory: Vec<Pose>,
    pub camera: Camera,
    /// Flow noise standard deviation in pixels.
    pub flow_noise_sigma: f64,
    pub prior_scale: f64,
    pub prior_shift: f64,
    /// Inverse-depth noise of the monocular prior (1/m).
    pub prior_noise_sigma: f64,
    pub corrupt_region: Option<CorruptRegion>,
    pub seed: u64,
    /// Relative noise of the multi-view depth initialization.
    pub mv_depth_noise: f64,
    /// Flow edges to this many predecessors, in both directions.
    pub predecessor_edges: usize,
    /// Bias right-multiplied onto every relative motion of the odometry
    /// chain. Odometry edges and initial poses follow the biased chain.
    pub odometry_drift: Twist,
}

impl SequenceSpec {
    pub fn new(trajectory: Vec<Pose>, camera: Camera, seed: u64) -> Self {
        Self {
            trajectory,
            camera,
            flow_noise_sigma: 0.0,
            prior_scale: 1.0,
            prior_shift: 0.0,
            prior_noise_sigma: 0.0,
            corrupt_region: None,
            seed,
            mv_depth_noise: 0.0,
            predecessor_edges: 3,
            odometry_drift: Twist::zeros(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub image: PixelGrid<Rgb>,
    pub gt_depth: PixelGrid<f64>,
    pub gt_pose: Pose,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub spec: SequenceSpec,
    pub frames: Vec<Frame>,
    /// Odometry flow edges; keyframe ids are frame indices.
    pub edges: Vec<FlowEdge>,
    /// Monocular depth priors in meters.
    pub mono_priors: Vec<PixelGrid<f64>>,
    /// Multi-view depth initialization in meters.
    pub mv_depth: Vec<PixelGrid<f64>>,
    pub texture_poor: Vec<PixelGrid<bool>>,
    /// Biased odometry chain starting at the first ground-truth pose.
    pub odometry: Vec<Pose>,
}

const STREAM_PRIOR: u64 = 1 << 40;
const STREAM_MV: u64 = 2 << 40;
const STREAM_EDGE: u64 = 3 << 40;
const STREAM_ORACLE: u64 = 4 << 40;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

/// Renders every pose and derives flow, priors and depth initialization.
pub fn generate_sequence(scene: &SyntheticScene, spec: &SequenceSpec) -> Result<Sequence> {
    if spec.trajectory.is_empty() {
        return Err(HarnessError::Format("sequence spec has an empty trajectory".into()));
    }
    if !(spec.prior_scale > 0.0)
        || spec.flow_noise_sigma < 0.0
        || spec.prior_noise_sigma < 0.0
        || spec.mv_depth_noise < 0.0
    {
        return Err(HarnessError::Config(
            "sequence noise levels must be non-negative and prior_scale positive".into(),
        ));
    }
    let cam = spec.camera;
    let mut frames = Vec::with_capacity(spec.trajectory.len());
    let mut texture_poor = Vec::with_capacity(spec.trajectory.len());
    for pose in &spec.trajectory {
        let view = scene.render(&cam, pose);
        if view.depth.iter().any(|d| !(*d > 0.0)) {
            return Err(HarnessError::Format(
                "a camera ray misses the scene and no background depth is set".into(),
            ));
        }
        let poor = PixelGrid::from_fn(cam.width, cam.height, |x, y| {
            *view.texture_poor.get(x, y) || spec.corrupt_region.is_some_and(|r| r.contains(x, y))
        });
        frames.push(Frame {
            image: view.image,
            gt_depth: view.depth,
            gt_pose: *pose,
        });
        texture_poor.push(poor);
    }

    let drift = se3_exp(&spec.odometry_drift);
    let mut odometry = vec![spec.trajectory[0]];
    for k in 1..spec.trajectory.len() {
        let rel = spec.trajectory[k - 1].inverse().compose(&spec.trajectory[k]);
        let prev = odometry[k - 1];
        odometry.push(prev.compose(&rel).compose(&drift).orthonormalized());
    }

    let mut mono_priors = Vec::with_capacity(frames.len());
    let mut mv_depth = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let mut r = stream(spec.seed, STREAM_PRIOR + i as u64);
        let n = normal(spec.prior_noise_sigma);
        mono_priors.push(f.gt_depth.map(|&d| {
            let e = if spec.prior_noise_sigma > 0.0 {
                n.sample(&mut r)
            } else {
                0.0
            };
            spec.prior_scale * d / (1.0 + (e - spec.prior_shift) * d).max(1e-3)
        }));
        let mut r = stream(spec.seed, STREAM_MV + i as u64);
        let n = normal(spec.mv_depth_noise);
        mv_depth.push(PixelGrid::from_fn(cam.width, cam.height, |x, y| {
            let d = *f.gt_depth.get(x, y);
            let e = if spec.mv_depth_noise > 0.0 {
                n.sample(&mut r)
            } else {
                0.0
            };
            let factor = spec
                .corrupt_region
                .filter(|c| c.contains(x, y))
                .map_or(1.0, |c| c.factor);
            (d * (1.0 + e) * factor).max(0.05)
        }));
    }

    let mut seq = Sequence {
        spec: spec.clone(),
        frames,
        edges: Vec::new(),
        mono_priors,
        mv_depth,
        texture_poor,
        odometry,
    };
    let n = seq.frames.len();
    let mut edges = Vec::new();
    for j in 1..n {
        for i in j.saturating_sub(spec.predecessor_edges)..j {
            for (s, d) in [(i, j), (j, i)] {
                let mut r = stream(spec.seed, STREAM_EDGE + ((s as u64) << 20) + d as u64);
                edges.push(seq.warp(&seq.odometry, s, d, &mut r)?);
            }
        }
    }
    seq.edges = edges;
    Ok(seq)
}

impl Sequence {
    /// Noisy flow between any two frames warped through the ground truth,
    /// standing in for a matcher run on a loop-closure pair.
    pub fn oracle_edge(&self, src: KeyframeId, dst: KeyframeId) -> Result<FlowEdge> {
        let (s, d) = (src as usize, dst as usize);
        if s >= self.frames.len() || d >= self.frames.len() {
            return Err(HarnessError::Format(format!("no frames {src} -> {dst}")));
        }
        let poses: Vec<Pose> = self.frames.iter().map(|f| f.gt_pose).collect();
        let mut r = stream(self.spec.seed, STREAM_ORACLE + ((s as u64) << 20) + d as u64);
        self.warp(&poses, s, d, &mut r)
    }

    pub fn edge(&self, src: KeyframeId, dst: KeyframeId) -> Option<&FlowEdge> {
        self.edges.iter().find(|e| e.src == src && e.dst == dst)
    }

    pub fn gt_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.gt_pose).collect()
    }

    fn warp(&self, poses: &[Pose], s: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<FlowEdge> {
        let cam = &self.spec.camera;
        let sigma = self.spec.flow_noise_sigma;
        let n_good = normal(sigma);
        let n_poor = normal(10.0 * sigma);
        let var = sigma.max(0.1).powi(2);
        let rel = poses[d].inverse().compose(&poses[s]);
        let src = &self.frames[s];
        let dst_depth = &self.frames[d].gt_depth;
        let poor = &self.texture_poor[s];
        let (w, h) = (cam.width, cam.height);
        let mut target = PixelGrid::filled(w, h, Vec2::zeros());
        let mut valid = PixelGrid::filled(w, h, false);
        let mut cov = PixelGrid::filled(w, h, Matrix2::identity() * var);
        for y in 0..h {
            for x in 0..w {
                let is_poor = *poor.get(x, y);
                if is_poor {
                    cov.set(x, y, Matrix2::identity() * (100.0 * var));
                }
                // noise is drawn for every pixel so streams stay aligned
                let (nx, ny) = if sigma > 0.0 {
                    let n = if is_poor { &n_poor } else { &n_good };
                    (n.sample(rng), n.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                let pc = rel.transform(&(cam.ray(&Vec2::new(x as f64, y as f64)) * *src.gt_depth.get(x, y)));
                if pc.z <= 1e-6 {
                    continue;
                }
                let uv = cam.project_unchecked(&pc);
                if !cam.contains(&uv) {
                    continue;
                }
                let visible = dst_depth
                    .sample_nearest(uv.x, uv.y)
                    .is_some_and(|zd| (pc.z - zd).abs() <= 0.1 * pc.z);
                if !visible {
                    continue;
                }
                target.set(x, y, uv + Vec2::new(nx, ny));
                valid.set(x, y, true);
            }
        }
        Ok(FlowEdge::new(s as KeyframeId, d as KeyframeId, target, cov, valid)?)
    }
}

/// Helper for scenario construction: pose at `position` with yaw/pitch/roll
/// `angles` applied as a rotation vector.
pub fn pose_at(position: Vec3, angles: Vec3) -> Pose {
    Pose::new(fslam_core::geometry::so3_exp(&angles), position)
}
