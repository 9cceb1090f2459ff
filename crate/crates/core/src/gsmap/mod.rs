//! Deformable Gaussian-splat scene map.
//!
//! Each primitive has a world-space mean, an orthonormal rotation, per-axis
//! log scales, an opacity logit, a degree-0 color and the keyframe it is
//! anchored to. Covariance is `R diag(s)^2 R^T` with `s = exp(log_scales)`.

mod io;
mod loss;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::fusion::ProxyDepth;
use crate::geometry::{Camera, Mat3, Pose, Vec2, Vec3};
use crate::tracking::{Keyframe, KeyframeId, Rgb};

pub use io::{read_cspl, read_point_cloud, write_cspl, write_point_cloud, CSPL_MAGIC, CSPL_VERSION};
pub use loss::{
    huber, map_loss, optimize_map, regularizer, AdamConfig, GaussianGrad, LossBreakdown, MapLossConfig, OptimizeReport,
    SupervisionView, HUBER_DELTA,
};
pub use render::{render, render_backward, RenderOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    pub rotation: Mat3,
    pub log_scales: Vec3,
    pub opacity_logit: f64,
    pub color: Rgb,
    pub anchor_kf: KeyframeId,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Gaussian {
    pub fn scales(&self) -> Vec3 {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Mat3 {
        let s2 = self.scales().map(|s| s * s);
        self.rotation * Mat3::from_diagonal(&s2) * self.rotation.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianMap {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn extend(&mut self, more: Vec<Gaussian>) {
        self.gaussians.extend(more);
    }

    /// Gaussian indices grouped by anchor keyframe.
    pub fn anchor_index(&self) -> BTreeMap<KeyframeId, Vec<usize>> {
        let mut index: BTreeMap<KeyframeId, Vec<usize>> = BTreeMap::new();
        for (i, g) in self.gaussians.iter().enumerate() {
            index.entry(g.anchor_kf).or_default().push(i);
        }
        index
    }
}

/// Backend pose corrections: keyframe id to `(old, new)` pose.
pub type PoseUpdates = BTreeMap<KeyframeId, (Pose, Pose)>;

/// One Gaussian per sampled pixel with a valid proxy depth.
///
/// The mean is the world-space unprojection of the pixel at the proxy depth,
/// the color is copied from the keyframe image, and the isotropic scale is
/// the depth times the angular footprint of one pixel.
pub fn init_gaussians(kf: &Keyframe, camera: &Camera, proxy: &ProxyDepth, stride: usize) -> Result<Vec<Gaussian>> {
    if stride < 1 {
        return Err(Error::Precondition("stride must be at least 1".into()));
    }
    if !kf.image.same_shape(&proxy.depth) {
        return Err(Error::DimensionMismatch("proxy depth does not match keyframe".into()));
    }
    let focal = 0.5 * (camera.fx + camera.fy);
    let mut out = Vec::new();
    for y in (0..camera.height).step_by(stride) {
        for x in (0..camera.width).step_by(stride) {
            let depth = *proxy.depth.get(x, y);
            if !(depth > 0.0 && depth.is_finite()) {
                continue;
            }
            let pc = camera.ray(&Vec2::new(x as f64, y as f64)) * depth;
            let scale = depth / focal;
            out.push(Gaussian {
                mean: kf.pose.transform(&pc),
                rotation: Mat3::identity(),
                log_scales: Vec3::repeat(scale.ln()),
                opacity_logit: 0.0,
                color: *kf.image.get(x, y),
                anchor_kf: kf.id,
            });
        }
    }
    Ok(out)
}

/// Moves every Gaussian anchored to an updated keyframe by
/// `new * old^-1`; rotations are left-multiplied, scales untouched.
///
/// Fails with [`Error::DanglingAnchor`] when an update or a Gaussian refers to
/// a keyframe outside `known`.
pub fn deform_map(map: &mut GaussianMap, updates: &PoseUpdates, known: &BTreeSet<KeyframeId>) -> Result<()> {
    if let Some(id) = updates.keys().find(|id| !known.contains(id)) {
        return Err(Error::DanglingAnchor(*id));
    }
    if let Some(g) = map.gaussians.iter().find(|g| !known.contains(&g.anchor_kf)) {
        return Err(Error::DanglingAnchor(g.anchor_kf));
    }
    let transforms: BTreeMap<KeyframeId, Pose> = updates
        .iter()
        .filter(|(_, (old, new))| old != new)
        .map(|(id, (old, new))| (*id, new.compose(&old.inverse())))
        .collect();
    for g in &mut map.gaussians {
        if let Some(t) = transforms.get(&g.anchor_kf) {
            g.mean = t.transform(&g.mean);
            g.rotation = t.rotation * g.rotation;
        }
    }
    Ok(())
}
