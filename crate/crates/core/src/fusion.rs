//! Multi-view consistency scoring and confidence-weighted proxy-depth fusion.
//!
//! A pixel's consistency count is the number of neighboring keyframes whose
//! own reconstruction lands within `eta * mean(depth)` of the pixel's 3D
//! point. Counts are normalized by `n_key` into a multi-view weight; the
//! monocular weight is its complement, and the proxy depth is the
//! corresponding convex blend of the multi-view depth and the scale-aligned
//! prior.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, PixelGrid, Pose, Vec2};
use crate::tracking::{FactorGraph, KeyframeId};

/// How a neighbor's inverse depth is read at a non-integer pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthSampling {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Relative 3D tolerance of the consistency test.
    pub eta: f64,
    /// Count at which the multi-view weight saturates.
    pub n_key: u32,
    pub sampling: DepthSampling,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            n_key: 30,
            sampling: DepthSampling::Bilinear,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if self.n_key < 1 {
            return Err(Error::InvalidConfig("n_key must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub counts: PixelGrid<u32>,
    pub w_mv: PixelGrid<f64>,
    pub w_mono: PixelGrid<f64>,
}

impl ConfidenceMap {
    /// Weights that trust the multi-view depth everywhere.
    pub fn multiview_only(counts: PixelGrid<u32>) -> Self {
        let (w, h) = (counts.width(), counts.height());
        Self {
            counts,
            w_mv: PixelGrid::filled(w, h, 1.0),
            w_mono: PixelGrid::filled(w, h, 0.0),
        }
    }

    /// Weights that trust the aligned prior everywhere.
    pub fn prior_only(counts: PixelGrid<u32>) -> Self {
        let (w, h) = (counts.width(), counts.height());
        Self {
            counts,
            w_mv: PixelGrid::filled(w, h, 0.0),
            w_mono: PixelGrid::filled(w, h, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyDepth {
    /// Fused depth in meters; zero where neither source is usable.
    pub depth: PixelGrid<f64>,
    pub weights: ConfidenceMap,
    /// Pixels whose aligned prior inverse depth was not positive and fell
    /// back to the multi-view depth.
    pub prior_invalid: PixelGrid<bool>,
}

impl ProxyDepth {
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        *self.depth.get(x, y) > 0.0
    }
}

/// A keyframe's geometry as seen by the consistency test.
#[derive(Debug, Clone, Copy)]
pub struct DepthView<'a> {
    pub pose: &'a Pose,
    pub inv_depth: &'a PixelGrid<f64>,
}

/// Mean of the positive, finite depths of an inverse-depth map.
pub fn mean_valid_depth(inv_depth: &PixelGrid<f64>) -> Option<f64> {
    let (sum, n) = inv_depth
        .iter()
        .filter(|d| **d > 0.0 && d.is_finite())
        .fold((0.0, 0usize), |(s, n), d| (s + 1.0 / d, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Consistency counts of `reference` against each of `neighbors`.
pub fn consistency_count_views(
    camera: &Camera,
    reference: DepthView<'_>,
    neighbors: &[DepthView<'_>],
    config: &FusionConfig,
) -> PixelGrid<u32> {
    let (w, h) = (camera.width, camera.height);
    let Some(mean_depth) = mean_valid_depth(reference.inv_depth) else {
        return PixelGrid::filled(w, h, 0);
    };
    let tolerance = config.eta * mean_depth;
    let rows: Vec<Vec<u32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let d = *reference.inv_depth.get(x, y);
                    if !(d > 0.0) {
                        return 0;
                    }
                    let xw = reference
                        .pose
                        .transform(&(camera.ray(&Vec2::new(x as f64, y as f64)) / d));
                    neighbors
                        .iter()
                        .filter(|nb| {
                            let pc = nb.pose.inverse_transform(&xw);
                            if pc.z <= 0.0 {
                                return false;
                            }
                            let uv = camera.project_unchecked(&pc);
                            let sampled = match config.sampling {
                                DepthSampling::Bilinear => nb.inv_depth.sample_bilinear(uv.x, uv.y),
                                DepthSampling::Nearest => nb.inv_depth.sample_nearest(uv.x, uv.y),
                            };
                            match sampled {
                                Some(dk) if dk > 0.0 => {
                                    let xk = nb.pose.transform(&(camera.ray(&uv) / dk));
                                    (xw - xk).norm() < tolerance
                                }
                                _ => false,
                            }
                        })
                        .count() as u32
                })
                .collect()
        })
        .collect();
    PixelGrid::from_vec(w, h, rows.into_iter().flatten().collect()).expect("row-major grid")
}

/// Consistency counts of keyframe `kf_id` against `neighbors` in the graph.
pub fn consistency_count(
    graph: &FactorGraph,
    kf_id: KeyframeId,
    neighbors: &[KeyframeId],
    config: &FusionConfig,
) -> Result<PixelGrid<u32>> {
    let kf = graph.keyframe(kf_id)?;
    let views = neighbors
        .iter()
        .map(|id| {
            graph.keyframe(*id).map(|k| DepthView {
                pose: &k.pose,
                inv_depth: &k.inv_depth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(consistency_count_views(
        &graph.camera,
        DepthView {
            pose: &kf.pose,
            inv_depth: &kf.inv_depth,
        },
        &views,
        config,
    ))
}

/// Every other keyframe of the current window.
pub fn window_neighbors(graph: &FactorGraph, kf_id: KeyframeId) -> Vec<KeyframeId> {
    graph.window.iter().copied().filter(|&id| id != kf_id).collect()
}

/// `w_mv = min(n / n_key, 1)`, `w_mono = 1 - w_mv`.
pub fn compute_weights(counts: &PixelGrid<u32>, config: &FusionConfig) -> ConfidenceMap {
    let n_key = config.n_key.max(1) as f64;
    let w_mv = counts.map(|&n| (n as f64 / n_key).min(1.0));
    let w_mono = w_mv.map(|w| 1.0 - w);
    ConfidenceMap {
        counts: counts.clone(),
        w_mv,
        w_mono,
    }
}

/// Depth of the aligned prior, `1 / (scale / D_mono + shift)`; `None` when
/// the aligned inverse depth is not positive.
#[inline]
pub fn scaled_prior_depth(mono_depth: f64, scale: f64, shift: f64) -> Option<f64> {
    let inv = scale / mono_depth + shift;
    (inv > 0.0 && inv.is_finite()).then(|| 1.0 / inv)
}

/// Whole-map scaled prior depth; non-positive aligned pixels become zero.
pub fn scaled_prior(mono_prior: &PixelGrid<f64>, scale: f64, shift: f64) -> PixelGrid<f64> {
    mono_prior.map(|&d| scaled_prior_depth(d, scale, shift).unwrap_or(0.0))
}

#[inline]
fn blend(mv: f64, prior: f64, w_mv: f64) -> f64 {
    if w_mv >= 1.0 {
        return mv;
    }
    if w_mv <= 0.0 {
        return prior;
    }
    let fused = prior + w_mv * (mv - prior);
    fused.clamp(mv.min(prior), mv.max(prior))
}

/// Per-pixel convex blend of multi-view depth and the aligned prior.
pub fn fuse_proxy_depth(
    mv_depth: &PixelGrid<f64>,
    mono_prior: &PixelGrid<f64>,
    scale: f64,
    shift: f64,
    weights: &ConfidenceMap,
) -> Result<ProxyDepth> {
    if !mv_depth.same_shape(mono_prior) || !mv_depth.same_shape(&weights.w_mv) {
        return Err(Error::DimensionMismatch("fusion inputs differ in size".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Precondition(format!(
            "prior scale must be positive, got {scale}"
        )));
    }
    let (w, h) = (mv_depth.width(), mv_depth.height());
    let mut depth = PixelGrid::filled(w, h, 0.0);
    let mut prior_invalid = PixelGrid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let mv = *mv_depth.get(x, y);
            let mv_ok = mv > 0.0 && mv.is_finite();
            let prior = scaled_prior_depth(*mono_prior.get(x, y), scale, shift);
            let value = match (mv_ok, prior) {
                (true, Some(p)) => blend(mv, p, *weights.w_mv.get(x, y)),
                (true, None) => {
                    prior_invalid.set(x, y, true);
                    mv
                }
                (false, Some(p)) => p,
                (false, None) => {
                    prior_invalid.set(x, y, true);
                    0.0
                }
            };
            depth.set(x, y, value);
        }
    }
    Ok(ProxyDepth {
        depth,
        weights: weights.clone(),
        prior_invalid,
    })
}
