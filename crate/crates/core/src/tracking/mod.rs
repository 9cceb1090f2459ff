//! Sliding-window factor graph over keyframes.
//!
//! Vertices carry a pose, a dense inverse-depth map and a monocular depth
//! prior with its affine alignment. Edges are dense flow constraints between
//! two keyframes with a per-pixel 2x2 covariance.

mod ba;
mod dspo;
mod residual;

use std::collections::BTreeMap;

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::geometry::{Camera, PixelGrid, Pose, Vec2, Vec3};

pub use ba::{bundle_adjust, BaOptions, BaReport, MIN_RELATIVE_GAIN};
pub use dspo::{dspo_refine, prior_objective, refine_prior_objective, DspoReport, PriorObjective};
pub use residual::{geometric_cost, geometric_cost_for, geometric_residual, whitening, ResidualTerm};

pub type KeyframeId = u32;
pub type Rgb = Vec3;

/// Per-pixel reliability label of an inverse-depth estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    High,
    Low,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub pose: Pose,
    pub image: PixelGrid<Rgb>,
    /// Inverse depth in 1/m.
    pub inv_depth: PixelGrid<f64>,
    /// Monocular depth prior in m.
    pub mono_prior: PixelGrid<f64>,
    /// Scale of the aligned prior inverse depth.
    pub scale: f64,
    /// Shift of the aligned prior inverse depth (1/m).
    pub shift: f64,
    pub error_class: PixelGrid<ErrorClass>,
}

impl Keyframe {
    pub fn new(
        id: KeyframeId,
        pose: Pose,
        image: PixelGrid<Rgb>,
        inv_depth: PixelGrid<f64>,
        mono_prior: PixelGrid<f64>,
    ) -> Result<Self> {
        if !image.same_shape(&inv_depth) || !image.same_shape(&mono_prior) {
            return Err(Error::DimensionMismatch(format!("keyframe {id} grids differ in size")));
        }
        if inv_depth.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Precondition(format!(
                "keyframe {id}: inverse depth must be positive"
            )));
        }
        if mono_prior.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Precondition(format!(
                "keyframe {id}: monocular prior must be positive"
            )));
        }
        let error_class = PixelGrid::filled(image.width(), image.height(), ErrorClass::High);
        Ok(Self {
            id,
            pose,
            image,
            inv_depth,
            mono_prior,
            scale: 1.0,
            shift: 0.0,
            error_class,
        })
    }

    /// Aligned prior inverse depth `scale / D_mono + shift` at a pixel.
    #[inline]
    pub fn prior_inv_depth(&self, x: usize, y: usize) -> f64 {
        self.scale / *self.mono_prior.get(x, y) + self.shift
    }

    pub fn depth(&self) -> PixelGrid<f64> {
        self.inv_depth.map(|d| 1.0 / d)
    }
}

/// Dense flow constraint from keyframe `src` to keyframe `dst`.
#[derive(Debug, Clone)]
pub struct FlowEdge {
    pub src: KeyframeId,
    pub dst: KeyframeId,
    /// Target pixel in `dst` for every pixel of `src`.
    pub flow_target: PixelGrid<Vec2>,
    pub covariance: PixelGrid<Matrix2<f64>>,
    /// Pixels without a usable flow target.
    pub valid: PixelGrid<bool>,
}

impl FlowEdge {
    pub fn new(
        src: KeyframeId,
        dst: KeyframeId,
        flow_target: PixelGrid<Vec2>,
        covariance: PixelGrid<Matrix2<f64>>,
        valid: PixelGrid<bool>,
    ) -> Result<Self> {
        if src == dst {
            return Err(Error::Precondition(format!("self edge on keyframe {src}")));
        }
        if !flow_target.same_shape(&covariance) || !flow_target.same_shape(&valid) {
            return Err(Error::DimensionMismatch("flow edge grids differ in size".into()));
        }
        for c in covariance.iter() {
            if (c[(0, 1)] - c[(1, 0)]).abs() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::Precondition("flow covariance must be symmetric".into()));
            }
            let tr = c[(0, 0)] + c[(1, 1)];
            let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            if !(0.5 * tr - disc > 1e-12) {
                return Err(Error::Precondition("flow covariance must be positive definite".into()));
            }
        }
        Ok(Self {
            src,
            dst,
            flow_target,
            covariance,
            valid,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone)]
pub struct FactorGraph {
    pub camera: Camera,
    pub vertices: BTreeMap<KeyframeId, Keyframe>,
    pub edges: Vec<FlowEdge>,
    /// Active keyframes, a suffix of `order`.
    pub window: Vec<KeyframeId>,
    order: Vec<KeyframeId>,
}

impl FactorGraph {
    pub fn new(camera: Camera) -> Self {
        Self {
            camera,
            vertices: BTreeMap::new(),
            edges: Vec::new(),
            window: Vec::new(),
            order: Vec::new(),
        }
    }

    pub fn add_keyframe(&mut self, kf: Keyframe) -> Result<()> {
        if kf.image.width() != self.camera.width || kf.image.height() != self.camera.height {
            return Err(Error::DimensionMismatch(format!(
                "keyframe {} is {}x{}, camera is {}x{}",
                kf.id,
                kf.image.width(),
                kf.image.height(),
                self.camera.width,
                self.camera.height
            )));
        }
        if self.vertices.contains_key(&kf.id) {
            return Err(Error::Precondition(format!("duplicate keyframe id {}", kf.id)));
        }
        self.order.push(kf.id);
        self.window.push(kf.id);
        self.vertices.insert(kf.id, kf);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: FlowEdge) -> Result<()> {
        for id in [edge.src, edge.dst] {
            if !self.vertices.contains_key(&id) {
                return Err(Error::UnknownKeyframe(id));
            }
        }
        if edge.flow_target.width() != self.camera.width || edge.flow_target.height() != self.camera.height {
            return Err(Error::DimensionMismatch("edge grid does not match camera".into()));
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn has_edge(&self, src: KeyframeId, dst: KeyframeId) -> bool {
        self.edges.iter().any(|e| e.src == src && e.dst == dst)
    }

    /// Keeps the last `size` inserted keyframes active.
    pub fn slide_window(&mut self, size: usize) {
        let start = self.order.len().saturating_sub(size);
        self.window = self.order[start..].to_vec();
    }

    /// All keyframe ids in insertion order.
    pub fn insertion_order(&self) -> &[KeyframeId] {
        &self.order
    }

    pub fn keyframe(&self, id: KeyframeId) -> Result<&Keyframe> {
        self.vertices.get(&id).ok_or(Error::UnknownKeyframe(id))
    }

    pub fn keyframe_mut(&mut self, id: KeyframeId) -> Result<&mut Keyframe> {
        self.vertices.get_mut(&id).ok_or(Error::UnknownKeyframe(id))
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.order.iter().map(|id| self.vertices[id].pose).collect()
    }
}

/// Tracking hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingConfig {
    /// Mean flow magnitude (px) above which a new keyframe is inserted.
    pub kf_flow_threshold: f64,
    /// A pixel is low-error when its consistency count exceeds this.
    pub consistency_threshold: u32,
    /// Weight pulling high-error inverse depths toward the aligned prior.
    pub alpha1: f64,
    /// Weight fitting scale/shift to low-error inverse depths.
    pub alpha2: f64,
    pub window_size: usize,
    pub gn_iters: usize,
    pub dspo_rounds: usize,
    pub damping: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            kf_flow_threshold: 2.0,
            consistency_threshold: 2,
            alpha1: 0.05,
            alpha2: 1.0,
            window_size: 8,
            gn_iters: 8,
            dspo_rounds: 3,
            damping: 1e-4,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha2 > self.alpha1) {
            return Err(Error::InvalidConfig(format!(
                "need alpha2 > alpha1 > 0, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )));
        }
        if self.window_size < 2 {
            return Err(Error::InvalidConfig("window_size must be at least 2".into()));
        }
        if !(self.damping > 0.0) || !(self.kf_flow_threshold >= 0.0) {
            return Err(Error::InvalidConfig(
                "damping must be positive and threshold non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// True when the mean flow magnitude over finite vectors exceeds the threshold.
pub fn should_insert_keyframe(flow_field: &PixelGrid<Vec2>, config: &TrackingConfig) -> bool {
    let (sum, n) = flow_field
        .iter()
        .filter(|f| f.x.is_finite() && f.y.is_finite())
        .fold((0.0, 0usize), |(s, n), f| (s + f.norm(), n + 1));
    n > 0 && sum / n as f64 > config.kf_flow_threshold
}

/// Labels a pixel low-error when its consistency count strictly exceeds the threshold.
pub fn classify_depth_errors(counts: &PixelGrid<u32>, config: &TrackingConfig) -> PixelGrid<ErrorClass> {
    counts.map(|&n| {
        if n > config.consistency_threshold {
            ErrorClass::Low
        } else {
            ErrorClass::High
        }
    })
}

/// Classifies keyframe `kf_id` in place from its consistency counts.
pub fn classify_keyframe(
    graph: &mut FactorGraph,
    kf_id: KeyframeId,
    counts: &PixelGrid<u32>,
    config: &TrackingConfig,
) -> Result<()> {
    let kf = graph.keyframe_mut(kf_id)?;
    if !kf.inv_depth.same_shape(counts) {
        return Err(Error::DimensionMismatch(
            "consistency counts do not match keyframe".into(),
        ));
    }
    kf.error_class = classify_depth_errors(counts, config);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleShiftFit {
    pub scale: f64,
    pub shift: f64,
    /// Set when the prior has no spread over the low-error pixels.
    pub degenerate: bool,
}

/// Closed-form least squares of `scale / D_mono + shift` against the
/// low-error inverse depths.
pub fn fit_scale_shift(kf: &Keyframe) -> ScaleShiftFit {
    let samples: Vec<(f64, f64)> = kf
        .error_class
        .indexed()
        .filter(|(_, _, c)| **c == ErrorClass::Low)
        .map(|(x, y, _)| (1.0 / *kf.mono_prior.get(x, y), *kf.inv_depth.get(x, y)))
        .collect();
    if samples.is_empty() {
        return ScaleShiftFit {
            scale: 1.0,
            shift: 0.0,
            degenerate: true,
        };
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (sxx, sxy) = samples.iter().fold((0.0, 0.0), |(sxx, sxy), (x, y)| {
        let dx = x - mean_x;
        (sxx + dx * dx, sxy + dx * (y - mean_y))
    });
    if sxx / n < 1e-12 {
        return ScaleShiftFit {
            scale: 1.0,
            shift: mean_y - mean_x,
            degenerate: true,
        };
    }
    let scale = sxy / sxx;
    ScaleShiftFit {
        scale,
        shift: mean_y - scale * mean_x,
        degenerate: false,
    }
}

/// Sum of squared alignment residuals over the low-error pixels.
pub fn scale_shift_objective(kf: &Keyframe, scale: f64, shift: f64) -> f64 {
    kf.error_class
        .indexed()
        .filter(|(_, _, c)| **c == ErrorClass::Low)
        .map(|(x, y, _)| {
            let r = scale / *kf.mono_prior.get(x, y) + shift - *kf.inv_depth.get(x, y);
            r * r
        })
        .sum()
}

/// Joint Gauss-Newton over window poses and inverse depths; the first
/// window keyframe is the gauge.
pub fn optimize_window(graph: &mut FactorGraph, config: &TrackingConfig) -> Result<BaReport> {
    if graph.window.len() < 2 {
        return Err(Error::Precondition("window needs at least two keyframes".into()));
    }
    let window = graph.window.clone();
    let opts = BaOptions {
        max_iters: config.gn_iters,
        initial_damping: config.damping,
        ..BaOptions::default()
    };
    bundle_adjust(graph, &window, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_kf(w: usize, h: usize) -> Keyframe {
        Keyframe::new(
            0,
            Pose::identity(),
            PixelGrid::filled(w, h, Rgb::zeros()),
            PixelGrid::filled(w, h, 0.5),
            PixelGrid::filled(w, h, 2.0),
        )
        .unwrap()
    }

    #[test]
    fn keyframe_insertion_rule() {
        let cfg = TrackingConfig::default();
        let zero = PixelGrid::filled(4, 4, Vec2::zeros());
        assert!(!should_insert_keyframe(&zero, &cfg));
        let uniform = PixelGrid::filled(4, 4, Vec2::new(3.0, 4.0));
        assert!(should_insert_keyframe(&uniform, &cfg));
        // half the pixels move by 4 px, the rest are static: mean is exactly 2
        let half = PixelGrid::from_fn(4, 4, |x, _| if x < 2 { Vec2::zeros() } else { Vec2::new(0.0, 4.0) });
        assert!(!should_insert_keyframe(&half, &cfg));
        let mut with_nan = uniform.clone();
        with_nan.set(0, 0, Vec2::new(f64::NAN, 0.0));
        assert!(should_insert_keyframe(&with_nan, &cfg));
    }

    #[test]
    fn classification_is_strict() {
        let cfg = TrackingConfig::default();
        let all = |n: u32| classify_depth_errors(&PixelGrid::filled(3, 3, n), &cfg);
        assert!(all(3).iter().all(|c| *c == ErrorClass::Low));
        assert!(all(0).iter().all(|c| *c == ErrorClass::High));
        assert!(all(2).iter().all(|c| *c == ErrorClass::High));
    }

    #[test]
    fn scale_shift_exact_affine() {
        let mut kf = flat_kf(8, 8);
        kf.mono_prior = PixelGrid::from_fn(8, 8, |x, y| 1.0 + 0.1 * x as f64 + 0.05 * y as f64);
        kf.inv_depth = kf.mono_prior.map(|d| 2.0 / d + 0.1);
        kf.error_class = PixelGrid::filled(8, 8, ErrorClass::Low);
        let fit = fit_scale_shift(&kf);
        assert!(!fit.degenerate);
        assert!((fit.scale - 2.0).abs() < 1e-9 && (fit.shift - 0.1).abs() < 1e-9);

        kf.inv_depth = kf.mono_prior.map(|d| 1.0 / d);
        let fit = fit_scale_shift(&kf);
        assert!((fit.scale - 1.0).abs() < 1e-9 && fit.shift.abs() < 1e-9);
    }

    #[test]
    fn scale_shift_degenerate_fallback() {
        let mut kf = flat_kf(4, 4);
        kf.error_class = PixelGrid::filled(4, 4, ErrorClass::Low);
        let fit = fit_scale_shift(&kf);
        assert!(fit.degenerate);
        assert_eq!(fit.scale, 1.0);
        assert!((fit.shift - (0.5 - 0.5)).abs() < 1e-15);
        kf.error_class = PixelGrid::filled(4, 4, ErrorClass::High);
        assert!(fit_scale_shift(&kf).degenerate);
    }

    #[test]
    fn config_validation() {
        assert!(TrackingConfig::default().validate().is_ok());
        let bad = TrackingConfig {
            alpha1: 1.0,
            alpha2: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrackingConfig {
            window_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn graph_rejects_dangling_edges() {
        let cam = Camera::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let mut g = FactorGraph::new(cam);
        g.add_keyframe(flat_kf(4, 4)).unwrap();
        let edge = FlowEdge::new(
            0,
            7,
            PixelGrid::filled(4, 4, Vec2::zeros()),
            PixelGrid::filled(4, 4, Matrix2::identity()),
            PixelGrid::filled(4, 4, true),
        )
        .unwrap();
        assert_eq!(g.add_edge(edge), Err(Error::UnknownKeyframe(7)));
        assert!(g.add_keyframe(flat_kf(4, 4)).is_err());
    }

    #[test]
    fn edge_rejects_bad_covariance() {
        let mk = |c: Matrix2<f64>| {
            FlowEdge::new(
                0,
                1,
                PixelGrid::filled(2, 2, Vec2::zeros()),
                PixelGrid::filled(2, 2, c),
                PixelGrid::filled(2, 2, true),
            )
        };
        assert!(mk(Matrix2::new(1.0, 0.0, 0.0, 0.0)).is_err());
        assert!(mk(Matrix2::new(1.0, 0.5, 0.2, 1.0)).is_err());
        assert!(mk(Matrix2::new(2.0, 0.5, 0.5, 1.0)).is_ok());
    }
}
