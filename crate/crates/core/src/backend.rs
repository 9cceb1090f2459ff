//! Loop closure, inverse-depth normalization and global bundle adjustment.

use std::collections::BTreeSet;

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::geometry::{PixelGrid, Vec2};
use crate::gsmap::PoseUpdates;
use crate::tracking::{bundle_adjust, BaOptions, BaReport, FactorGraph, FlowEdge, KeyframeId, TrackingConfig};

/// Pixel stride used when measuring frustum overlap.
pub const OVERLAP_STRIDE: usize = 4;
/// Pose change (radians or meters) below which a keyframe counts as unchanged.
pub const POSE_CHANGE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosureConfig {
    pub covis_overlap_min: f64,
    /// Minimum separation in insertion order.
    pub min_temporal_gap: usize,
    pub max_candidates_per_kf: usize,
}

impl Default for LoopClosureConfig {
    fn default() -> Self {
        Self {
            covis_overlap_min: 0.5,
            min_temporal_gap: 5,
            max_candidates_per_kf: 1,
        }
    }
}

impl LoopClosureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.covis_overlap_min > 0.0 && self.covis_overlap_min <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "covis_overlap_min {} outside (0, 1]",
                self.covis_overlap_min
            )));
        }
        if self.min_temporal_gap < 1 {
            return Err(Error::InvalidConfig("min_temporal_gap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationState {
    pub mean_inv_depth: f64,
    pub applied: bool,
}

/// Fraction of `src`'s sampled pixels that land inside `dst` with positive
/// depth when pushed through the current geometry.
pub fn frustum_overlap(graph: &FactorGraph, src: KeyframeId, dst: KeyframeId) -> Result<f64> {
    let a = graph.keyframe(src)?;
    let b = graph.keyframe(dst)?;
    let cam = &graph.camera;
    let rel = b.pose.inverse().compose(&a.pose);
    let (mut total, mut inside) = (0usize, 0usize);
    for y in (0..cam.height).step_by(OVERLAP_STRIDE) {
        for x in (0..cam.width).step_by(OVERLAP_STRIDE) {
            total += 1;
            let d = *a.inv_depth.get(x, y);
            if !(d > 0.0) {
                continue;
            }
            let pc = rel.transform(&(cam.ray(&Vec2::new(x as f64, y as f64)) / d));
            if pc.z <= 0.0 {
                continue;
            }
            if cam.contains(&cam.project_unchecked(&pc)) {
                inside += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { inside as f64 / total as f64 })
}

/// Temporally separated keyframe pairs `(i, j)` (i inserted first) whose
/// overlap `i -> j` passes the threshold, best first, capped per `i`.
pub fn detect_loop_closures(graph: &FactorGraph, config: &LoopClosureConfig) -> Result<Vec<(KeyframeId, KeyframeId)>> {
    config.validate()?;
    let order = graph.insertion_order();
    if order.len() < 2 {
        return Err(Error::Precondition(
            "loop detection needs at least two keyframes".into(),
        ));
    }
    let mut out = Vec::new();
    for (a, &i) in order.iter().enumerate() {
        let mut cands = Vec::new();
        for &j in order.iter().skip(a + config.min_temporal_gap) {
            let overlap = frustum_overlap(graph, i, j)?;
            if overlap >= config.covis_overlap_min {
                cands.push((overlap, j));
            }
        }
        cands.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
        out.extend(
            cands
                .into_iter()
                .take(config.max_candidates_per_kf)
                .map(|(_, j)| (i, j)),
        );
    }
    Ok(out)
}

/// Flow edge whose targets are the reprojection of `src` through the current
/// depths and poses. Pixels that leave `dst` or fall behind it are invalid.
pub fn warp_edge(graph: &FactorGraph, src: KeyframeId, dst: KeyframeId, sigma: f64) -> Result<FlowEdge> {
    let a = graph.keyframe(src)?;
    let b = graph.keyframe(dst)?;
    let cam = &graph.camera;
    let rel = b.pose.inverse().compose(&a.pose);
    let var = sigma.max(0.1).powi(2);
    let mut valid = PixelGrid::filled(cam.width, cam.height, false);
    let target = PixelGrid::from_fn(cam.width, cam.height, |x, y| {
        let pc = rel.transform(&(cam.ray(&Vec2::new(x as f64, y as f64)) / *a.inv_depth.get(x, y)));
        if pc.z > 1e-9 {
            let p = cam.project_unchecked(&pc);
            if cam.contains(&p) {
                valid.set(x, y, true);
                return p;
            }
        }
        Vec2::zeros()
    });
    FlowEdge::new(
        src,
        dst,
        target,
        PixelGrid::filled(cam.width, cam.height, Matrix2::identity() * var),
        valid,
    )
}

/// Rescales inverse depths by `1 / d_mean` and translations by `d_mean`.
///
/// The aligned-prior parameters are rescaled with the inverse depths so the
/// prior objective keeps its meaning.
pub fn normalize_for_ba(graph: &mut FactorGraph) -> Result<NormalizationState> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for kf in graph.vertices.values() {
        for &d in kf.inv_depth.iter() {
            if !(d > 0.0) {
                return Err(Error::InvalidInverseDepth(d));
            }
            sum += d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Precondition("graph has no inverse depths".into()));
    }
    let mean = sum / n as f64;
    rescale(graph, 1.0 / mean, mean);
    Ok(NormalizationState {
        mean_inv_depth: mean,
        applied: true,
    })
}

/// Undoes [`normalize_for_ba`] and clears `state.applied`.
pub fn denormalize(graph: &mut FactorGraph, state: &mut NormalizationState) -> Result<()> {
    if !state.applied {
        return Err(Error::NotNormalized);
    }
    let mean = state.mean_inv_depth;
    rescale(graph, mean, 1.0 / mean);
    state.applied = false;
    Ok(())
}

fn rescale(graph: &mut FactorGraph, depth_factor: f64, translation_factor: f64) {
    if depth_factor == 1.0 && translation_factor == 1.0 {
        return;
    }
    for kf in graph.vertices.values_mut() {
        for d in kf.inv_depth.as_mut_slice() {
            *d *= depth_factor;
        }
        kf.scale *= depth_factor;
        kf.shift *= depth_factor;
        kf.pose.translation *= translation_factor;
    }
}

#[derive(Debug, Clone)]
pub struct GlobalBaResult {
    pub report: BaReport,
    /// `(old, new)` poses of every keyframe that moved.
    pub updates: PoseUpdates,
}

fn collect_updates(before: &[(KeyframeId, crate::geometry::Pose)], graph: &FactorGraph) -> PoseUpdates {
    before
        .iter()
        .filter_map(|(id, old)| {
            let new = graph.vertices[id].pose;
            let moved = old.rotation_angle_to(&new) > POSE_CHANGE_THRESHOLD
                || old.translation_distance_to(&new) > POSE_CHANGE_THRESHOLD;
            moved.then_some((*id, (*old, new)))
        })
        .collect()
}

/// Joint optimization of every pose and depth over all edges, with the first
/// inserted keyframe as gauge.
pub fn global_ba(graph: &mut FactorGraph, config: &TrackingConfig, max_iters: usize) -> Result<GlobalBaResult> {
    if graph.edges.is_empty() {
        return Err(Error::Precondition("global BA needs at least one edge".into()));
    }
    let scope = graph.insertion_order().to_vec();
    run_ba(graph, &scope, config, max_iters)
}

/// Bundle adjustment over the keyframes adjacent to either end of a loop
/// edge, gauged at the earliest of them.
pub fn local_loop_ba(
    graph: &mut FactorGraph,
    a: KeyframeId,
    b: KeyframeId,
    config: &TrackingConfig,
    max_iters: usize,
) -> Result<GlobalBaResult> {
    graph.keyframe(a)?;
    graph.keyframe(b)?;
    let mut members: BTreeSet<KeyframeId> = [a, b].into_iter().collect();
    for e in &graph.edges {
        if e.src == a || e.src == b || e.dst == a || e.dst == b {
            members.insert(e.src);
            members.insert(e.dst);
        }
    }
    let scope: Vec<KeyframeId> = graph
        .insertion_order()
        .iter()
        .copied()
        .filter(|id| members.contains(id))
        .collect();
    run_ba(graph, &scope, config, max_iters)
}

fn run_ba(
    graph: &mut FactorGraph,
    scope: &[KeyframeId],
    config: &TrackingConfig,
    max_iters: usize,
) -> Result<GlobalBaResult> {
    let before: Vec<_> = scope.iter().map(|id| (*id, graph.vertices[id].pose)).collect();
    let opts = BaOptions {
        max_iters,
        initial_damping: config.damping,
        ..BaOptions::default()
    };
    let report = bundle_adjust(graph, scope, &opts)?;
    Ok(GlobalBaResult {
        report,
        updates: collect_updates(&before, graph),
    })
}
