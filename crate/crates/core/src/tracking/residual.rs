use nalgebra::{Matrix2, Matrix2x6};

use super::{FactorGraph, FlowEdge, Keyframe};
use crate::error::Result;
use crate::geometry::{hat, Camera, Vec2};

/// Linearized flow residual `target - project(w_dst^-1 w_src X)` at one pixel.
#[derive(Debug, Clone, Copy)]
pub struct ResidualTerm {
    pub residual: Vec2,
    /// `Sigma^(-1/2)` for this pixel.
    pub sqrt_info: Matrix2<f64>,
    /// d residual / d twist of the source pose (right perturbation).
    pub j_src: Matrix2x6<f64>,
    /// d residual / d twist of the destination pose.
    pub j_dst: Matrix2x6<f64>,
    /// d residual / d source inverse depth.
    pub j_inv_depth: Vec2,
}

impl ResidualTerm {
    pub fn whitened(&self) -> Vec2 {
        self.sqrt_info * self.residual
    }

    pub fn cost(&self) -> f64 {
        self.whitened().norm_squared()
    }
}

/// Inverse square root of a 2x2 SPD matrix.
pub fn whitening(cov: &Matrix2<f64>) -> Matrix2<f64> {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let s = det.sqrt();
    let t = (cov[(0, 0)] + cov[(1, 1)] + 2.0 * s).sqrt();
    let root = (cov + Matrix2::identity() * s) / t;
    // closed-form 2x2 inverse
    let rdet = root[(0, 0)] * root[(1, 1)] - root[(0, 1)] * root[(1, 0)];
    Matrix2::new(root[(1, 1)], -root[(0, 1)], -root[(1, 0)], root[(0, 0)]) / rdet
}

pub(crate) fn residual_at(
    camera: &Camera,
    src: &Keyframe,
    dst: &Keyframe,
    edge: &FlowEdge,
    x: usize,
    y: usize,
    with_jacobians: bool,
) -> Option<ResidualTerm> {
    if !*edge.valid.get(x, y) {
        return None;
    }
    let d = *src.inv_depth.get(x, y);
    if !(d > 0.0) {
        return None;
    }
    let ray = camera.ray(&Vec2::new(x as f64, y as f64));
    let xc = ray / d;
    let rj_t = dst.pose.rotation.transpose();
    let xw = src.pose.transform(&xc);
    let yc = rj_t * (xw - dst.pose.translation);
    if yc.z <= 1e-9 {
        return None;
    }
    let target = edge.flow_target.get(x, y);
    if !camera.contains(target) {
        return None;
    }
    let residual = target - camera.project_unchecked(&yc);
    let sqrt_info = whitening(edge.covariance.get(x, y));
    let mut term = ResidualTerm {
        residual,
        sqrt_info,
        j_src: Matrix2x6::zeros(),
        j_dst: Matrix2x6::zeros(),
        j_inv_depth: Vec2::zeros(),
    };
    if with_jacobians {
        let jp = camera.projection_jacobian(&yc);
        let rel = rj_t * src.pose.rotation;
        let jp_rel = jp * rel;
        term.j_src.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jp_rel));
        term.j_src.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp_rel * hat(&xc)));
        term.j_dst.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
        term.j_dst.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-(jp * hat(&yc))));
        term.j_inv_depth = jp_rel * ray / (d * d);
    }
    Some(term)
}

/// Flow residual and Jacobians at integer pixel `(x, y)` of the edge source.
/// `Ok(None)` when the pixel is excluded: invalid flow, a flow target outside
/// the destination image, non-positive depth, or a point behind the
/// destination camera. The residual set does not depend on where the current
/// estimate projects, so the cost stays continuous under optimization.
pub fn geometric_residual(graph: &FactorGraph, edge: &FlowEdge, x: usize, y: usize) -> Result<Option<ResidualTerm>> {
    let src = graph.keyframe(edge.src)?;
    let dst = graph.keyframe(edge.dst)?;
    Ok(residual_at(&graph.camera, src, dst, edge, x, y, true))
}

pub(crate) fn edge_cost(graph: &FactorGraph, edge: &FlowEdge) -> f64 {
    let src = &graph.vertices[&edge.src];
    let dst = &graph.vertices[&edge.dst];
    let mut cost = 0.0;
    for y in 0..graph.camera.height {
        for x in 0..graph.camera.width {
            if let Some(t) = residual_at(&graph.camera, src, dst, edge, x, y, false) {
                cost += t.cost();
            }
        }
    }
    cost
}

/// Total whitened flow cost over every edge of the graph.
pub fn geometric_cost(graph: &FactorGraph) -> f64 {
    graph.edges.iter().map(|e| edge_cost(graph, e)).sum()
}

/// Whitened flow cost over the edges selected by `keep`.
pub fn geometric_cost_for(graph: &FactorGraph, keep: impl Fn(&FlowEdge) -> bool) -> f64 {
    graph
        .edges
        .iter()
        .filter(|e| keep(e))
        .map(|e| edge_cost(graph, e))
        .sum()
}
