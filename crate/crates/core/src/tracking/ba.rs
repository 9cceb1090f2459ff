//! Damped Gauss-Newton over poses and per-pixel inverse depths.
//!
//! Each inverse depth only couples to the poses of the edges leaving its
//! keyframe, so the depth block of the normal equations is diagonal and is
//! eliminated with a Schur complement before solving the dense pose system.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rayon::prelude::*;

use super::residual::{edge_cost, residual_at};
use super::{FactorGraph, FlowEdge, KeyframeId};
use crate::error::{Error, Result};
use crate::geometry::{PixelGrid, Pose};

/// An accepted step that lowers the cost by less than this fraction ends the
/// optimization.
pub const MIN_RELATIVE_GAIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BaOptions {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub max_damping: f64,
    pub optimize_poses: bool,
    pub optimize_depths: bool,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            max_iters: 8,
            initial_damping: 1e-4,
            max_damping: 1e6,
            optimize_poses: true,
            optimize_depths: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    /// Cost before the first step followed by the cost after every accepted step.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub final_damping: f64,
}

impl BaReport {
    pub fn initial_cost(&self) -> f64 {
        self.costs[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.costs.last().unwrap()
    }
}

struct DepthVar {
    kf: KeyframeId,
    index: usize,
    hdd: f64,
    bd: f64,
    entries: Vec<(usize, Vector6<f64>)>,
}

struct SrcSystem {
    h: DMatrix<f64>,
    b: DVector<f64>,
    vars: Vec<DepthVar>,
}

struct Problem {
    pose_blocks: HashMap<KeyframeId, usize>,
    free_depths: HashSet<KeyframeId>,
    edges: Vec<usize>,
}

impl Problem {
    fn dim(&self) -> usize {
        6 * self.pose_blocks.len()
    }

    fn cost(&self, graph: &FactorGraph) -> f64 {
        let parts: Vec<f64> = self
            .edges
            .par_iter()
            .map(|&e| edge_cost(graph, &graph.edges[e]))
            .collect();
        parts.iter().sum()
    }
}

fn add_block(h: &mut DMatrix<f64>, r: usize, c: usize, m: &Matrix6<f64>) {
    let mut view = h.fixed_view_mut::<6, 6>(6 * r, 6 * c);
    view += m;
}

fn add_vec(b: &mut DVector<f64>, r: usize, v: &Vector6<f64>) {
    let mut view = b.fixed_rows_mut::<6>(6 * r);
    view += v;
}

fn linearize_source(graph: &FactorGraph, problem: &Problem, src_id: KeyframeId, edges: &[&FlowEdge]) -> SrcSystem {
    let dim = problem.dim();
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    let mut vars = Vec::new();
    let camera = &graph.camera;
    let src = &graph.vertices[&src_id];
    let depth_free = problem.free_depths.contains(&src_id);
    let src_block = problem.pose_blocks.get(&src_id).copied();
    let dsts: Vec<_> = edges
        .iter()
        .map(|e| (&graph.vertices[&e.dst], problem.pose_blocks.get(&e.dst).copied()))
        .collect();

    let mut entries: Vec<(usize, Vector6<f64>)> = Vec::new();
    for y in 0..camera.height {
        for x in 0..camera.width {
            let mut hdd = 0.0;
            let mut bd = 0.0;
            entries.clear();
            for (edge, (dst, dst_block)) in edges.iter().zip(&dsts) {
                let Some(term) = residual_at(camera, src, dst, edge, x, y, true) else {
                    continue;
                };
                let w = term.sqrt_info;
                let r = w * term.residual;
                let js = w * term.j_src;
                let jt = w * term.j_dst;
                let jd = w * term.j_inv_depth;
                if let Some(a) = src_block {
                    add_block(&mut h, a, a, &(js.transpose() * js));
                    add_vec(&mut b, a, &(-(js.transpose() * r)));
                }
                if let Some(c) = dst_block {
                    add_block(&mut h, *c, *c, &(jt.transpose() * jt));
                    add_vec(&mut b, *c, &(-(jt.transpose() * r)));
                    if let Some(a) = src_block {
                        let cross = js.transpose() * jt;
                        add_block(&mut h, a, *c, &cross);
                        add_block(&mut h, *c, a, &cross.transpose());
                    }
                }
                if depth_free {
                    hdd += jd.dot(&jd);
                    bd -= jd.dot(&r);
                    if let Some(a) = src_block {
                        entries.push((a, js.transpose() * jd));
                    }
                    if let Some(c) = dst_block {
                        entries.push((*c, jt.transpose() * jd));
                    }
                }
            }
            if depth_free && hdd > 0.0 {
                let mut merged: Vec<(usize, Vector6<f64>)> = Vec::with_capacity(entries.len());
                for (blk, v) in entries.iter() {
                    match merged.iter_mut().find(|(b2, _)| b2 == blk) {
                        Some((_, acc)) => *acc += v,
                        None => merged.push((*blk, *v)),
                    }
                }
                vars.push(DepthVar {
                    kf: src_id,
                    index: y * camera.width + x,
                    hdd,
                    bd,
                    entries: merged,
                });
            }
        }
    }
    SrcSystem { h, b, vars }
}

struct Step {
    poses: Vec<(KeyframeId, Vector6<f64>)>,
    depths: Vec<(KeyframeId, usize, f64)>,
}

fn solve(problem: &Problem, systems: &[SrcSystem], damping: f64) -> Option<Step> {
    let dim = problem.dim();
    let mut s = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for sys in systems {
        s += &sys.h;
        rhs += &sys.b;
    }
    for i in 0..dim {
        let d = s[(i, i)];
        s[(i, i)] = d + damping * d.max(1e-9);
    }
    for sys in systems {
        for v in &sys.vars {
            let hdd = v.hdd * (1.0 + damping);
            for (a, ea) in &v.entries {
                let scaled = ea / hdd;
                add_vec(&mut rhs, *a, &(-scaled * v.bd));
                for (c, ec) in &v.entries {
                    add_block(&mut s, *a, *c, &(-(scaled * ec.transpose())));
                }
            }
        }
    }
    let dp = if dim > 0 {
        let chol = s.cholesky()?;
        chol.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    if dp.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut poses: Vec<(KeyframeId, Vector6<f64>)> = problem
        .pose_blocks
        .iter()
        .map(|(&id, &blk)| (id, dp.fixed_rows::<6>(6 * blk).into_owned()))
        .collect();
    poses.sort_by_key(|p| p.0);
    let mut depths = Vec::new();
    for sys in systems {
        for v in &sys.vars {
            let hdd = v.hdd * (1.0 + damping);
            let coupled: f64 = v.entries.iter().map(|(a, e)| e.dot(&dp.fixed_rows::<6>(6 * a))).sum();
            depths.push((v.kf, v.index, (v.bd - coupled) / hdd));
        }
    }
    Some(Step { poses, depths })
}

type Snapshot = Vec<(KeyframeId, Pose, PixelGrid<f64>)>;

fn snapshot(graph: &FactorGraph, ids: &[KeyframeId]) -> Snapshot {
    ids.iter()
        .map(|id| {
            let kf = &graph.vertices[id];
            (*id, kf.pose, kf.inv_depth.clone())
        })
        .collect()
}

fn restore(graph: &mut FactorGraph, snap: &Snapshot) {
    for (id, pose, depth) in snap {
        let kf = graph.vertices.get_mut(id).unwrap();
        kf.pose = *pose;
        kf.inv_depth.clone_from(depth);
    }
}

fn apply(graph: &mut FactorGraph, step: &Step) -> f64 {
    let mut largest: f64 = 0.0;
    for (id, delta) in &step.poses {
        largest = largest.max(delta.amax());
        let kf = graph.vertices.get_mut(id).unwrap();
        kf.pose = kf.pose.retract(delta).orthonormalized();
    }
    for (id, index, delta) in &step.depths {
        let kf = graph.vertices.get_mut(id).unwrap();
        let d = &mut kf.inv_depth.as_mut_slice()[*index];
        largest = largest.max(delta.abs() / d.abs().max(1e-12));
        let next = *d + delta;
        *d = if next > 0.0 { next } else { 0.5 * *d };
    }
    largest
}

/// Damped Gauss-Newton over the keyframes in `scope`.
///
/// `scope[0]` is the gauge: its pose never moves and, while poses are
/// optimized, neither do its inverse depths (this fixes the monocular scale).
/// Edges touching any scope keyframe contribute; keyframes outside the scope
/// are held fixed. A singular system raises the damping tenfold until it
/// exceeds `max_damping`, which is reported as a stall.
pub fn bundle_adjust(graph: &mut FactorGraph, scope: &[KeyframeId], opts: &BaOptions) -> Result<BaReport> {
    let Some(&gauge) = scope.first() else {
        return Err(Error::Precondition("empty optimization scope".into()));
    };
    for id in scope {
        graph.keyframe(*id)?;
    }
    let in_scope: HashSet<KeyframeId> = scope.iter().copied().collect();
    let mut pose_blocks = HashMap::new();
    if opts.optimize_poses {
        for id in scope.iter().filter(|&&id| id != gauge) {
            let next = pose_blocks.len();
            pose_blocks.entry(*id).or_insert(next);
        }
    }
    let free_depths: HashSet<KeyframeId> = if !opts.optimize_depths {
        HashSet::new()
    } else if opts.optimize_poses {
        in_scope.iter().copied().filter(|&id| id != gauge).collect()
    } else {
        in_scope.clone()
    };
    let edges: Vec<usize> = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| in_scope.contains(&e.src) || in_scope.contains(&e.dst))
        .map(|(i, _)| i)
        .collect();
    if edges.is_empty() {
        return Err(Error::Precondition("no edges touch the optimization scope".into()));
    }
    let problem = Problem {
        pose_blocks,
        free_depths,
        edges,
    };
    let mut sources: Vec<KeyframeId> = problem.edges.iter().map(|&e| graph.edges[e].src).collect();
    sources.sort_unstable();
    sources.dedup();
    let touched: Vec<KeyframeId> = {
        let mut t: Vec<KeyframeId> = problem
            .pose_blocks
            .keys()
            .chain(problem.free_depths.iter())
            .copied()
            .collect();
        t.sort_unstable();
        t.dedup();
        t
    };

    let mut cost = problem.cost(graph);
    let mut report = BaReport {
        costs: vec![cost],
        iterations: 0,
        accepted: 0,
        final_damping: opts.initial_damping,
    };
    if touched.is_empty() {
        return Ok(report);
    }
    let mut damping = opts.initial_damping;
    'outer: for _ in 0..opts.max_iters {
        if cost == 0.0 {
            break;
        }
        report.iterations += 1;
        let systems: Vec<SrcSystem> = sources
            .par_iter()
            .map(|&s| {
                let out: Vec<&FlowEdge> = problem
                    .edges
                    .iter()
                    .map(|&e| &graph.edges[e])
                    .filter(|e| e.src == s)
                    .collect();
                linearize_source(graph, &problem, s, &out)
            })
            .collect();
        loop {
            let Some(step) = solve(&problem, &systems, damping) else {
                damping *= 10.0;
                if damping > opts.max_damping {
                    return Err(Error::OptimizerStalled(opts.max_damping));
                }
                continue;
            };
            let snap = snapshot(graph, &touched);
            let largest = apply(graph, &step);
            let next = problem.cost(graph);
            if next <= cost {
                let gain = cost - next;
                let before = cost;
                cost = next;
                report.costs.push(cost);
                report.accepted += 1;
                damping = (damping * 0.1).max(1e-12);
                if largest < 1e-13 || gain <= MIN_RELATIVE_GAIN * before {
                    break 'outer;
                }
                break;
            }
            restore(graph, &snap);
            damping *= 10.0;
            if damping > opts.max_damping {
                break 'outer;
            }
        }
    }
    report.final_damping = damping;
    Ok(report)
}
