//! Prior-regularized refinement of high-error inverse depths together with
//! the per-keyframe scale and shift of the monocular prior.
//!
//! Objective over the window keyframes, poses held fixed:
//!
//! ```text
//! L_geom + alpha1 * sum_high (d - (scale / D_mono + shift))^2
//!        + alpha2 * sum_low  (d - (scale / D_mono + shift))^2
//! ```
//!
//! Low-error depths are constants; they only constrain scale and shift.

use std::collections::HashSet;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::residual::{edge_cost, residual_at};
use super::{optimize_window, BaReport, ErrorClass, FactorGraph, FlowEdge, Keyframe, KeyframeId, TrackingConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorObjective {
    pub geometric: f64,
    /// `alpha1 * sum_high r^2`.
    pub high_prior: f64,
    /// `alpha2 * sum_low r^2`.
    pub low_prior: f64,
}

impl PriorObjective {
    pub fn total(&self) -> f64 {
        self.geometric + self.high_prior + self.low_prior
    }
}

fn prior_terms(kf: &Keyframe) -> (f64, f64) {
    let mut high = 0.0;
    let mut low = 0.0;
    for (x, y, c) in kf.error_class.indexed() {
        let r = *kf.inv_depth.get(x, y) - kf.prior_inv_depth(x, y);
        match c {
            ErrorClass::High => high += r * r,
            ErrorClass::Low => low += r * r,
        }
    }
    (high, low)
}

/// Evaluates the prior-regularized objective over the current window.
pub fn prior_objective(graph: &FactorGraph, config: &TrackingConfig) -> PriorObjective {
    let window: HashSet<KeyframeId> = graph.window.iter().copied().collect();
    let geometric: f64 = graph
        .edges
        .iter()
        .filter(|e| window.contains(&e.src) || window.contains(&e.dst))
        .map(|e| edge_cost(graph, e))
        .sum();
    let (mut high, mut low) = (0.0, 0.0);
    for id in &graph.window {
        let (h, l) = prior_terms(&graph.vertices[id]);
        high += h;
        low += l;
    }
    PriorObjective {
        geometric,
        high_prior: config.alpha1 * high,
        low_prior: config.alpha2 * low,
    }
}

struct HighVar {
    index: usize,
    hdd: f64,
    bd: f64,
    /// Coupling to (scale, shift).
    coupling: Vector2<f64>,
}

struct KfSystem {
    id: KeyframeId,
    align_free: bool,
    h: Matrix2<f64>,
    b: Vector2<f64>,
    vars: Vec<HighVar>,
}

fn alignment_identifiable(kf: &Keyframe) -> bool {
    let xs: Vec<f64> = kf
        .error_class
        .indexed()
        .filter(|(_, _, c)| **c == ErrorClass::Low)
        .map(|(x, y, _)| 1.0 / *kf.mono_prior.get(x, y))
        .collect();
    if xs.len() < 2 {
        return false;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64 >= 1e-12
}

fn linearize_keyframe(graph: &FactorGraph, id: KeyframeId, config: &TrackingConfig) -> KfSystem {
    let camera = &graph.camera;
    let kf = &graph.vertices[&id];
    let align_free = alignment_identifiable(kf);
    let out: Vec<(&FlowEdge, &Keyframe)> = graph
        .edges
        .iter()
        .filter(|e| e.src == id)
        .map(|e| (e, &graph.vertices[&e.dst]))
        .collect();
    let mut sys = KfSystem {
        id,
        align_free,
        h: Matrix2::zeros(),
        b: Vector2::zeros(),
        vars: Vec::new(),
    };
    for (x, y, class) in kf.error_class.indexed() {
        let m = 1.0 / *kf.mono_prior.get(x, y);
        let r_prior = *kf.inv_depth.get(x, y) - kf.prior_inv_depth(x, y);
        let j_align = Vector2::new(-m, -1.0);
        match class {
            ErrorClass::Low => {
                if align_free {
                    sys.h += j_align * j_align.transpose() * config.alpha2;
                    sys.b -= j_align * (config.alpha2 * r_prior);
                }
            }
            ErrorClass::High => {
                let mut hdd = config.alpha1;
                let mut bd = -config.alpha1 * r_prior;
                for (edge, dst) in &out {
                    if let Some(t) = residual_at(camera, kf, dst, edge, x, y, true) {
                        let jd = t.sqrt_info * t.j_inv_depth;
                        let r = t.sqrt_info * t.residual;
                        hdd += jd.dot(&jd);
                        bd -= jd.dot(&r);
                    }
                }
                let coupling = if align_free {
                    sys.h += j_align * j_align.transpose() * config.alpha1;
                    sys.b -= j_align * (config.alpha1 * r_prior);
                    j_align * config.alpha1
                } else {
                    Vector2::zeros()
                };
                // unconstrained pixel (no prior weight, no valid flow)
                if hdd > 0.0 {
                    sys.vars.push(HighVar {
                        index: y * camera.width + x,
                        hdd,
                        bd,
                        coupling,
                    });
                }
            }
        }
    }
    sys
}

struct KfStep {
    id: KeyframeId,
    align: Vector2<f64>,
    depths: Vec<(usize, f64)>,
}

fn solve_keyframe(sys: &KfSystem, damping: f64) -> Option<KfStep> {
    let mut align = Vector2::zeros();
    if sys.align_free {
        let mut a = sys.h;
        a[(0, 0)] += damping * a[(0, 0)].max(1e-12);
        a[(1, 1)] += damping * a[(1, 1)].max(1e-12);
        let mut rhs = sys.b;
        for v in &sys.vars {
            let hdd = v.hdd * (1.0 + damping);
            a -= v.coupling * v.coupling.transpose() / hdd;
            rhs -= v.coupling * (v.bd / hdd);
        }
        align = a.cholesky()?.solve(&rhs);
    }
    let depths = sys
        .vars
        .iter()
        .map(|v| (v.index, (v.bd - v.coupling.dot(&align)) / (v.hdd * (1.0 + damping))))
        .collect();
    Some(KfStep {
        id: sys.id,
        align,
        depths,
    })
}

/// Damped Gauss-Newton on the prior-regularized objective with poses fixed.
pub fn refine_prior_objective(graph: &mut FactorGraph, config: &TrackingConfig) -> Result<BaReport> {
    for id in &graph.window {
        graph.keyframe(*id)?;
    }
    let window = graph.window.clone();
    let mut cost = prior_objective(graph, config).total();
    let mut report = BaReport {
        costs: vec![cost],
        iterations: 0,
        accepted: 0,
        final_damping: config.damping,
    };
    let mut damping = config.damping;
    'outer: for _ in 0..config.gn_iters {
        report.iterations += 1;
        let systems: Vec<KfSystem> = window
            .par_iter()
            .map(|&id| linearize_keyframe(graph, id, config))
            .collect();
        if systems.iter().all(|s| s.vars.is_empty() && !s.align_free) {
            break;
        }
        loop {
            let steps: Option<Vec<KfStep>> = systems.iter().map(|s| solve_keyframe(s, damping)).collect();
            let Some(steps) = steps else {
                damping *= 10.0;
                if damping > 1e6 {
                    return Err(Error::OptimizerStalled(1e6));
                }
                continue;
            };
            let saved: Vec<_> = steps
                .iter()
                .map(|s| {
                    let kf = &graph.vertices[&s.id];
                    (s.id, kf.inv_depth.clone(), kf.scale, kf.shift)
                })
                .collect();
            let mut largest: f64 = 0.0;
            for s in &steps {
                let kf = graph.vertices.get_mut(&s.id).unwrap();
                kf.scale += s.align.x;
                kf.shift += s.align.y;
                largest = largest.max(s.align.amax());
                for (index, delta) in &s.depths {
                    let d = &mut kf.inv_depth.as_mut_slice()[*index];
                    largest = largest.max(delta.abs() / d.abs().max(1e-12));
                    let next = *d + delta;
                    *d = if next > 0.0 { next } else { 0.5 * *d };
                }
            }
            let next = prior_objective(graph, config).total();
            if next <= cost {
                let gain = cost - next;
                let before = cost;
                cost = next;
                report.costs.push(cost);
                report.accepted += 1;
                damping = (damping * 0.1).max(1e-12);
                if largest < 1e-13 || gain <= super::ba::MIN_RELATIVE_GAIN * before {
                    break 'outer;
                }
                break;
            }
            for (id, depth, scale, shift) in saved {
                let kf = graph.vertices.get_mut(&id).unwrap();
                kf.inv_depth = depth;
                kf.scale = scale;
                kf.shift = shift;
            }
            damping *= 10.0;
            if damping > 1e6 {
                break 'outer;
            }
        }
    }
    report.final_damping = damping;
    Ok(report)
}

/// Reports from the interleaved schedule, one pair per round.
#[derive(Debug, Clone)]
pub struct DspoReport {
    pub rounds: Vec<(BaReport, BaReport)>,
}

/// Interleaves window optimization (poses and all depths) with the
/// prior-regularized refinement for `dspo_rounds` rounds.
pub fn dspo_refine(graph: &mut FactorGraph, config: &TrackingConfig) -> Result<DspoReport> {
    let mut rounds = Vec::with_capacity(config.dspo_rounds);
    for _ in 0..config.dspo_rounds {
        let geom = optimize_window(graph, config)?;
        let prior = refine_prior_objective(graph, config)?;
        rounds.push((geom, prior));
    }
    Ok(DspoReport { rounds })
}
