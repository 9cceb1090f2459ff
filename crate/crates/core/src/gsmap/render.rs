//! Exact per-pixel CPU splatting and its adjoint.
//!
//! Every Gaussian is projected with the first-order (EWA) approximation
//! `J W Sigma W^T J^T`, truncated at three standard deviations, sorted by
//! camera-frame depth and alpha-composited front to back. Depth is
//! composited with the same weights as color and is not normalized by alpha.

use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;

use super::{Gaussian, GaussianMap};
use crate::geometry::{Camera, Mat3, PixelGrid, Pose, Vec2, Vec3};
use crate::tracking::Rgb;

pub(crate) const NEAR_PLANE: f64 = 0.01;
/// Squared Mahalanobis cutoff (3 sigma).
pub(crate) const CUTOFF: f64 = 9.0;
const BACKWARD_ROWS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: PixelGrid<Rgb>,
    pub depth: PixelGrid<f64>,
    pub alpha: PixelGrid<f64>,
}

pub(crate) struct Projected {
    pub index: usize,
    pub cam_mean: Vec3,
    pub mean2d: Vec2,
    pub jac: Matrix2x3<f64>,
    pub cov3: Mat3,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Rgb,
    pub bbox: [f64; 4],
}

pub(crate) fn project_all(map: &GaussianMap, camera: &Camera, pose: &Pose) -> Vec<Projected> {
    let w_rot = pose.rotation.transpose();
    let mut out: Vec<Projected> = map
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| project_one(index, g, camera, pose, &w_rot))
        .collect();
    out.sort_by(|a, b| a.cam_mean.z.total_cmp(&b.cam_mean.z).then(a.index.cmp(&b.index)));
    out
}

fn project_one(index: usize, g: &Gaussian, camera: &Camera, pose: &Pose, w_rot: &Mat3) -> Option<Projected> {
    let cam_mean = pose.inverse_transform(&g.mean);
    if cam_mean.z <= NEAR_PLANE {
        return None;
    }
    let jac = camera.projection_jacobian(&cam_mean);
    let cov3 = g.covariance();
    let m = jac * w_rot;
    let cov2 = m * cov3 * m.transpose();
    let cov2 = (cov2 + cov2.transpose()) * 0.5;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > 1e-24) {
        return None;
    }
    let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
    let mean2d = camera.project_unchecked(&cam_mean);
    let half_tr = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let lambda_max = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
    let radius = CUTOFF.sqrt() * lambda_max.sqrt();
    let bbox = [
        mean2d.x - radius,
        mean2d.x + radius,
        mean2d.y - radius,
        mean2d.y + radius,
    ];
    if bbox[1] < 0.0 || bbox[0] > (camera.width - 1) as f64 || bbox[3] < 0.0 || bbox[2] > (camera.height - 1) as f64 {
        return None;
    }
    Some(Projected {
        index,
        cam_mean,
        mean2d,
        jac,
        cov3,
        conic,
        opacity: g.opacity(),
        color: g.color,
        bbox,
    })
}

/// Contribution of one Gaussian at one pixel.
pub(crate) struct Hit {
    pub slot: usize,
    pub alpha: f64,
    pub transmittance: f64,
    pub delta: Vec2,
    pub falloff: f64,
}

fn row_candidates(projected: &[Projected], y: f64) -> Vec<usize> {
    projected
        .iter()
        .enumerate()
        .filter(|(_, p)| p.bbox[2] <= y && y <= p.bbox[3])
        .map(|(i, _)| i)
        .collect()
}

/// Front-to-back hits at pixel `(x, y)`; returns final transmittance.
pub(crate) fn pixel_hits(projected: &[Projected], candidates: &[usize], x: f64, y: f64, hits: &mut Vec<Hit>) -> f64 {
    hits.clear();
    let mut t = 1.0;
    let pix = Vec2::new(x, y);
    for &slot in candidates {
        let p = &projected[slot];
        if x < p.bbox[0] || x > p.bbox[1] {
            continue;
        }
        let delta = pix - p.mean2d;
        let q = delta.dot(&(p.conic * delta));
        if q > CUTOFF {
            continue;
        }
        let falloff = (-0.5 * q).exp();
        let alpha = p.opacity * falloff;
        hits.push(Hit {
            slot,
            alpha,
            transmittance: t,
            delta,
            falloff,
        });
        t *= 1.0 - alpha;
    }
    t
}

/// Renders color, depth and accumulated alpha.
pub fn render(map: &GaussianMap, camera: &Camera, pose: &Pose) -> RenderOutput {
    let projected = project_all(map, camera, pose);
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<(Rgb, f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let cand = row_candidates(&projected, y as f64);
            let mut hits = Vec::new();
            (0..w)
                .map(|x| {
                    let t_final = pixel_hits(&projected, &cand, x as f64, y as f64, &mut hits);
                    let mut c = Rgb::zeros();
                    let mut d = 0.0;
                    let mut a = 0.0;
                    for hit in &hits {
                        let p = &projected[hit.slot];
                        let wgt = hit.alpha * hit.transmittance;
                        c += p.color * wgt;
                        d += p.cam_mean.z * wgt;
                        a += wgt;
                    }
                    let _ = t_final;
                    (c, d, a)
                })
                .collect()
        })
        .collect();
    let flat: Vec<(Rgb, f64, f64)> = rows.into_iter().flatten().collect();
    RenderOutput {
        color: PixelGrid::from_vec(w, h, flat.iter().map(|v| v.0).collect()).unwrap(),
        depth: PixelGrid::from_vec(w, h, flat.iter().map(|v| v.1).collect()).unwrap(),
        alpha: PixelGrid::from_vec(w, h, flat.iter().map(|v| v.2).collect()).unwrap(),
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
/// `rotation` is the tangent of a right perturbation `R exp([phi])`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub mean: Vec3,
    pub log_scales: Vec3,
    pub rotation: Vec3,
    pub opacity_logit: f64,
    pub color: Rgb,
}

impl GaussianGrad {
    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(self.log_scales.iter())
            .chain(self.rotation.iter())
            .chain(self.color.iter())
            .all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }

    pub(crate) fn add(&mut self, o: &GaussianGrad) {
        self.mean += o.mean;
        self.log_scales += o.log_scales;
        self.rotation += o.rotation;
        self.opacity_logit += o.opacity_logit;
        self.color += o.color;
    }
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: Vec2,
    cov2d: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Rgb,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean2d += o.mean2d;
        self.cov2d += o.cov2d;
        self.depth += o.depth;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Back-propagates per-pixel color and depth gradients to every Gaussian.
pub fn render_backward(
    map: &GaussianMap,
    camera: &Camera,
    pose: &Pose,
    d_color: &PixelGrid<Rgb>,
    d_depth: &PixelGrid<f64>,
) -> Vec<GaussianGrad> {
    let projected = project_all(map, camera, pose);
    let (w, h) = (camera.width, camera.height);
    let n = projected.len();
    // fixed row blocks keep the summation order independent of thread count
    let row_grads: Vec<Vec<ScreenGrad>> = (0..h.div_ceil(BACKWARD_ROWS))
        .into_par_iter()
        .map(|block| {
            let mut acc = vec![ScreenGrad::default(); n];
            let mut hits = Vec::new();
            for y in block * BACKWARD_ROWS..((block + 1) * BACKWARD_ROWS).min(h) {
                let cand = row_candidates(&projected, y as f64);
                for x in 0..w {
                    let gc = *d_color.get(x, y);
                    let gd = *d_depth.get(x, y);
                    if gc == Rgb::zeros() && gd == 0.0 {
                        continue;
                    }
                    pixel_hits(&projected, &cand, x as f64, y as f64, &mut hits);
                    let mut behind_c = Rgb::zeros();
                    let mut behind_d = 0.0;
                    for hit in hits.iter().rev() {
                        let p = &projected[hit.slot];
                        let wgt = hit.alpha * hit.transmittance;
                        let z = p.cam_mean.z;
                        let d_alpha = hit.transmittance * (gc.dot(&(p.color - behind_c)) + gd * (z - behind_d));
                        let a = &mut acc[hit.slot];
                        a.color += gc * wgt;
                        a.depth += gd * wgt;
                        a.opacity += d_alpha * hit.falloff;
                        // alpha = o * exp(-q/2)
                        let d_q = -0.5 * d_alpha * hit.alpha;
                        let cd = p.conic * hit.delta;
                        a.mean2d += cd * (-2.0 * d_q);
                        a.cov2d -= cd * cd.transpose() * d_q;
                        behind_c = p.color * hit.alpha + behind_c * (1.0 - hit.alpha);
                        behind_d = z * hit.alpha + behind_d * (1.0 - hit.alpha);
                    }
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![ScreenGrad::default(); n];
    for row in &row_grads {
        for (s, r) in screen.iter_mut().zip(row) {
            s.add(r);
        }
    }

    let mut grads = vec![GaussianGrad::default(); map.len()];
    let w_rot = pose.rotation.transpose();
    for (p, s) in projected.iter().zip(&screen) {
        let g = &map.gaussians[p.index];
        let m = p.cam_mean;
        let iz = 1.0 / m.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let jw = p.jac * w_rot;
        // Sigma2d = M Sigma3 M^T, M = J W
        let gs = s.cov2d;
        let d_cov3 = jw.transpose() * gs * jw;
        let d_m = gs * jw * p.cov3 * 2.0;
        let d_j = d_m * w_rot.transpose();
        let mut d_cam = p.jac.transpose() * s.mean2d;
        d_cam.z += s.depth;
        let (fx, fy) = (camera.fx, camera.fy);
        d_cam.x += d_j[(0, 2)] * (-fx * iz2);
        d_cam.y += d_j[(1, 2)] * (-fy * iz2);
        d_cam.z += d_j[(0, 0)] * (-fx * iz2)
            + d_j[(0, 2)] * (2.0 * fx * m.x * iz3)
            + d_j[(1, 1)] * (-fy * iz2)
            + d_j[(1, 2)] * (2.0 * fy * m.y * iz3);

        let scales = g.scales();
        let a = g.rotation.transpose() * d_cov3 * g.rotation;
        let s2 = scales.map(|v| v * v);
        let mut log_scales = Vec3::zeros();
        for k in 0..3 {
            log_scales[k] = 2.0 * s2[k] * a[(k, k)];
        }
        let b = Mat3::from_diagonal(&s2) * a - a * Mat3::from_diagonal(&s2);
        let rotation = Vec3::new(b[(1, 2)] - b[(2, 1)], b[(2, 0)] - b[(0, 2)], b[(0, 1)] - b[(1, 0)]);
        let o = p.opacity;
        grads[p.index] = GaussianGrad {
            mean: pose.rotation * d_cam,
            log_scales,
            rotation,
            opacity_logit: s.opacity * o * (1.0 - o),
            color: s.color,
        };
    }
    grads
}
