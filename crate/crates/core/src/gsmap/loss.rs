use super::render::{render, render_backward};
use super::{Gaussian, GaussianMap};
use crate::error::{Error, Result};
use crate::fusion::ProxyDepth;
use crate::geometry::{so3_exp, Camera, PixelGrid, Pose, Vec3};
use crate::quality::{ssim_with_gradient, DEFAULT_SSIM_WINDOW};
use crate::tracking::{Keyframe, Rgb};

pub use super::render::GaussianGrad;

#[derive(Debug, Clone, PartialEq)]
pub struct MapLossConfig {
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_reg: f64,
    pub ssim_window: usize,
}

impl Default for MapLossConfig {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_depth: 0.2,
            lambda_reg: 10.0,
            ssim_window: DEFAULT_SSIM_WINDOW,
        }
    }
}

impl MapLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_depth >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::InvalidConfig(format!(
                "lambda_ssim {} outside [0, 1]",
                self.lambda_ssim
            )));
        }
        if self.ssim_window < 1 {
            return Err(Error::InvalidConfig("ssim_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// One supervising keyframe: camera pose, observed image and proxy depth
/// (non-positive proxy pixels are ignored by the depth term).
#[derive(Debug, Clone, Copy)]
pub struct SupervisionView<'a> {
    pub pose: &'a Pose,
    pub image: &'a PixelGrid<Rgb>,
    pub proxy_depth: &'a PixelGrid<f64>,
}

impl<'a> SupervisionView<'a> {
    pub fn from_keyframe(kf: &'a Keyframe, proxy: &'a ProxyDepth) -> Self {
        Self {
            pose: &kf.pose,
            image: &kf.image,
            proxy_depth: &proxy.depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// `sum_views (1 - lambda_ssim) L1 + lambda_ssim (1 - SSIM)`.
    pub photometric: f64,
    /// `lambda_depth * sum_views mean |D_rendered - D_proxy|`.
    pub depth: f64,
    /// `lambda_reg * sum_j R(Sigma_j)`.
    pub regularizer: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.photometric + self.depth + self.regularizer
    }
}

/// Scale-isotropy penalty `sum_axes (s - mean(s))^2`.
pub fn regularizer(g: &Gaussian) -> f64 {
    let s = g.scales();
    let mean = s.mean();
    s.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Half-width of the quadratic zone of the robust L1 penalty. Inside it the
/// penalty is `r^2 / (2 delta)`, outside `|r| - delta / 2`.
pub const HUBER_DELTA: f64 = 1e-3;

/// Robust L1 value and derivative.
pub fn huber(r: f64) -> (f64, f64) {
    if r.abs() <= HUBER_DELTA {
        (0.5 * r * r / HUBER_DELTA, r / HUBER_DELTA)
    } else {
        (r.abs() - 0.5 * HUBER_DELTA, r.signum())
    }
}

/// Composite map loss over the supervising views and its analytic gradient.
///
/// Photometric and depth terms use the robust L1 [`huber`] averaged per view;
/// views are summed.
pub fn map_loss(
    map: &GaussianMap,
    camera: &Camera,
    views: &[SupervisionView<'_>],
    config: &MapLossConfig,
) -> Result<(LossBreakdown, Vec<GaussianGrad>)> {
    if views.is_empty() {
        return Err(Error::Precondition(
            "map loss needs at least one supervising view".into(),
        ));
    }
    let mut loss = LossBreakdown::default();
    let mut grads = vec![GaussianGrad::default(); map.len()];
    let (w, h) = (camera.width, camera.height);
    for view in views {
        if view.image.width() != w || view.image.height() != h || !view.image.same_shape(view.proxy_depth) {
            return Err(Error::DimensionMismatch(
                "supervision view does not match camera".into(),
            ));
        }
        let out = render(map, camera, view.pose);
        let n = (w * h) as f64;
        let mut d_color = PixelGrid::filled(w, h, Rgb::zeros());
        let mut l1 = 0.0;
        let l1_weight = 1.0 - config.lambda_ssim;
        for ((dc, r), o) in d_color
            .as_mut_slice()
            .iter_mut()
            .zip(out.color.iter())
            .zip(view.image.iter())
        {
            let diff = r - o;
            for k in 0..3 {
                let (v, d) = huber(diff[k]);
                l1 += v;
                dc[k] = d * (l1_weight / (3.0 * n));
            }
        }
        let mut photometric = l1_weight * l1 / (3.0 * n);
        if config.lambda_ssim > 0.0 {
            let (s, g) = ssim_with_gradient(&out.color, view.image, config.ssim_window)?;
            photometric += config.lambda_ssim * (1.0 - s);
            for (dc, gs) in d_color.as_mut_slice().iter_mut().zip(g.iter()) {
                *dc -= gs * config.lambda_ssim;
            }
        }
        loss.photometric += photometric;

        let mut d_depth = PixelGrid::filled(w, h, 0.0);
        let valid = view.proxy_depth.iter().filter(|d| **d > 0.0).count();
        if valid > 0 && config.lambda_depth > 0.0 {
            let scale = config.lambda_depth / valid as f64;
            let mut sum = 0.0;
            for ((dd, r), p) in d_depth
                .as_mut_slice()
                .iter_mut()
                .zip(out.depth.iter())
                .zip(view.proxy_depth.iter())
            {
                if *p > 0.0 {
                    let (v, d) = huber(r - p);
                    sum += v;
                    *dd = d * scale;
                }
            }
            loss.depth += scale * sum;
        }
        for (acc, g) in grads
            .iter_mut()
            .zip(render_backward(map, camera, view.pose, &d_color, &d_depth))
        {
            acc.add(&g);
        }
    }
    for (g, acc) in map.gaussians.iter().zip(grads.iter_mut()) {
        loss.regularizer += config.lambda_reg * regularizer(g);
        let s = g.scales();
        let mean = s.mean();
        for k in 0..3 {
            acc.log_scales[k] += config.lambda_reg * 2.0 * (s[k] - mean) * s[k];
        }
    }
    Ok((loss, grads))
}

/// Adam step sizes per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr_mean: f64,
    pub lr_log_scales: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rates decay exponentially to this fraction over one call.
    pub final_lr_fraction: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_mean: 3e-4,
            lr_log_scales: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 2.5e-2,
            lr_color: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            final_lr_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    /// Initial total loss followed by the loss after every step.
    pub losses: Vec<f64>,
    pub final_loss: LossBreakdown,
}

#[derive(Clone, Copy, Default)]
struct Moments {
    m: [f64; 13],
    v: [f64; 13],
}

fn flatten(g: &GaussianGrad) -> [f64; 13] {
    [
        g.mean.x,
        g.mean.y,
        g.mean.z,
        g.log_scales.x,
        g.log_scales.y,
        g.log_scales.z,
        g.rotation.x,
        g.rotation.y,
        g.rotation.z,
        g.opacity_logit,
        g.color.x,
        g.color.y,
        g.color.z,
    ]
}

fn non_finite_error(map: &GaussianMap, grads: &[GaussianGrad], loss: f64) -> Error {
    if let Some(i) = map.gaussians.iter().position(|g| !g.is_finite()) {
        return Error::NonFiniteLoss {
            index: i,
            detail: format!("parameters of gaussian {i} are not finite (loss {loss})"),
        };
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Error::NonFiniteLoss {
            index: i,
            detail: format!("gradient of gaussian {i} is not finite (loss {loss})"),
        };
    }
    Error::NonFiniteLoss {
        index: 0,
        detail: format!("loss evaluated to {loss}"),
    }
}

/// First-order optimization of all Gaussian parameters with Adam.
///
/// Rotations are updated in their tangent space and re-orthonormalized;
/// colors are clamped to [0, 1]. The map with the lowest loss seen is kept,
/// so the returned loss never exceeds the initial one.
pub fn optimize_map(
    map: &mut GaussianMap,
    camera: &Camera,
    views: &[SupervisionView<'_>],
    config: &MapLossConfig,
    adam: &AdamConfig,
    iters: usize,
) -> Result<OptimizeReport> {
    if iters < 1 {
        return Err(Error::Precondition("optimize_map needs at least one iteration".into()));
    }
    if !(adam.final_lr_fraction > 0.0 && adam.final_lr_fraction <= 1.0) {
        return Err(Error::InvalidConfig("final_lr_fraction must lie in (0, 1]".into()));
    }
    let lr: [f64; 13] = [
        adam.lr_mean,
        adam.lr_mean,
        adam.lr_mean,
        adam.lr_log_scales,
        adam.lr_log_scales,
        adam.lr_log_scales,
        adam.lr_rotation,
        adam.lr_rotation,
        adam.lr_rotation,
        adam.lr_opacity,
        adam.lr_color,
        adam.lr_color,
        adam.lr_color,
    ];
    let evaluate = |map: &GaussianMap| -> Result<(LossBreakdown, Vec<GaussianGrad>)> {
        let (loss, grads) = map_loss(map, camera, views, config)?;
        let total = loss.total();
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) || map.gaussians.iter().any(|g| !g.is_finite()) {
            return Err(non_finite_error(map, &grads, total));
        }
        Ok((loss, grads))
    };
    let mut moments = vec![Moments::default(); map.len()];
    let (mut loss, mut grads) = evaluate(map)?;
    let mut losses = vec![loss.total()];
    let mut best = (loss, map.gaussians.clone());
    for step in 1..=iters {
        let decay = adam.final_lr_fraction.powf((step - 1) as f64 / iters as f64);
        let bc1 = 1.0 - adam.beta1.powi(step as i32);
        let bc2 = 1.0 - adam.beta2.powi(step as i32);
        for ((g, grad), mom) in map.gaussians.iter_mut().zip(&grads).zip(moments.iter_mut()) {
            let flat = flatten(grad);
            let mut upd = [0.0; 13];
            for k in 0..13 {
                mom.m[k] = adam.beta1 * mom.m[k] + (1.0 - adam.beta1) * flat[k];
                mom.v[k] = adam.beta2 * mom.v[k] + (1.0 - adam.beta2) * flat[k] * flat[k];
                let mh = mom.m[k] / bc1;
                let vh = mom.v[k] / bc2;
                upd[k] = -lr[k] * decay * mh / (vh.sqrt() + adam.epsilon);
            }
            g.mean += Vec3::new(upd[0], upd[1], upd[2]);
            g.log_scales += Vec3::new(upd[3], upd[4], upd[5]);
            let phi = Vec3::new(upd[6], upd[7], upd[8]);
            if phi != Vec3::zeros() {
                g.rotation = crate::geometry::orthonormalize(&(g.rotation * so3_exp(&phi)));
            }
            g.opacity_logit += upd[9];
            g.color = (g.color + Vec3::new(upd[10], upd[11], upd[12])).map(|c| c.clamp(0.0, 1.0));
        }
        (loss, grads) = evaluate(map)?;
        losses.push(loss.total());
        if loss.total() < best.0.total() {
            best = (loss, map.gaussians.clone());
        }
    }
    map.gaussians = best.1;
    let final_loss = best.0;
    Ok(OptimizeReport { losses, final_loss })
}
