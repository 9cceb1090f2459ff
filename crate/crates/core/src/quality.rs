//! Image quality metrics on RGB grids with values in [0, 1].
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at every
//! position where the window fits inside the image, with the usual
//! constants `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over positions and
//! channels.

use crate::error::{Error, Result};
use crate::geometry::PixelGrid;
use crate::tracking::Rgb;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_SSIM_WINDOW: usize = 11;
/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse(a: &PixelGrid<Rgb>, b: &PixelGrid<Rgb>) -> Result<f64> {
    check_shape(a, b)?;
    let sum: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q).norm_squared()).sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// `10 log10(1 / MSE)`; `+inf` for identical images.
pub fn psnr(a: &PixelGrid<Rgb>, b: &PixelGrid<Rgb>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// PSNR clamped to [`PSNR_CAP_DB`].
pub fn psnr_capped(a: &PixelGrid<Rgb>, b: &PixelGrid<Rgb>) -> Result<f64> {
    Ok(psnr(a, b)?.min(PSNR_CAP_DB))
}

fn check_shape(a: &PixelGrid<Rgb>, b: &PixelGrid<Rgb>) -> Result<()> {
    if !a.same_shape(b) || a.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Window actually used for an image: the requested size, shrunk to the
/// largest odd size that fits.
pub fn effective_window(width: usize, height: usize, requested: usize) -> usize {
    let mut ws = requested.min(width).min(height).max(1);
    if ws % 2 == 0 {
        ws -= 1;
    }
    ws
}

/// Normalized 1D Gaussian taps; sigma scales with the window (1.5 at 11).
pub fn gaussian_taps(window: usize) -> Vec<f64> {
    let sigma = 1.5 * window as f64 / 11.0;
    let c = (window / 2) as f64;
    let taps: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn filter_valid(img: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let ws = g.len();
    let (ow, oh) = (w + 1 - ws, h + 1 - ws);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().enumerate().map(|(k, t)| t * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, t)| t * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_adjoint(grad: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let ws = g.len();
    let (ow, oh) = (w + 1 - ws, h + 1 - ws);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = grad[y * ow + x];
            for (k, t) in g.iter().enumerate() {
                tmp[(y + k) * ow + x] += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, t) in g.iter().enumerate() {
                out[y * w + x + k] += t * v;
            }
        }
    }
    out
}

fn channel(img: &PixelGrid<Rgb>, c: usize) -> Vec<f64> {
    img.iter().map(|p| p[c]).collect()
}

struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    ssim: Vec<f64>,
    d_mu: Vec<f64>,
    d_var: Vec<f64>,
    d_cov: Vec<f64>,
}

fn channel_stats(x: &[f64], y: &[f64], w: usize, h: usize, g: &[f64]) -> ChannelStats {
    let mu_x = filter_valid(x, w, h, g);
    let mu_y = filter_valid(y, w, h, g);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = filter_valid(&xx, w, h, g);
    let eyy = filter_valid(&yy, w, h, g);
    let exy = filter_valid(&xy, w, h, g);
    let n = mu_x.len();
    let mut stats = ChannelStats {
        mu_x,
        mu_y,
        ssim: vec![0.0; n],
        d_mu: vec![0.0; n],
        d_var: vec![0.0; n],
        d_cov: vec![0.0; n],
    };
    for i in 0..n {
        let (mx, my) = (stats.mu_x[i], stats.mu_y[i]);
        let vx = exx[i] - mx * mx;
        let vy = eyy[i] - my * my;
        let cxy = exy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        stats.ssim[i] = s;
        stats.d_mu[i] = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
        stats.d_var[i] = -s / b2;
        stats.d_cov[i] = 2.0 * a1 / (b1 * b2);
    }
    stats
}

/// Mean SSIM with the given window size.
pub fn ssim_window(a: &PixelGrid<Rgb>, b: &PixelGrid<Rgb>, window: usize) -> Result<f64> {
    check_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    let g = gaussian_taps(effective_window(w, h, window));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let st = channel_stats(&channel(a, c), &channel(b, c), w, h, &g);
        total += st.ssim.iter().sum::<f64>();
        count += st.ssim.len();
    }
    Ok(total / count as f64)
}

pub fn ssim(a: &PixelGrid<Rgb>, b: &PixelGrid<Rgb>) -> Result<f64> {
    ssim_window(a, b, DEFAULT_SSIM_WINDOW)
}

/// Mean SSIM of `x` against `y` and its gradient with respect to `x`.
pub fn ssim_with_gradient(x: &PixelGrid<Rgb>, y: &PixelGrid<Rgb>, window: usize) -> Result<(f64, PixelGrid<Rgb>)> {
    check_shape(x, y)?;
    let (w, h) = (x.width(), x.height());
    let g = gaussian_taps(effective_window(w, h, window));
    let mut grad = PixelGrid::filled(w, h, Rgb::zeros());
    let mut total = 0.0;
    let per_channel = (w + 1 - g.len()) * (h + 1 - g.len());
    let m = (3 * per_channel) as f64;
    for c in 0..3 {
        let xc = channel(x, c);
        let yc = channel(y, c);
        let st = channel_stats(&xc, &yc, w, h, &g);
        total += st.ssim.iter().sum::<f64>();
        let var_mu: Vec<f64> = st.d_var.iter().zip(&st.mu_x).map(|(a, b)| a * b).collect();
        let cov_mu: Vec<f64> = st.d_cov.iter().zip(&st.mu_y).map(|(a, b)| a * b).collect();
        let t_mu = filter_adjoint(&st.d_mu, w, h, &g);
        let t_var = filter_adjoint(&st.d_var, w, h, &g);
        let t_var_mu = filter_adjoint(&var_mu, w, h, &g);
        let t_cov = filter_adjoint(&st.d_cov, w, h, &g);
        let t_cov_mu = filter_adjoint(&cov_mu, w, h, &g);
        for (i, p) in grad.as_mut_slice().iter_mut().enumerate() {
            p[c] = (t_mu[i] + 2.0 * xc[i] * t_var[i] - 2.0 * t_var_mu[i] + yc[i] * t_cov[i] - t_cov_mu[i]) / m;
        }
    }
    Ok((total / m, grad))
}
