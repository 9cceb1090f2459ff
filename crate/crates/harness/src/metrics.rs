//! Trajectory and depth accuracy metrics.

use fslam_core::geometry::{umeyama_align, PixelGrid, Pose, Vec3};

pub use fslam_core::quality::{psnr, psnr_capped, ssim, PSNR_CAP_DB};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    /// Compare positions as given.
    None,
    /// Rotation and translation (metric sequences).
    Rigid,
    /// Rotation, translation and scale (monocular sequences).
    #[default]
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
}

/// Absolute trajectory error of the positions after aligning `est` to `gt`.
pub fn ate_rmse(est: &[Pose], gt: &[Pose], alignment: Alignment) -> Result<AteStats> {
    if est.len() != gt.len() {
        return Err(HarnessError::Format(format!(
            "trajectory lengths differ: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 3 {
        return Err(HarnessError::Format("ATE needs at least three poses".into()));
    }
    let aligned: Vec<Vec3> = match alignment {
        Alignment::None => est.iter().map(|p| p.translation).collect(),
        Alignment::Rigid | Alignment::Similarity => {
            let sim = umeyama_align(est, gt, alignment == Alignment::Similarity)?;
            est.iter().map(|p| sim.apply(&p.translation)).collect()
        }
    };
    let mut errs: Vec<f64> = aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a - g.translation).norm())
        .collect();
    let n = errs.len() as f64;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errs.iter().sum::<f64>() / n;
    errs.sort_by(f64::total_cmp);
    let m = errs.len() / 2;
    let median = if errs.len() % 2 == 1 {
        errs[m]
    } else {
        0.5 * (errs[m - 1] + errs[m])
    };
    Ok(AteStats { rmse, mean, median })
}

/// Mean `|est - gt|` over pixels with a positive finite ground truth, and
/// with `gt <= max_range` when a range is given.
pub fn depth_l1(est: &PixelGrid<f64>, gt: &PixelGrid<f64>, max_range: Option<f64>) -> Result<f64> {
    if !est.same_shape(gt) {
        return Err(HarnessError::Format("depth maps differ in size".into()));
    }
    let (sum, n) = est
        .iter()
        .zip(gt.iter())
        .filter(|(_, g)| **g > 0.0 && g.is_finite() && max_range.is_none_or(|r| **g <= r))
        .fold((0.0, 0usize), |(s, n), (e, g)| (s + (e - g).abs(), n + 1));
    if n == 0 {
        return Err(HarnessError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Pixel-weighted depth L1 over several maps.
pub fn depth_l1_many(est: &[&PixelGrid<f64>], gt: &[&PixelGrid<f64>], max_range: Option<f64>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, g) in est.iter().zip(gt) {
        let count = g
            .iter()
            .filter(|g| **g > 0.0 && g.is_finite() && max_range.is_none_or(|r| **g <= r))
            .count();
        if count == 0 {
            continue;
        }
        sum += depth_l1(e, g, max_range)? * count as f64;
        n += count;
    }
    if n == 0 {
        return Err(HarnessError::EmptyMask);
    }
    Ok(sum / n as f64)
}
