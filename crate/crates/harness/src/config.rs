//! TOML run configuration, one table per module.

use std::path::Path;

use fslam_core::backend::LoopClosureConfig;
use fslam_core::fusion::{DepthSampling, FusionConfig};
use fslam_core::gsmap::{AdamConfig, MapLossConfig};
use fslam_core::tracking::TrackingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::Alignment;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub name: Scenario,
    pub seed: u64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            name: Scenario::Smoke,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    pub kf_flow_threshold: f64,
    pub consistency_threshold: u32,
    pub alpha1: f64,
    pub alpha2: f64,
    pub window_size: usize,
    pub gn_iters: usize,
    pub dspo_rounds: usize,
    pub damping: f64,
}

impl Default for TrackingSection {
    fn default() -> Self {
        let c = TrackingConfig::default();
        Self {
            kf_flow_threshold: c.kf_flow_threshold,
            consistency_threshold: c.consistency_threshold,
            alpha1: c.alpha1,
            alpha2: c.alpha2,
            window_size: c.window_size,
            gn_iters: c.gn_iters,
            dspo_rounds: c.dspo_rounds,
            damping: c.damping,
        }
    }
}

impl TrackingSection {
    pub fn to_core(&self) -> TrackingConfig {
        TrackingConfig {
            kf_flow_threshold: self.kf_flow_threshold,
            consistency_threshold: self.consistency_threshold,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            window_size: self.window_size,
            gn_iters: self.gn_iters,
            dspo_rounds: self.dspo_rounds,
            damping: self.damping,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingName {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub eta: f64,
    pub n_key: u32,
    pub sampling: SamplingName,
    /// Ablation: use the multi-view depth alone (`w_mv = 1`).
    pub force_multiview: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        let c = FusionConfig::default();
        Self {
            eta: c.eta,
            n_key: c.n_key,
            sampling: SamplingName::Bilinear,
            force_multiview: false,
        }
    }
}

impl FusionSection {
    pub fn to_core(&self) -> FusionConfig {
        FusionConfig {
            eta: self.eta,
            n_key: self.n_key,
            sampling: match self.sampling {
                SamplingName::Bilinear => DepthSampling::Bilinear,
                SamplingName::Nearest => DepthSampling::Nearest,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_reg: f64,
    pub ssim_window: usize,
    /// Pixel stride of Gaussian initialization.
    pub stride: usize,
    /// Keyframes supervising the incremental optimization.
    pub window: usize,
    pub iters_per_keyframe: usize,
    /// Iterations of the final optimization over all keyframes.
    pub final_iters: usize,
    pub lr_mean: f64,
    pub lr_log_scales: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub final_lr_fraction: f64,
}

impl Default for MappingSection {
    fn default() -> Self {
        let l = MapLossConfig::default();
        let a = AdamConfig::default();
        Self {
            lambda_ssim: l.lambda_ssim,
            lambda_depth: l.lambda_depth,
            lambda_reg: l.lambda_reg,
            ssim_window: l.ssim_window,
            stride: 4,
            window: 4,
            iters_per_keyframe: 10,
            final_iters: 60,
            lr_mean: a.lr_mean,
            lr_log_scales: a.lr_log_scales,
            lr_rotation: a.lr_rotation,
            lr_opacity: a.lr_opacity,
            lr_color: a.lr_color,
            final_lr_fraction: a.final_lr_fraction,
        }
    }
}

impl MappingSection {
    pub fn loss(&self) -> MapLossConfig {
        MapLossConfig {
            lambda_ssim: self.lambda_ssim,
            lambda_depth: self.lambda_depth,
            lambda_reg: self.lambda_reg,
            ssim_window: self.ssim_window,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_mean: self.lr_mean,
            lr_log_scales: self.lr_log_scales,
            lr_rotation: self.lr_rotation,
            lr_opacity: self.lr_opacity,
            lr_color: self.lr_color,
            final_lr_fraction: self.final_lr_fraction,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopClosureSection {
    pub enabled: bool,
    pub covis_overlap_min: f64,
    pub min_temporal_gap: usize,
    pub max_candidates_per_kf: usize,
    pub local_ba_iters: usize,
}

impl Default for LoopClosureSection {
    fn default() -> Self {
        let c = LoopClosureConfig::default();
        Self {
            enabled: true,
            covis_overlap_min: c.covis_overlap_min,
            min_temporal_gap: c.min_temporal_gap,
            max_candidates_per_kf: c.max_candidates_per_kf,
            local_ba_iters: 10,
        }
    }
}

impl LoopClosureSection {
    pub fn to_core(&self) -> LoopClosureConfig {
        LoopClosureConfig {
            covis_overlap_min: self.covis_overlap_min,
            min_temporal_gap: self.min_temporal_gap,
            max_candidates_per_kf: self.max_candidates_per_kf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// Global BA after this many new keyframes (0 disables the periodic pass).
    pub global_ba_every: usize,
    pub global_ba_iters: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            global_ba_every: 10,
            global_ba_iters: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentName {
    None,
    Rigid,
    #[default]
    Similarity,
}

impl From<AlignmentName> for Alignment {
    fn from(a: AlignmentName) -> Self {
        match a {
            AlignmentName::None => Alignment::None,
            AlignmentName::Rigid => Alignment::Rigid,
            AlignmentName::Similarity => Alignment::Similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Run mapping on the tracking thread instead of a second thread.
    pub sequential: bool,
    pub ate_alignment: AlignmentName,
    /// Upper range of the near-field depth metric in meters.
    pub near_range: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            sequential: false,
            ate_alignment: AlignmentName::Similarity,
            near_range: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub scene: SceneSection,
    pub tracking: TrackingSection,
    pub fusion: FusionSection,
    pub mapping: MappingSection,
    pub loop_closure: LoopClosureSection,
    pub backend: BackendSection,
    pub pipeline: PipelineSection,
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: fslam_core::Result<()>| r.map_err(|e| HarnessError::Config(e.to_string()));
        wrap(self.tracking.to_core().validate())?;
        wrap(self.fusion.to_core().validate())?;
        wrap(self.mapping.loss().validate())?;
        wrap(self.loop_closure.to_core().validate())?;
        let m = &self.mapping;
        if m.stride < 1 || m.window < 1 || m.final_iters < 1 {
            return Err(HarnessError::Config(
                "mapping stride, window and final_iters must be at least 1".into(),
            ));
        }
        if !(m.final_lr_fraction > 0.0 && m.final_lr_fraction <= 1.0) {
            return Err(HarnessError::Config("final_lr_fraction must lie in (0, 1]".into()));
        }
        if self.backend.global_ba_iters < 1 {
            return Err(HarnessError::Config("global_ba_iters must be at least 1".into()));
        }
        if !(self.pipeline.near_range > 0.0) {
            return Err(HarnessError::Config("near_range must be positive".into()));
        }
        Ok(())
    }
}
