//! Runtime configuration for every pipeline stage.
//!
//! One TOML file with per-module sections is the single source of truth for
//! all tunables; the CLI overlays flag values on top of the file.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub imaging: ImagingConfig,
    pub segmentation: SegmentationConfig,
    pub flow: FlowConfig,
    pub dc: DcConfig,
    pub tracker: TrackerConfig,
    pub xform: XformConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingConfig {
    /// Gaussian sigma for Canny smoothing.
    pub canny_sigma: f64,
    /// Hysteresis thresholds on [0,1] gradient magnitude.
    pub canny_low: f64,
    pub canny_high: f64,
    /// Bins per channel for LAB histograms.
    pub histogram_bins: usize,
    /// Elliptic Fourier descriptor harmonic count.
    pub efd_orders: usize,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            canny_sigma: 1.0,
            canny_low: 0.1,
            canny_high: 0.2,
            histogram_bins: 64,
            efd_orders: 36,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentationMode {
    /// Trapped-ball filling bounded by edge pixels.
    TrappedBall,
    /// Plain connected components of the foreground (textured inputs).
    Components,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub mode: SegmentationMode,
    /// k for background color clustering.
    pub background_clusters: usize,
    /// Lab-rescaled distance below which a pixel counts as background.
    pub background_tolerance: f64,
    /// Largest trapped-ball radius; filling proceeds from this down to 1.
    pub ball_radius_max: usize,
    /// Regions smaller than this are merged into their largest neighbor.
    pub min_region_area: usize,
    /// Frames sampled for background estimation.
    pub background_sample_frames: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            mode: SegmentationMode::TrappedBall,
            background_clusters: 8,
            background_tolerance: 0.08,
            ball_radius_max: 3,
            min_region_area: 10,
            background_sample_frames: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Pyramid levels for block matching.
    pub levels: usize,
    /// Block size in pixels.
    pub block_size: usize,
    /// Search radius per level in pixels.
    pub search_radius: usize,
    /// RANSAC iterations for affine estimation.
    pub ransac_iters: usize,
    /// Inlier residual threshold in pixels.
    pub ransac_threshold: f64,
    /// Minimum inlier ratio for consensus.
    pub ransac_min_inlier_ratio: f64,
    /// Template search stride in degrees.
    pub template_stride_deg: f64,
    /// Directory of precomputed .flo files; bypasses block matching.
    pub precomputed_dir: Option<std::path::PathBuf>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            block_size: 8,
            search_radius: 4,
            ransac_iters: 200,
            ransac_threshold: 1.5,
            ransac_min_inlier_ratio: 0.5,
            template_stride_deg: 1.0,
            precomputed_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DcConfig {
    /// Pyramid levels K for the multi-scale loss.
    pub pyramid_levels: usize,
    /// Layering softmax temperature.
    pub tau: f64,
    /// Multiply tau by this factor every `tau_anneal_every` iterations.
    pub tau_anneal_factor: f64,
    pub tau_anneal_every: usize,
    /// Weight of the L1 parameter regularizer.
    pub reg_weight: f64,
    pub max_iters: usize,
    /// Stop when the accepted-loss delta falls below this.
    pub convergence_tol: f64,
    /// Per-group step sizes.
    pub step_translation: f64,
    pub step_angle: f64,
    pub step_scale: f64,
    pub step_shear: f64,
    pub step_z: f64,
    /// Momentum coefficient.
    pub momentum: f64,
}

impl Default for DcConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            tau: 0.05,
            tau_anneal_factor: 0.5,
            tau_anneal_every: 100,
            reg_weight: 0.01,
            max_iters: 400,
            convergence_tol: 1e-6,
            step_translation: 0.5,
            step_angle: 0.01,
            step_scale: 0.005,
            step_shear: 0.005,
            step_z: 0.05,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Candidate mappings scoring above this are rejected.
    pub epsilon: f64,
    /// Skip DC for source-target pairs whose coarse weight is zero.
    pub coarse_prune: bool,
    /// Accept a refinement only if it improves on the initialization loss.
    pub refine: bool,
    /// Emit per-frame debug label PNGs into this directory.
    pub debug_labels_dir: Option<std::path::PathBuf>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, coarse_prune: true, refine: true, debug_labels_dir: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct XformConfig {
    /// Boundary distance in pixels below which objects are touching.
    pub collision_distance: f64,
    /// Fractional velocity change (of max speed) that flags a collision.
    pub collision_velocity_change: f64,
    /// Window in frames over which velocity change is measured.
    pub collision_window: usize,
    /// Normalized autocorrelation peak threshold for motion cycles.
    pub cycle_peak_threshold: f64,
    /// Frames over which collision-preserving offsets blend to zero.
    pub collision_blend_window: usize,
}

impl Default for XformConfig {
    fn default() -> Self {
        Self {
            collision_distance: 2.0,
            collision_velocity_change: 0.5,
            collision_window: 3,
            cycle_peak_threshold: 0.7,
            collision_blend_window: 5,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_through_toml() {
        let cfg = Config::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_unknown_keys() {
        let r: std::result::Result<Config, _> = toml::from_str("[dc]\nbogus = 1\n");
        assert!(r.is_err());
    }
}
