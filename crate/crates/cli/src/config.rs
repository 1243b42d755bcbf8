//! The pipeline configuration document: one JSON file with a section per
//! stage. Every field has a default, unknown keys are rejected, and the
//! defaults carry the standard constants (NMS 0.3/0.7, 250 nm match radius,
//! efficiency alphas 0.5/1.0, FRC threshold 0.143, 5 nm render sigma,
//! 10x10x20 nm voxels, clip 2.5, percentile 99.5).

use crate::io::camera_json::CameraSection;
use crate::io::psf_json;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use smlmforge_core::calibration::FitOptions;
use smlmforge_core::localizer::{DetectConfig, FitConfig};
use smlmforge_core::metrics::MatchMode;
use smlmforge_core::psf::{Parametric, PsfAsParams, PsfModel};
use smlmforge_core::render::{RenderSpec, SigmaMode};
use smlmforge_core::simulator::PriorConfig;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub prior: PriorConfig,
    pub psf: PsfSection,
    pub camera: CameraSection,
    pub localizer: LocalizerSection,
    pub postprocess: PostprocessSection,
    pub metrics: MetricsSection,
    pub render: RenderSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }
}

/// PSF section: inline parametric document or a reference to a PSF JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PsfSection {
    File {
        file: String,
    },
    Inline {
        #[serde(flatten)]
        parametric: Parametric,
    },
}

impl Default for PsfSection {
    fn default() -> Self {
        PsfSection::Inline {
            parametric: Parametric::As(PsfAsParams {
                a: 3.0,
                b_x: 250.0,
                b_y: -250.0,
                c: 4.0e4,
            }),
        }
    }
}

impl PsfSection {
    pub fn build(&self, base_dir: &Path) -> Result<PsfModel> {
        match self {
            PsfSection::File { file } => psf_json::read_psf_json(&base_dir.join(file)),
            PsfSection::Inline { parametric } => {
                parametric
                    .validate()
                    .map_err(|e| anyhow::anyhow!("invalid PSF parameters: {e}"))?;
                Ok(PsfModel::parametric(*parametric))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerSection {
    pub detect: DetectConfig,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessSection {
    pub nms_low: f64,
    pub nms_high: f64,
    pub cdf_bins: usize,
    pub drop_fraction: f64,
    pub group_radius_nm: Option<f64>,
    pub debias_bins: Option<usize>,
}

impl Default for PostprocessSection {
    fn default() -> Self {
        Self {
            nms_low: 0.3,
            nms_high: 0.7,
            cdf_bins: 20,
            drop_fraction: 0.0,
            group_radius_nm: None,
            debias_bins: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub radius_nm: f64,
    pub mode: MatchModeSection,
    pub alpha_lateral: f64,
    pub alpha_axial: f64,
    pub frc_threshold: f64,
    pub frc_block_size: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MatchModeSection {
    #[default]
    Lateral,
    Volume,
}

impl From<MatchModeSection> for MatchMode {
    fn from(m: MatchModeSection) -> Self {
        match m {
            MatchModeSection::Lateral => MatchMode::Lateral,
            MatchModeSection::Volume => MatchMode::Volume,
        }
    }
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            radius_nm: 250.0,
            mode: MatchModeSection::Lateral,
            alpha_lateral: 0.5,
            alpha_axial: 1.0,
            frc_threshold: 0.143,
            frc_block_size: 50_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub pixel_size_nm: f64,
    pub sigma_nm: f64,
    /// Use each row's own uncertainties instead of the fixed sigma.
    pub per_row_sigma: bool,
    pub voxel_nm: [f64; 3],
    pub clip: f64,
    pub percentile: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            pixel_size_nm: 10.0,
            sigma_nm: 5.0,
            per_row_sigma: false,
            voxel_nm: [10.0, 10.0, 20.0],
            clip: 2.5,
            percentile: 99.5,
        }
    }
}

impl RenderSection {
    pub fn to_spec(&self) -> RenderSpec {
        RenderSpec {
            pixel_size: self.pixel_size_nm,
            sigma: if self.per_row_sigma {
                SigmaMode::PerRow
            } else {
                SigmaMode::Fixed(self.sigma_nm)
            },
            voxel: self.voxel_nm,
            clip: self.clip,
            percentile: self.percentile,
            bounds: None,
        }
    }
}

/// Calibration run configuration: camera, stage geometry, initial PSF and
/// optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub camera: CameraSection,
    pub z0_nm: f64,
    pub dz_nm: f64,
    pub init_psf: PsfSection,
    pub optimizer: FitOptions,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            camera: CameraSection::default(),
            z0_nm: -600.0,
            dz_nm: 100.0,
            init_psf: PsfSection::default(),
            optimizer: FitOptions::default(),
        }
    }
}

impl CalibrateConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: CalibrateConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }
}
