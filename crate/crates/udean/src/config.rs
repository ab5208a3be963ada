//! Declarative experiment configuration: a strict TOML schema that
//! round-trips losslessly and rejects unknown keys. CLI flags override
//! individual fields after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deform::DeformationRanges;
use crate::kspace::ScaleFactor;
use crate::loss::LossWeights;
use crate::manifest::{GroupCounts, SplitMode};
use crate::network::NetworkConfig;
use crate::patch::PatchSpec;
use crate::ssim::SsimConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    PerVolume,
    PerDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Manifest file; volume paths inside it are relative to its parent.
    pub manifest: PathBuf,
    /// Run directory: config echo, logs, checkpoints, metrics, figures.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub mode: SplitMode,
    pub normalization: NormalizationScope,
    pub counts: GroupCounts,
    /// Generate this many phantom participants instead of reading inputs.
    #[serde(default)]
    pub phantom_count: Option<usize>,
    /// Phantom volume extent (must be divisible by the scale factor).
    #[serde(default = "default_phantom_shape")]
    pub phantom_shape: (usize, usize, usize),
    /// Existing HR volumes to ingest when not generating phantoms.
    #[serde(default)]
    pub input_volumes: Vec<PathBuf>,
}

fn default_phantom_shape() -> (usize, usize, usize) {
    (48, 48, 12)
}

/// Network hyperparameters without the scale factor, which lives in its
/// own section so one config cannot carry two conflicting scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub feat_channels: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    pub reduction: usize,
    pub disc_base_channels: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::default();
        NetworkSection {
            feat_channels: d.feat_channels,
            n_groups: d.n_groups,
            n_blocks: d.n_blocks,
            reduction: d.reduction,
            disc_base_channels: d.disc_base_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub paths: PathsSection,
    pub data: DataSection,
    pub scale: ScaleFactor,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub deformation: DeformationRanges,
    #[serde(default)]
    pub patch: PatchSpec,
    #[serde(default)]
    pub ssim: SsimConfig,
    /// Reconstruction stride; defaults to half-patch in-plane, 1 slice.
    #[serde(default)]
    pub stitch_stride: Option<(usize, usize, usize)>,
}

pub const CONFIG_VERSION: u32 = 1;

impl ExperimentConfig {
    /// Assemble the full network configuration (section + scale).
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            feat_channels: self.network.feat_channels,
            n_groups: self.network.n_groups,
            n_blocks: self.network.n_blocks,
            reduction: self.network.reduction,
            scale: self.scale,
            disc_base_channels: self.network.disc_base_channels,
        }
    }

    pub fn stitch_plan(&self) -> crate::stitch::StitchPlan {
        match self.stitch_stride {
            Some(stride) => crate::stitch::StitchPlan::with_stride(self.patch.lr_shape, stride),
            None => crate::stitch::StitchPlan::new(self.patch.lr_shape),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.network_config().validate()?;
        self.train.validate()?;
        self.loss_weights.validate()?;
        self.deformation.validate()?;
        if self.train.batch_size != self.patch.batch_size {
            return Err(Error::Config(format!(
                "train.batch_size {} and patch.batch_size {} must agree",
                self.train.batch_size, self.patch.batch_size
            )));
        }
        if self.patch.lr_shape.0 < self.ssim.window || self.patch.lr_shape.1 < self.ssim.window {
            return Err(Error::Config(format!(
                "patch {:?} smaller in-plane than the {}x{} SSIM window",
                self.patch.lr_shape, self.ssim.window, self.ssim.window
            )));
        }
        let shape = self.data.phantom_shape;
        if self.data.phantom_count.is_some() && !self.scale.divides(shape) {
            return Err(Error::Config(format!(
                "phantom shape {shape:?} not divisible by scale {}",
                self.scale
            )));
        }
        if self.data.mode == SplitMode::Misaligned && self.data.counts.source != self.data.counts.target {
            return Err(Error::Config(
                "misaligned mode shares participants: source and target counts must match".into(),
            ));
        }
        self.stitch_plan().validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A complete desk-scale starting configuration for phantom experiments.
pub fn example_config(root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        paths: PathsSection {
            manifest: root.join("data/manifest.txt"),
            output_dir: root.join("run"),
        },
        data: DataSection {
            mode: SplitMode::Misaligned,
            normalization: NormalizationScope::PerVolume,
            counts: GroupCounts { source: 8, target: 8, validation: 2, test: 4 },
            phantom_count: Some(14),
            phantom_shape: (48, 48, 12),
            input_volumes: Vec::new(),
        },
        scale: ScaleFactor::new(2, 2, 2),
        network: NetworkSection {
            feat_channels: 16,
            n_groups: 2,
            n_blocks: 2,
            reduction: 16,
            disc_base_channels: 16,
        },
        train: TrainConfig {
            epochs: 4,
            batch_size: 4,
            lr_max: 1e-3,
            lr_min: 1e-8,
            batches_per_epoch: 8,
            ..TrainConfig::default()
        },
        loss_weights: LossWeights::default(),
        deformation: DeformationRanges::default(),
        patch: PatchSpec { lr_shape: (16, 16, 3), batch_size: 4 },
        ssim: SsimConfig::default(),
        stitch_stride: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trips_losslessly() {
        let dir = tempdir().unwrap();
        let cfg = example_config(dir.path());
        let path = dir.path().join("exp.toml");
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempdir().unwrap();
        let cfg = example_config(dir.path());
        let path = dir.path().join("exp.toml");
        cfg.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let poisoned = text.replacen("version = 1", "version = 1\nmystery_knob = 3", 1);
        std::fs::write(&path, poisoned).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
        assert!(err.to_string().contains("mystery_knob"));
    }

    #[test]
    fn inconsistent_batch_sizes_rejected() {
        let dir = tempdir().unwrap();
        let mut cfg = example_config(dir.path());
        cfg.train.batch_size = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn misaligned_requires_equal_source_target() {
        let dir = tempdir().unwrap();
        let mut cfg = example_config(dir.path());
        cfg.data.counts.source = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn phantom_shape_must_divide() {
        let dir = tempdir().unwrap();
        let mut cfg = example_config(dir.path());
        cfg.data.phantom_shape = (47, 48, 12);
        assert!(cfg.validate().is_err());
    }
}
