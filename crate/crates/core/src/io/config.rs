//! Run configuration, loadable from TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lln::LlnConfig;
use crate::matcher::DEFAULT_STRIDE;
use crate::retrieval::{ActSaliency, DescriptorConfig, DescriptorVariant, DEFAULT_SHORTLIST};
use crate::trainer::TrainConfig;

/// Landmarks per image for a grid with `total_cells` cells: 75 for grids of
/// 144 cells or more, 50 otherwise.
pub fn default_landmark_count(total_cells: usize) -> usize {
    if total_cells >= 144 {
        75
    } else {
        50
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: DescriptorVariant,
    /// Landmarks per image; derived from the grid size when absent.
    pub n: Option<usize>,
    pub shortlist_k: usize,
    pub vision_offset: i64,
    pub stride: u32,
    pub act_saliency: ActSaliency,
    pub seed: u64,
    /// Channels produced by the toy extractor.
    pub toy_channels: usize,
    pub train: TrainConfig,
    pub lln: LlnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: DescriptorVariant::Lln,
            n: None,
            shortlist_k: DEFAULT_SHORTLIST,
            vision_offset: 0,
            stride: DEFAULT_STRIDE,
            act_saliency: ActSaliency::L2,
            seed: 0,
            toy_channels: 64,
            train: TrainConfig::default(),
            lln: LlnConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == Some(0) {
            return Err(Error::config("n must be >= 1"));
        }
        if self.shortlist_k == 0 || self.stride == 0 || self.toy_channels == 0 {
            return Err(Error::config(
                "shortlist_k, stride and toy_channels must be positive",
            ));
        }
        if self.vision_offset < 0 {
            return Err(Error::config("vision_offset must be >= 0"));
        }
        if self.lln.kernel_sizes.is_empty()
            || self.lln.kernel_sizes.iter().any(|k| k % 2 == 0)
            || self.lln.branch_channels == 0
        {
            return Err(Error::config("LLN branches need odd kernel sizes and >= 1 channel"));
        }
        self.train.validate()
    }

    pub fn descriptor_config(&self, grid_cells: usize) -> DescriptorConfig {
        DescriptorConfig {
            variant: self.variant,
            n: self.n.unwrap_or_else(|| default_landmark_count(grid_cells)),
            stride: self.stride,
            seed: self.seed,
            act_saliency: self.act_saliency,
        }
    }
}
