use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where learned pairwise fusion is deployed. Wherever a tree is disabled the
/// features are merged by summation (within a block) or not at all (across
/// blocks, where reconstruction reads the last block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FusionMode {
    /// Fusion trees within every block and across blocks.
    #[default]
    Tree,
    /// Parallel summation baseline; no fusion layers at all.
    Sum,
    /// Fusion trees only inside blocks.
    WithinOnly,
    /// A fusion tree only across block outputs.
    AcrossOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Sum,
        FusionMode::AcrossOnly,
        FusionMode::WithinOnly,
        FusionMode::Tree,
    ];

    pub fn within_tree(self) -> bool {
        matches!(self, FusionMode::Tree | FusionMode::WithinOnly)
    }

    pub fn across_tree(self) -> bool {
        matches!(self, FusionMode::Tree | FusionMode::AcrossOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Tree => "tree",
            FusionMode::Sum => "sum",
            FusionMode::WithinOnly => "within_only",
            FusionMode::AcrossOnly => "across_only",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            FusionMode::Tree => 0,
            FusionMode::Sum => 1,
            FusionMode::WithinOnly => 2,
            FusionMode::AcrossOnly => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => FusionMode::Tree,
            1 => FusionMode::Sum,
            2 => FusionMode::WithinOnly,
            3 => FusionMode::AcrossOnly,
            _ => return None,
        })
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(FusionMode::Tree),
            "sum" => Ok(FusionMode::Sum),
            "within_only" => Ok(FusionMode::WithinOnly),
            "across_only" => Ok(FusionMode::AcrossOnly),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion mode {other:?} (expected tree, sum, within_only or across_only)"
            ))),
        }
    }
}

/// Architecture hyperparameters. The default is the full model: 8 blocks,
/// dilations 1 to 4, 16 channels, fusion within and across blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetworkConfig {
    pub num_blocks: usize,
    pub max_dilation: usize,
    pub channels: usize,
    pub fusion_mode: FusionMode,
    pub input_channels: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            max_dilation: 4,
            channels: 16,
            fusion_mode: FusionMode::Tree,
            input_channels: 3,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_blocks", self.num_blocks),
            ("max_dilation", self.max_dilation),
            ("channels", self.channels),
            ("input_channels", self.input_channels),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Total layer count `L`: extraction + blocks + reconstruction.
    pub fn depth(&self) -> usize {
        self.num_blocks + 2
    }
}
