use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How support information enters the spatial attention generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CombineMode {
    /// Query feature scaled channel-wise by support-derived weights.
    Reweight,
    /// Support and query features stacked along channels.
    Concatenate,
}

/// Activation applied to the raw attention map before refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapActivation {
    Sigmoid,
    Relu,
    Identity,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::Reweight => "reweight",
            CombineMode::Concatenate => "concatenate",
        })
    }
}

impl FromStr for CombineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reweight" => Ok(Self::Reweight),
            "concatenate" | "concat" => Ok(Self::Concatenate),
            _ => Err(Error::Config(format!("unknown combine mode '{s}'"))),
        }
    }
}

impl fmt::Display for MapActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapActivation::Sigmoid => "sigmoid",
            MapActivation::Relu => "relu",
            MapActivation::Identity => "identity",
        })
    }
}

impl FromStr for MapActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            _ => Err(Error::Config(format!("unknown map activation '{s}'"))),
        }
    }
}

/// Architecture constants of the network.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub feature_channels: usize,
    pub spp_levels: Vec<usize>,
    pub combine: CombineMode,
    pub classifier_enabled: bool,
    pub map_activation: MapActivation,
}

/// Hidden widths of the meta-weight generator and the classifier head.
pub const HIDDEN_WIDTH: usize = 200;

/// Number of conv blocks in the extractor; all but the last one pool.
pub const EXTRACTOR_BLOCKS: usize = 4;

impl ModelConfig {
    /// Single-channel 28x28 configuration (characters, synthetic shapes).
    pub fn grayscale28() -> Self {
        Self {
            input_channels: 1,
            input_size: 28,
            ..Self::color84()
        }
    }

    /// Three-channel 84x84 configuration (natural images).
    pub fn color84() -> Self {
        Self {
            input_channels: 3,
            input_size: 84,
            feature_channels: 64,
            spp_levels: vec![1, 2, 3],
            combine: CombineMode::Reweight,
            classifier_enabled: true,
            map_activation: MapActivation::Sigmoid,
        }
    }

    pub fn with_combine(mut self, combine: CombineMode) -> Self {
        self.combine = combine;
        self
    }

    pub fn with_classifier(mut self, enabled: bool) -> Self {
        self.classifier_enabled = enabled;
        self
    }

    /// Spatial side of the extracted feature map (three floor-halvings).
    pub fn feature_size(&self) -> usize {
        (0..EXTRACTOR_BLOCKS - 1).fold(self.input_size, |s, _| s / 2)
    }

    /// Length of a pooled pyramid vector: `C * sum(l^2)`.
    pub fn spp_len(&self) -> usize {
        self.feature_channels * self.spp_levels.iter().map(|l| l * l).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.feature_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.spp_levels.is_empty() || self.spp_levels.contains(&0) {
            return Err(Error::Config(format!("invalid pyramid levels {:?}", self.spp_levels)));
        }
        let max_level = *self.spp_levels.iter().max().expect("non-empty");
        if self.feature_size() < max_level {
            return Err(Error::Config(format!(
                "input size {} yields {}x{} features, smaller than pyramid level {max_level}",
                self.input_size,
                self.feature_size(),
                self.feature_size()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "in={}x{}x{} feat={} spp={:?} combine={} classifier={} map={}",
            self.input_channels,
            self.input_size,
            self.input_size,
            self.feature_channels,
            self.spp_levels,
            self.combine,
            self.classifier_enabled,
            self.map_activation
        )
    }
}
