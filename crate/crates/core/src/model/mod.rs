//! The adaptive-attention network.

mod config;
mod network;
mod params;

pub use config::{CombineMode, MapActivation, ModelConfig, EXTRACTOR_BLOCKS, HIDDEN_WIDTH};
pub use network::{EpisodeScores, Net, NormMode, ScoringPlan};
pub use params::{
    BatchNormState, BoundParams, ConvBlock, ConvLayer, LinearLayer, MapGenerator, ModelParams, PooledMlp, BN_EPSILON,
    BN_MOMENTUM,
};

use rand::Rng;

use crate::autodiff::Tape;
use crate::data::{resize_bilinear, Image};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Configuration and parameters travelling together.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Eval-mode features of a `[B, C_in, S, S]` batch.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let net = Net::new(&self.config, &self.params, &bound);
        let (f, _) = net.extract_features(tape.constant(images.clone()), NormMode::Eval)?;
        Ok(f.to_tensor())
    }

    /// Raw `[H_f, W_f]` attention map of `query` conditioned on `support`,
    /// both `[C_in, S, S]` images, with eval-mode normalization.
    pub fn attention_map(&self, support: &Tensor<T>, query: &Tensor<T>) -> Result<Tensor<T>> {
        if support.shape() != query.shape() || support.rank() != 3 {
            return Err(Error::dim(
                "attention_map",
                format!("support {:?} and query {:?}", support.shape(), query.shape()),
            ));
        }
        let batch = Tensor::stack(&[support.clone(), query.clone()])?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let net = Net::new(&self.config, &self.params, &bound);
        let (f, _) = net.extract_features(tape.constant(batch), NormMode::Eval)?;
        let map = net.attention_map(f.index_select(&[0])?, f.index_select(&[1])?)?;
        let h = self.config.feature_size();
        map.to_tensor().reshaped(&[h, h])
    }

    /// [`Self::attention_map`] upsampled bilinearly to the input resolution.
    pub fn heatmap(&self, support: &Tensor<T>, query: &Tensor<T>) -> Result<Image> {
        let map = self.attention_map(support, query)?;
        let h = self.config.feature_size();
        let small = Image::new(1, h, h, map.data().iter().map(|v| v.as_f32()).collect())?;
        let s = self.config.input_size;
        Ok(resize_bilinear(&small, s, s))
    }
}
