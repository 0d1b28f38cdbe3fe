use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Net, NormMode};
use crate::scalar::Scalar;

use super::episode::{sample_episode, Episode, EpisodeSpec};
use super::loss::{episode_losses, forward_episode, LossValues};
use super::optim::Adam;

/// Episodic training schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(spec: EpisodeSpec, episodes: usize, seed: u64) -> Self {
        Self {
            spec,
            episodes,
            learning_rate: Adam::DEFAULT_LR,
            seed,
        }
    }
}

/// One Adam step on the joint loss of `episode`, with batch statistics in
/// the extractor. `index` labels diagnostics.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Adam,
    episode: &Episode,
    index: usize,
) -> Result<LossValues> {
    model.params.zero_grad();
    let (values, moments) = {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let net = Net::new(&model.config, &model.params, &bound);
        let (scores, moments) = forward_episode(&net, &tape, episode, NormMode::Train)?;
        let losses = episode_losses(&scores, &episode.query_labels)?;
        let values = LossValues::from(&losses);
        if !values.total.is_finite() {
            return Err(Error::NonFinite {
                episode: index,
                detail: format!(
                    "loss {} (attention {}, classification {:?})",
                    values.total, values.attention, values.classification
                ),
            });
        }
        let grads = tape.backward(losses.total)?;
        model.params.accumulate_grads(&bound, &grads)?;
        (values, moments)
    };
    optimizer.update(&mut model.params)?;
    model.params.apply_moments(&moments)?;
    if !model.params.all_finite() {
        return Err(Error::NonFinite {
            episode: index,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(values)
}

/// Runs `config.episodes` training episodes sampled from `dataset`, calling
/// `on_step` after each one.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossValues),
) -> Result<Adam> {
    config.spec.check_dataset(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.learning_rate)?;
    for i in 0..config.episodes {
        let episode = sample_episode(dataset, &config.spec, &mut rng)?;
        let loss = train_step(model, &mut optimizer, &episode, i)?;
        on_step(i, &loss);
    }
    Ok(optimizer)
}
