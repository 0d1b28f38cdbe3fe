use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{batch_tensor, random_crop_flip, AugmentSpec, Dataset, Image};
use crate::error::{Error, Result};
use crate::model::{Model, Net, NormMode, ScoringPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::episode::{sample_episode, Episode, EpisodeSpec};
use super::loss::{episode_losses, label_groups};
use super::optim::sgd_update;

pub const TTA_COPIES: usize = 10;
pub const FINETUNE_LR: f64 = 1e-4;

/// Test-time options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Augmented copies per support averaged into its weight vector.
    pub tta_copies: usize,
    pub augment: AugmentSpec,
    /// One adaptation step per episode at this rate when set.
    pub finetune_lr: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tta_copies: 0,
            augment: AugmentSpec {
                crop_ratio: AugmentSpec::DEFAULT_CROP,
                flip_horizontal: false,
            },
            finetune_lr: None,
        }
    }
}

/// Per-episode accuracies and their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Half-width of the normal 95% interval of the mean.
    pub ci95: f64,
    pub episodes: usize,
    pub config: String,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, config: impl Into<String>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::Contract("no episodes to summarize".into()));
        }
        if let Some(a) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Contract(format!("accuracy {a} outside [0, 1]")));
        }
        let (mean, ci95) = mean_ci95(&accuracies);
        Ok(Self {
            episodes: accuracies.len(),
            accuracies,
            mean,
            ci95,
            config: config.into(),
        })
    }
}

/// Mean and `1.96 * s / sqrt(n)` with the `n - 1` sample deviation `s`
/// (zero width for a single value).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Runs `episodes` seeded episodes through `predict` and scores its
/// per-query label predictions. Episodes come from one stream of `seed`,
/// the generator handed to `predict` from another, so predictors that
/// differ in their random needs still see the same episodes.
pub fn evaluate_with(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
    config: impl Into<String>,
    mut predict: impl FnMut(&Episode, &mut ChaCha8Rng) -> Result<Vec<usize>>,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("need at least one evaluation episode".into()));
    }
    spec.check_dataset(dataset)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(seed);
    let mut aux = ChaCha8Rng::seed_from_u64(seed);
    aux.set_stream(1);
    let mut accuracies = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let episode = sample_episode(dataset, spec, &mut sampler)?;
        let predicted = predict(&episode, &mut aux)?;
        if predicted.len() != episode.query_labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} queries",
                predicted.len(),
                episode.query_labels.len()
            )));
        }
        let correct = predicted
            .iter()
            .zip(&episode.query_labels)
            .filter(|(p, l)| p == l)
            .count();
        accuracies.push(correct as f64 / predicted.len() as f64);
    }
    EvalReport::from_accuracies(accuracies, config)
}

/// Model accuracy over `episodes` seeded episodes.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    episodes: usize,
    options: &EvalOptions,
    seed: u64,
) -> Result<EvalReport> {
    let config = format!(
        "{} way={} shot={} query={} tta={} crop={} flip={} finetune={:?} seed={seed}",
        model.config,
        spec.way,
        spec.shot,
        spec.query,
        options.tta_copies,
        options.augment.crop_ratio,
        options.augment.flip_horizontal,
        options.finetune_lr
    );
    evaluate_with(dataset, spec, episodes, seed, config, |episode, rng| {
        predict(model, episode, options, rng)
    })
}

/// Index of the first largest entry of each row of a `[Q, K]` tensor.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.shape()[scores.rank() - 1];
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted label of every query.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    episode: &Episode,
    options: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let scores = match options.finetune_lr {
        Some(lr) => decision_scores(&finetune_one_step(model, episode, lr)?, episode, options, rng)?,
        None => decision_scores(model, episode, options, rng)?,
    };
    Ok(argmax_rows(&scores))
}

/// `[Q, K]` decision logits with stored normalization statistics: pair
/// scores with the classifier, attention logits without. With TTA each
/// support's weight vector is replaced by its augmentation average.
pub fn decision_scores<T: Scalar>(
    model: &Model<T>,
    episode: &Episode,
    options: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let net = Net::new(&model.config, &model.params, &bound);
    let (features, _) = net.extract_features(tape.constant(episode.batch_tensor()?), NormMode::Eval)?;
    let mut weights = net.row_weights(features)?;
    if let (Some(w), true) = (weights, options.tta_copies > 0) {
        let averaged = tta_support_weights(model, &episode.support, options.tta_copies, &options.augment, rng)?;
        let mut all = w.to_tensor();
        all.data_mut()[..averaged.numel()].copy_from_slice(averaged.data());
        weights = Some(tape.constant(all));
    }
    let plan = ScoringPlan::full(&episode.support_labels, episode.way(), episode.query.len())?;
    let scores = net.score_episode(features, weights, episode.support.len(), &plan)?;
    Ok(scores.decision_logits().to_tensor())
}

/// Meta weights of the originals (rows `0..N`) followed by `copies`
/// augmented rounds (rows `N(1+j)..N(2+j)`), as a `[N(1+copies), C]` tensor.
fn augmented_weights<T: Scalar>(
    model: &Model<T>,
    support: &[Image],
    copies: usize,
    augment: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let mut images: Vec<Image> = support.to_vec();
    for _ in 0..copies {
        for img in support {
            images.push(random_crop_flip(img, augment, rng));
        }
    }
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let net = Net::new(&model.config, &model.params, &bound);
    let batch = batch_tensor::<T>(&images.iter().collect::<Vec<_>>())?;
    let (features, _) = net.extract_features(tape.constant(batch), NormMode::Eval)?;
    Ok(net.meta_weights(features)?.to_tensor())
}

fn grouped_mean<T: Scalar>(rows: Tensor<T>, groups: &[Vec<usize>]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(tape.constant(rows).mean_groups(groups)?.to_tensor())
}

/// `[N, C]`: each support's weight vector averaged over itself and
/// `copies` random crops/flips of it.
pub fn tta_support_weights<T: Scalar>(
    model: &Model<T>,
    support: &[Image],
    copies: usize,
    augment: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let n = support.len();
    let rows = augmented_weights(model, support, copies, augment, rng)?;
    let groups: Vec<Vec<usize>> = (0..n).map(|i| (0..=copies).map(|j| j * n + i).collect()).collect();
    grouped_mean(rows, &groups)
}

/// `[K, C]` class weights: per class, the mean meta weight over every
/// support and all its augmented copies. `copies = 0` gives the plain
/// class average.
pub fn tta_class_weights<T: Scalar>(
    model: &Model<T>,
    support: &[Image],
    labels: &[usize],
    way: usize,
    copies: usize,
    augment: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let n = support.len();
    let rows = augmented_weights(model, support, copies, augment, rng)?;
    let groups: Vec<Vec<usize>> = label_groups(labels, way)?
        .into_iter()
        .map(|g| (0..=copies).flat_map(|j| g.iter().map(move |&i| j * n + i)).collect())
        .collect();
    grouped_mean(rows, &groups)
}

/// Supports compared against each other: every support is a query scored
/// against the other supports of its class (itself when it is alone) and
/// all supports of the other classes.
pub fn self_episode_plan(labels: &[usize], way: usize) -> Result<ScoringPlan> {
    let groups = label_groups(labels, way)?;
    let per_query = labels
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            groups
                .iter()
                .enumerate()
                .map(|(k, g)| {
                    if k == l && g.len() > 1 {
                        g.iter().copied().filter(|&i| i != j).collect()
                    } else {
                        g.clone()
                    }
                })
                .collect()
        })
        .collect();
    let plan = ScoringPlan {
        classes: way,
        per_query,
    };
    plan.validate()?;
    Ok(plan)
}

/// A copy of `model` after one gradient-descent step on the joint loss of
/// the support self-episode, with stored normalization statistics.
pub fn finetune_one_step<T: Scalar>(model: &Model<T>, episode: &Episode, learning_rate: f64) -> Result<Model<T>> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "fine-tune rate must be non-negative, got {learning_rate}"
        )));
    }
    let mut adapted = model.clone();
    adapted.params.zero_grad();
    {
        let tape = Tape::new();
        let bound = adapted.params.bind(&tape);
        let net = Net::new(&adapted.config, &adapted.params, &bound);
        let (features, _) = net.extract_features(tape.constant(episode.support_tensor()?), NormMode::Eval)?;
        let weights = net.row_weights(features)?;
        let plan = self_episode_plan(&episode.support_labels, episode.way())?;
        let rows: Vec<usize> = (0..episode.support.len()).collect();
        let scores = net.score_rows(features, weights, &rows, &plan)?;
        let loss = episode_losses(&scores, &episode.support_labels)?.total;
        let grads = tape.backward(loss)?;
        adapted.params.accumulate_grads(&bound, &grads)?;
    }
    sgd_update(&mut adapted.params, learning_rate);
    adapted.params.zero_grad();
    Ok(adapted)
}
