use crate::autodiff::{BatchMoments, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{EpisodeScores, Model, Net, NormMode, ScoringPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::episode::Episode;

/// Scores of an episode from one shared extractor pass over supports and
/// queries.
pub fn forward_episode<'t, T: Scalar>(
    net: &Net<'_, 't, T>,
    tape: &'t Tape<T>,
    episode: &Episode,
    mode: NormMode,
) -> Result<(EpisodeScores<'t, T>, Vec<BatchMoments>)> {
    let batch = tape.constant(episode.batch_tensor()?);
    let (features, moments) = net.extract_features(batch, mode)?;
    let weights = net.row_weights(features)?;
    let plan = ScoringPlan::full(&episode.support_labels, episode.way(), episode.query.len())?;
    let scores = net.score_episode(features, weights, episode.support.len(), &plan)?;
    Ok((scores, moments))
}

/// Loss terms on the tape. Without the classifier the total is the
/// attention loss alone.
pub struct LossVars<'t, T> {
    pub attention: Var<'t, T>,
    pub classification: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

pub fn episode_losses<'t, T: Scalar>(scores: &EpisodeScores<'t, T>, targets: &[usize]) -> Result<LossVars<'t, T>> {
    let attention = scores.attention_logits.softmax_cross_entropy(targets)?;
    let classification = scores
        .class_scores
        .map(|s| s.softmax_cross_entropy(targets))
        .transpose()?;
    let total = match classification {
        Some(ce) => ce.add(attention)?,
        None => attention,
    };
    Ok(LossVars {
        attention,
        classification,
        total,
    })
}

/// Loss terms as numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub attention: f64,
    pub classification: Option<f64>,
    pub total: f64,
}

impl<T: Scalar> From<&LossVars<'_, T>> for LossValues {
    fn from(l: &LossVars<'_, T>) -> Self {
        Self {
            attention: l.attention.scalar(),
            classification: l.classification.map(|v| v.scalar()),
            total: l.total.scalar(),
        }
    }
}

pub fn loss_values<T: Scalar>(model: &Model<T>, episode: &Episode, mode: NormMode) -> Result<LossValues> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let net = Net::new(&model.config, &model.params, &bound);
    let (scores, _) = forward_episode(&net, &tape, episode, mode)?;
    Ok(LossValues::from(&episode_losses(&scores, &episode.query_labels)?))
}

/// Mean cross-entropy of the attention logits.
pub fn attention_loss<T: Scalar>(model: &Model<T>, episode: &Episode, mode: NormMode) -> Result<f64> {
    Ok(loss_values(model, episode, mode)?.attention)
}

/// Mean cross-entropy of the shot-averaged pair scores.
pub fn classification_loss<T: Scalar>(model: &Model<T>, episode: &Episode, mode: NormMode) -> Result<f64> {
    if !model.config.classifier_enabled {
        return Err(Error::Contract("classification loss needs the classifier".into()));
    }
    Ok(loss_values(model, episode, mode)?
        .classification
        .expect("classifier enabled"))
}

pub fn total_loss<T: Scalar>(model: &Model<T>, episode: &Episode, mode: NormMode) -> Result<f64> {
    Ok(loss_values(model, episode, mode)?.total)
}

/// `[K, C]` per-class means of the meta weights of `support` images
/// (`[N, C_in, S, S]`), using stored normalization statistics.
pub fn class_weight_average<T: Scalar>(
    model: &Model<T>,
    support: &Tensor<T>,
    labels: &[usize],
    way: usize,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let net = Net::new(&model.config, &model.params, &bound);
    let (features, _) = net.extract_features(tape.constant(support.clone()), NormMode::Eval)?;
    let weights = net.meta_weights(features)?;
    weights.mean_groups(&label_groups(labels, way)?).map(|w| w.to_tensor())
}

/// Row indices of each label, in label order.
pub fn label_groups(labels: &[usize], way: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); way];
    for (i, &l) in labels.iter().enumerate() {
        groups
            .get_mut(l)
            .ok_or_else(|| Error::Index {
                op: "label_groups",
                detail: format!("label {l} with {way} classes"),
            })?
            .push(i);
    }
    Ok(groups)
}
