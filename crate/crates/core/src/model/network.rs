//! Forward passes of the extractor, attention module and classifier.
//!
//! Everything is batched along the leading axis: a pair batch of `P`
//! features is `[P, C, H, W]`, weight vectors are `[P, C]`, attention maps
//! are `[P, 1, H, W]`.

use crate::autodiff::{BatchMoments, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::{CombineMode, MapActivation, ModelConfig};
use super::params::{BoundParams, ModelParams};

/// Which normalization statistics the extractor uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are returned for update.
    Train,
    /// Stored running statistics.
    Eval,
}

/// For each query, for each class, the support rows it is compared with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoringPlan {
    pub classes: usize,
    pub per_query: Vec<Vec<Vec<usize>>>,
}

impl ScoringPlan {
    /// Every query is compared with every support of every class.
    pub fn full(support_labels: &[usize], classes: usize, queries: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in support_labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::Index {
                    op: "scoring_plan",
                    detail: format!("support label {l} with {classes} classes"),
                });
            }
            by_class[l].push(i);
        }
        let plan = Self {
            classes,
            per_query: vec![by_class; queries],
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn queries(&self) -> usize {
        self.per_query.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        for q in &self.per_query {
            if q.len() != self.classes || q.iter().any(|s| s.is_empty()) {
                return Err(Error::Contract(
                    "every query needs at least one support per class".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Class logits of one episode.
pub struct EpisodeScores<'t, T> {
    /// `[Q, K]` means of the raw attention maps.
    pub attention_logits: Var<'t, T>,
    /// `[Q, K]` shot-averaged symmetric pair scores; `None` without classifier.
    pub class_scores: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> EpisodeScores<'t, T> {
    /// The logits predictions are made from.
    pub fn decision_logits(&self) -> Var<'t, T> {
        self.class_scores.unwrap_or(self.attention_logits)
    }
}

/// Network evaluation against parameters recorded on a tape.
pub struct Net<'a, 't, T> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams<T>,
    pub bound: &'a BoundParams<'t, T>,
}

impl<'a, 't, T: Scalar> Net<'a, 't, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ModelParams<T>, bound: &'a BoundParams<'t, T>) -> Self {
        Self { config, params, bound }
    }

    /// `[B, C_in, S, S] -> [B, 64, S/8, S/8]`; blocks 1-3 pool, block 4 does not.
    pub fn extract_features(&self, images: Var<'t, T>, mode: NormMode) -> Result<(Var<'t, T>, Vec<BatchMoments>)> {
        let shape = images.shape();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "extract_features",
                format!("expected [B,{},{s},{s}], got {shape:?}", self.config.input_channels),
            ));
        }
        let mut x = images;
        let mut moments = Vec::new();
        let blocks = self.params.extractor.len();
        for (i, block) in self.params.extractor.iter().enumerate() {
            let [k, b, scale, shift] = self.bound.block(i);
            x = x.conv2d(k, b)?;
            x = match mode {
                NormMode::Train => {
                    let (y, m) = x.batch_norm_train(scale, shift, block.bn.epsilon)?;
                    moments.push(m);
                    y
                }
                NormMode::Eval => x.batch_norm_eval(
                    scale,
                    shift,
                    &block.bn.running_mean_f64(),
                    &block.bn.running_var_f64(),
                    block.bn.epsilon,
                )?,
            };
            x = x.relu();
            if i + 1 < blocks {
                x = x.maxpool2()?;
            }
        }
        Ok((x, moments))
    }

    fn pooled_mlp(&self, x: Var<'t, T>, layers: &[(Var<'t, T>, Var<'t, T>)]) -> Result<Var<'t, T>> {
        let mut h = x.spatial_pyramid_pool(&self.config.spp_levels)?;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = h.linear(w, b)?;
            if i + 1 < layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Channel weight vectors `[N, C]` from features `[N, C, H, W]`.
    pub fn meta_weights(&self, features: Var<'t, T>) -> Result<Var<'t, T>> {
        self.pooled_mlp(features, &self.bound.meta_weight_layers())
    }

    /// Raw one-channel map from the two-layer map generator.
    pub fn spatial_attention(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [k1, b1, k2, b2] = self.bound.map_generator();
        x.conv2d(k1, b1)?.relu().conv2d(k2, b2)
    }

    /// Map for query features scaled by support weights.
    pub fn reweighted_map(&self, weights: Var<'t, T>, query: Var<'t, T>) -> Result<Var<'t, T>> {
        self.spatial_attention(query.channel_scale(weights)?)
    }

    /// Map for support and query features stacked along channels.
    pub fn concatenated_map(&self, support: Var<'t, T>, query: Var<'t, T>) -> Result<Var<'t, T>> {
        self.spatial_attention(support.concat_channels(query)?)
    }

    /// Adaptive attention map of `query` conditioned on `support` features.
    pub fn attention_map(&self, support: Var<'t, T>, query: Var<'t, T>) -> Result<Var<'t, T>> {
        check_same_spatial(&support, &query)?;
        match self.config.combine {
            CombineMode::Reweight => self.reweighted_map(self.meta_weights(support)?, query),
            CombineMode::Concatenate => self.concatenated_map(support, query),
        }
    }

    fn activate(&self, map: Var<'t, T>) -> Var<'t, T> {
        match self.config.map_activation {
            MapActivation::Sigmoid => map.sigmoid(),
            MapActivation::Relu => map.relu(),
            MapActivation::Identity => map,
        }
    }

    /// Query features masked point-wise by the activated map.
    pub fn refine(&self, query: Var<'t, T>, map: Var<'t, T>) -> Result<Var<'t, T>> {
        query.broadcast_mul(self.activate(map))
    }

    /// Scalar score per row: `[P, C, H, W] -> [P, 1]`.
    pub fn classify(&self, refined: Var<'t, T>) -> Result<Var<'t, T>> {
        if !self.config.classifier_enabled {
            return Err(Error::Contract("classifier disabled; use attention logits".into()));
        }
        self.pooled_mlp(refined, &self.bound.classifier_layers())
    }

    /// Symmetric scores `d(f_s, f_q)` for `(support_row, query_row)` pairs
    /// of `features`. `weights` holds one weight vector per feature row and
    /// is required in reweight mode.
    pub fn pair_scores(
        &self,
        features: Var<'t, T>,
        weights: Option<Var<'t, T>>,
        pairs: &[(usize, usize)],
    ) -> Result<Var<'t, T>> {
        if !self.config.classifier_enabled {
            return Err(Error::Contract("pair scores need the classifier".into()));
        }
        let p = pairs.len();
        // Forward direction refines the query; the mirrored one the support.
        let target: Vec<usize> = pairs
            .iter()
            .map(|&(_, q)| q)
            .chain(pairs.iter().map(|&(s, _)| s))
            .collect();
        let source: Vec<usize> = pairs
            .iter()
            .map(|&(s, _)| s)
            .chain(pairs.iter().map(|&(_, q)| q))
            .collect();
        let target_feats = features.index_select(&target)?;
        let map = match self.config.combine {
            CombineMode::Reweight => {
                let w = weights.ok_or_else(|| Error::Contract("reweight mode needs weight vectors".into()))?;
                self.reweighted_map(w.index_select(&source)?, target_feats)?
            }
            CombineMode::Concatenate => self.concatenated_map(features.index_select(&source)?, target_feats)?,
        };
        let scores = self.classify(self.refine(target_feats, map)?)?;
        let forward: Vec<usize> = (0..p).collect();
        let mirrored: Vec<usize> = (p..2 * p).collect();
        scores
            .index_select(&forward)?
            .add(scores.index_select(&mirrored)?)?
            .reshape(&[p])
    }

    /// `[Q, K]` attention logits: mean of the raw map built from the
    /// class-averaged support representation for each (query, class).
    pub fn attention_logits(
        &self,
        features: Var<'t, T>,
        weights: Option<Var<'t, T>>,
        query_rows: &[usize],
        plan: &ScoringPlan,
    ) -> Result<Var<'t, T>> {
        plan.validate()?;
        let k = plan.classes;
        let mut groups = Vec::with_capacity(query_rows.len() * k);
        let mut rows = Vec::with_capacity(query_rows.len() * k);
        for (qi, &row) in query_rows.iter().enumerate() {
            for class in &plan.per_query[qi] {
                groups.push(class.clone());
                rows.push(row);
            }
        }
        let queries = features.index_select(&rows)?;
        let map = match self.config.combine {
            CombineMode::Reweight => {
                let w = weights.ok_or_else(|| Error::Contract("reweight mode needs weight vectors".into()))?;
                self.reweighted_map(w.mean_groups(&groups)?, queries)?
            }
            CombineMode::Concatenate => self.concatenated_map(features.mean_groups(&groups)?, queries)?,
        };
        map.global_avg_pool()?.reshape(&[query_rows.len(), k])
    }

    /// Shot-averaged pair scores `[Q, K]`.
    pub fn class_scores(
        &self,
        features: Var<'t, T>,
        weights: Option<Var<'t, T>>,
        query_rows: &[usize],
        plan: &ScoringPlan,
    ) -> Result<Var<'t, T>> {
        plan.validate()?;
        let mut pairs = Vec::new();
        let mut groups = Vec::new();
        for (qi, &q) in query_rows.iter().enumerate() {
            for class in &plan.per_query[qi] {
                let start = pairs.len();
                pairs.extend(class.iter().map(|&s| (s, q)));
                groups.push((start..pairs.len()).collect::<Vec<_>>());
            }
        }
        let d = self.pair_scores(features, weights, &pairs)?;
        d.reshape(&[pairs.len(), 1])?
            .mean_groups(&groups)?
            .reshape(&[query_rows.len(), plan.classes])
    }

    /// Both logit sets of an episode whose support rows are `0..n_support`
    /// and query rows follow.
    pub fn score_episode(
        &self,
        features: Var<'t, T>,
        weights: Option<Var<'t, T>>,
        n_support: usize,
        plan: &ScoringPlan,
    ) -> Result<EpisodeScores<'t, T>> {
        let query_rows: Vec<usize> = (n_support..n_support + plan.queries()).collect();
        self.score_rows(features, weights, &query_rows, plan)
    }

    /// Like [`Self::score_episode`] with explicit query rows.
    pub fn score_rows(
        &self,
        features: Var<'t, T>,
        weights: Option<Var<'t, T>>,
        query_rows: &[usize],
        plan: &ScoringPlan,
    ) -> Result<EpisodeScores<'t, T>> {
        if query_rows.len() != plan.queries() {
            return Err(Error::Contract(format!(
                "{} query rows for a plan over {} queries",
                query_rows.len(),
                plan.queries()
            )));
        }
        let attention_logits = self.attention_logits(features, weights, query_rows, plan)?;
        let class_scores = if self.config.classifier_enabled {
            Some(self.class_scores(features, weights, query_rows, plan)?)
        } else {
            None
        };
        Ok(EpisodeScores {
            attention_logits,
            class_scores,
        })
    }

    /// Weight vectors for every feature row in reweight mode, `None` otherwise.
    pub fn row_weights(&self, features: Var<'t, T>) -> Result<Option<Var<'t, T>>> {
        match self.config.combine {
            CombineMode::Reweight => Ok(Some(self.meta_weights(features)?)),
            CombineMode::Concatenate => Ok(None),
        }
    }
}

fn check_same_spatial<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 2..] != sb[sb.len() - 2..] {
        return Err(Error::dim(
            "attention_map",
            format!("support {sa:?} and query {sb:?} differ spatially"),
        ));
    }
    Ok(())
}
