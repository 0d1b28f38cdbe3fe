use rand::seq::index::sample;
use rand::Rng;

use crate::data::{batch_tensor, Dataset, Image};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape of a K-way n-shot task with m queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeSpec {
    pub fn new(way: usize, shot: usize, query: usize) -> Result<Self> {
        let spec = Self { way, shot, query };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config(format!("way must be at least 2, got {}", self.way)));
        }
        if self.shot == 0 || self.query == 0 {
            return Err(Error::Config(format!(
                "shot and query must be positive, got {} and {}",
                self.shot, self.query
            )));
        }
        Ok(())
    }

    /// Checks that `dataset` can supply episodes of this shape.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        if dataset.num_classes() < self.way {
            return Err(Error::Dataset(format!(
                "{}-way episodes need {} classes, dataset has {}",
                self.way,
                self.way,
                dataset.num_classes()
            )));
        }
        let need = self.shot + self.query;
        let eligible = dataset.classes().iter().filter(|c| c.images.len() >= need).count();
        if eligible < self.way {
            return Err(Error::Dataset(format!(
                "only {eligible} classes have the {need} images a {}-shot {}-query episode needs",
                self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// One sampled task. Supports are ordered label-major (`shot` rows per
/// label), queries likewise with `query` rows per label.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub support: Vec<Image>,
    pub support_labels: Vec<usize>,
    pub query: Vec<Image>,
    pub query_labels: Vec<usize>,
    /// Dataset class index behind each episode label.
    pub classes: Vec<usize>,
    /// `(class, image)` dataset positions of supports and queries.
    pub support_source: Vec<(usize, usize)>,
    pub query_source: Vec<(usize, usize)>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.spec.way
    }

    pub fn support_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        batch_tensor(&self.support.iter().collect::<Vec<_>>())
    }

    /// Supports followed by queries as one `[N_s + N_q, C, S, S]` batch.
    pub fn batch_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        batch_tensor(&self.support.iter().chain(&self.query).collect::<Vec<_>>())
    }

    /// The same task with label `l` renamed to `perm[l]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Episode> {
        let mut seen = vec![false; self.way()];
        if perm.len() != self.way()
            || perm
                .iter()
                .any(|&p| p >= self.way() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!(
                "{perm:?} is not a permutation of 0..{}",
                self.way()
            )));
        }
        let mut classes = vec![0; self.way()];
        for (l, &p) in perm.iter().enumerate() {
            classes[p] = self.classes[l];
        }
        Ok(Episode {
            support_labels: self.support_labels.iter().map(|&l| perm[l]).collect(),
            query_labels: self.query_labels.iter().map(|&l| perm[l]).collect(),
            classes,
            ..self.clone()
        })
    }
}

/// Draws `way` distinct classes, assigns them labels in draw order, then
/// `shot + query` distinct images per class.
pub fn sample_episode(dataset: &Dataset, spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.check_dataset(dataset)?;
    let need = spec.shot + spec.query;
    let eligible: Vec<usize> = (0..dataset.num_classes())
        .filter(|&c| dataset.classes()[c].images.len() >= need)
        .collect();
    let classes: Vec<usize> = sample(rng, eligible.len(), spec.way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support_source = Vec::with_capacity(spec.way * spec.shot);
    let mut query_source = Vec::with_capacity(spec.way * spec.query);
    for &c in &classes {
        let picks = sample(rng, dataset.classes()[c].images.len(), need).into_vec();
        support_source.extend(picks[..spec.shot].iter().map(|&i| (c, i)));
        query_source.extend(picks[spec.shot..].iter().map(|&i| (c, i)));
    }
    let take = |src: &[(usize, usize)]| src.iter().map(|&(c, i)| dataset.image(c, i).clone()).collect();
    Ok(Episode {
        spec: *spec,
        support: take(&support_source),
        support_labels: (0..spec.way).flat_map(|l| std::iter::repeat_n(l, spec.shot)).collect(),
        query: take(&query_source),
        query_labels: (0..spec.way).flat_map(|l| std::iter::repeat_n(l, spec.query)).collect(),
        classes,
        support_source,
        query_source,
    })
}
