//! TCAV baseline in the explainer's embedding space.
//!
//! A concept activation vector (CAV) is the unit normal of a logistic
//! separator between a concept's prototypes and one random partition. The
//! sensitivity of class `k` to a CAV `v` at sample `a` is the sign of
//! `∇ logit_k(a) · v`, with the gradient supplied by a [`GradientOracle`].
//!
//! With a purely linear head the gradient is `w_k` for every sample, so
//! per-sample scores collapse to one value per class. Use a nonlinear oracle
//! when sample-level variation matters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::logistic::{self, TrainerConfig};
use crate::model::{ConceptSet, EmbeddingVector, LinearHead, RandomPool};
use crate::seed::derive_seed;

/// Unit-norm concept activation vector for one concept and one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Cav {
    pub concept: usize,
    pub partition: usize,
    pub vector: Vec<f64>,
    /// Training accuracy of the underlying separator.
    pub accuracy: f64,
}

impl Cav {
    pub fn dot(&self, other: &[f64]) -> f64 {
        self.vector.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

/// Source of `∇_a logit_k(a)`.
pub trait GradientOracle {
    fn gradient(&self, sample: &EmbeddingVector, class: usize) -> Vec<f64>;
}

/// For a linear head the logit gradient is the class weight row.
impl GradientOracle for LinearHead {
    fn gradient(&self, _sample: &EmbeddingVector, class: usize) -> Vec<f64> {
        self.weights[class].clone()
    }
}

impl<F> GradientOracle for F
where
    F: Fn(&EmbeddingVector, usize) -> Vec<f64>,
{
    fn gradient(&self, sample: &EmbeddingVector, class: usize) -> Vec<f64> {
        self(sample, class)
    }
}

pub(crate) fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateData(
            "separator normal has zero or non-finite norm".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Fits the CAV separating `concept` from `negatives`.
///
/// The returned CAV has `concept = 0` and `partition = 0`; [`fit_cavs`]
/// fills in real indices.
pub fn fit_cav(
    concept: &ConceptSet,
    negatives: &[EmbeddingVector],
    config: &TrainerConfig,
    seed: u64,
) -> Result<Cav> {
    let fit = logistic::train(&concept.embeddings, negatives, config, seed)?;
    Ok(Cav {
        concept: 0,
        partition: 0,
        vector: unit(&fit.weights)?,
        accuracy: fit.accuracy,
    })
}

/// Fits one CAV per (concept, partition). Result is indexed
/// `[concept][partition]`.
///
/// Each fit draws its initialization from a seed derived from `seed`, the
/// concept index and the partition index, so the output does not depend on
/// scheduling.
pub fn fit_cavs(
    concepts: &[ConceptSet],
    pool: &RandomPool,
    partitions: &[Vec<usize>],
    config: &TrainerConfig,
    seed: u64,
) -> Result<Vec<Vec<Cav>>> {
    let jobs: Vec<(usize, usize)> = (0..concepts.len())
        .flat_map(|j| (0..partitions.len()).map(move |a| (j, a)))
        .collect();
    let fitted: Vec<Cav> = jobs
        .par_iter()
        .map(|&(j, a)| {
            let negatives: Vec<EmbeddingVector> = partitions[a]
                .iter()
                .map(|&i| pool.embeddings[i].clone())
                .collect();
            let mut cav = fit_cav(
                &concepts[j],
                &negatives,
                config,
                derive_seed(seed, &[j as u64, a as u64]),
            )?;
            cav.concept = j;
            cav.partition = a;
            Ok(cav)
        })
        .collect::<Result<_>>()?;

    let mut by_concept: Vec<Vec<Cav>> = vec![Vec::with_capacity(partitions.len()); concepts.len()];
    for cav in fitted {
        by_concept[cav.concept].push(cav);
    }
    Ok(by_concept)
}

fn require_cavs(cavs: &[Cav]) -> Result<()> {
    if cavs.is_empty() {
        return Err(Error::InvalidParams(
            "TCAV scoring needs at least one CAV".into(),
        ));
    }
    Ok(())
}

/// Fraction of `cavs` along which the class logit increases at `sample`.
pub fn tcav_sample_score(
    sample: &EmbeddingVector,
    class: usize,
    cavs: &[Cav],
    oracle: &impl GradientOracle,
) -> Result<f64> {
    require_cavs(cavs)?;
    let grad = oracle.gradient(sample, class);
    let positive = cavs.iter().filter(|c| c.dot(&grad) > 0.0).count();
    Ok(positive as f64 / cavs.len() as f64)
}

/// Fraction of `samples` whose directional derivative is positive along
/// every one of the concept's CAVs.
pub fn tcav_class_score(
    samples: &[EmbeddingVector],
    class: usize,
    cavs: &[Cav],
    oracle: &impl GradientOracle,
) -> Result<f64> {
    require_cavs(cavs)?;
    if samples.is_empty() {
        return Err(Error::InvalidParams(
            "TCAV class score needs at least one sample".into(),
        ));
    }
    let positive = samples
        .iter()
        .filter(|s| {
            let grad = oracle.gradient(s, class);
            cavs.iter().all(|c| c.dot(&grad) > 0.0)
        })
        .count();
    Ok(positive as f64 / samples.len() as f64)
}

/// Per-sample TCAV score for every concept.
pub fn tcav_sample_scores(
    sample: &EmbeddingVector,
    class: usize,
    cavs_by_concept: &[Vec<Cav>],
    oracle: &impl GradientOracle,
) -> Result<Vec<f64>> {
    cavs_by_concept
        .iter()
        .map(|cavs| tcav_sample_score(sample, class, cavs, oracle))
        .collect()
}
