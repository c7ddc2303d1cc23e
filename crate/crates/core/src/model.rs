//! Domain types shared by every part of the engine.
//!
//! Concept indices are zero-based throughout the crate: concept `j` lives in
//! column `j` of a [`ScoreMatrix`] and the random set occupies the final
//! column `m`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the score column holding the random-pool fraction.
pub const RANDOM_COLUMN: &str = "random";

/// One feature vector `f(x)` in the backbone's latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: 0, col });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(&a, &b)| f64::from(a) * b)
            .sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    /// Multiplies every entry by `factor`, staying finite.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

/// Prototype embeddings `Ω_j` for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub name: String,
    /// Text-to-image prompt the prototypes were generated from. Provenance only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub embeddings: Vec<EmbeddingVector>,
}

impl ConceptSet {
    pub fn new(
        name: impl Into<String>,
        prompt: Option<String>,
        embeddings: Vec<EmbeddingVector>,
    ) -> Result<Self> {
        let name = name.into();
        if embeddings.is_empty() {
            return Err(Error::InvalidParams(format!(
                "concept `{name}` has no prototype embeddings"
            )));
        }
        check_uniform(&embeddings, &format!("concept `{name}`"))?;
        Ok(Self {
            name,
            prompt,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }
}

/// Counterexample embeddings the random partitions are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPool {
    pub source: String,
    pub embeddings: Vec<EmbeddingVector>,
}

impl RandomPool {
    pub fn new(source: impl Into<String>, embeddings: Vec<EmbeddingVector>) -> Result<Self> {
        check_uniform(&embeddings, "random pool")?;
        Ok(Self {
            source: source.into(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// How relevant concepts are picked from a score row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Every concept scoring at least `t`.
    Threshold,
    /// The `n` best-scoring concepts.
    TopN(usize),
}

/// Distance used by the nearest-neighbor search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Squared Euclidean distance.
    #[default]
    Euclidean,
    /// One minus cosine similarity. Zero vectors sit at distance 1 from everything.
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Euclidean => f.write_str("euclidean"),
            Metric::Cosine => f.write_str("cosine"),
        }
    }
}

/// Explainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub k: usize,
    pub t: f64,
    pub alpha: usize,
    pub beta: usize,
    pub seed: u64,
    pub selection_mode: SelectionMode,
    #[serde(default)]
    pub metric: Metric,
}

impl HyperParams {
    /// Neighbor count and partitioning used for the wild-bee runs
    /// (k = 18, 100 partitions of 30), with the default threshold for `m`
    /// concepts.
    pub fn for_concepts(m: usize) -> Self {
        let k = 18;
        Self {
            k,
            t: crate::knn::default_threshold(k, m.max(1)),
            alpha: 100,
            beta: 30,
            seed: 0,
            selection_mode: SelectionMode::Threshold,
            metric: Metric::Euclidean,
        }
    }

    /// Checks the parameters against the sets they will be fitted on.
    pub fn validate(&self, pool_size: usize, prototype_count: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParams("k must be positive".into()));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "threshold t = {} is outside (0, 1]",
                self.t
            )));
        }
        if self.alpha == 0 {
            return Err(Error::InvalidParams("alpha must be positive".into()));
        }
        if self.beta == 0 {
            return Err(Error::InvalidParams("beta must be positive".into()));
        }
        if let SelectionMode::TopN(0) = self.selection_mode {
            return Err(Error::InvalidParams("top-n needs n >= 1".into()));
        }
        if self.beta >= pool_size {
            return Err(Error::PartitionTooLarge {
                beta: self.beta,
                pool: pool_size,
            });
        }
        let fitted = self.beta + prototype_count;
        if self.k > fitted {
            return Err(Error::InvalidParams(format!(
                "k = {} exceeds the {fitted} points in each fitted index",
                self.k
            )));
        }
        Ok(())
    }
}

/// Settings for the TCAV and IBD baselines.
///
/// Both baselines share one set of partitions and one logistic fit per
/// (partition, concept) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub alpha: usize,
    pub beta: usize,
    /// Cap on IBD components; `None` means all `m` concepts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_components: Option<usize>,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            alpha: 30,
            beta: 500,
            max_components: None,
            learning_rate: 0.1,
            max_iterations: 5000,
            tolerance: 1e-6,
        }
    }
}

/// Averaged kNN relevance scores: one row per sample, one column per
/// concept plus the trailing random column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub sample_ids: Vec<String>,
    /// Concept names followed by [`RANDOM_COLUMN`].
    pub concept_ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.scores.len()
    }

    /// Number of concepts `m` (the random column excluded).
    pub fn concept_count(&self) -> usize {
        self.concept_ids.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i]
    }

    /// The first `m` entries of row `i`.
    pub fn concept_row(&self, i: usize) -> &[f64] {
        &self.scores[i][..self.concept_count()]
    }

    pub fn random_score(&self, i: usize) -> f64 {
        self.scores[i][self.concept_count()]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.scores
            .iter()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// The explanation for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<String>,
    pub relevant: BTreeSet<usize>,
    pub absent: BTreeSet<usize>,
    pub scores: Vec<f64>,
    pub rendered: String,
}

/// Binary concept labels that define a class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthConceptVector {
    pub class_name: String,
    pub bits: Vec<u8>,
}

impl GroundTruthConceptVector {
    pub fn new(class_name: impl Into<String>, bits: Vec<u8>) -> Result<Self> {
        let class_name = class_name.into();
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::schema(
                format!("classes.{class_name}.bits"),
                "bits must be 0 or 1",
            ));
        }
        if !bits.contains(&1) {
            return Err(Error::schema(
                format!("classes.{class_name}.bits"),
                "at least one concept bit must be set",
            ));
        }
        Ok(Self { class_name, bits })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn concepts(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(j, _)| j)
    }
}

/// Final dense layer of the classifier: one weight row `w_k` per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl LinearHead {
    pub fn new(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != biases.len() {
            return Err(Error::LengthMismatch {
                left: weights.len(),
                right: biases.len(),
            });
        }
        if let Some(first) = weights.first() {
            let dim = first.len();
            for (k, row) in weights.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: row.len(),
                        location: format!("head row {k}"),
                    });
                }
                if let Some(col) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteValue { row: k, col });
                }
            }
        }
        if let Some(k) = biases.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFiniteValue { row: k, col: 0 });
        }
        Ok(Self { weights, biases })
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn logit(&self, class: usize, a: &EmbeddingVector) -> f64 {
        a.dot(&self.weights[class]) + self.biases[class]
    }

    pub fn predict(&self, a: &EmbeddingVector) -> usize {
        (0..self.classes())
            .map(|k| (k, self.logit(k, a)))
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0
    }
}

fn check_uniform(vectors: &[EmbeddingVector], location: &str) -> Result<()> {
    if let Some(first) = vectors.first() {
        let dim = first.dim();
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                    location: format!("{location}, row {i}"),
                });
            }
        }
    }
    Ok(())
}

/// Succeeds iff every concept prototype, pool vector and sample shares one
/// dimension. Returns that dimension when any vector exists.
pub fn validate_dimensions(
    concepts: &[ConceptSet],
    pool: &RandomPool,
    samples: &[EmbeddingVector],
) -> Result<Option<usize>> {
    let groups = concepts
        .iter()
        .map(|c| (format!("concept `{}`", c.name), c.embeddings.as_slice()))
        .chain(std::iter::once((
            "random pool".to_string(),
            pool.embeddings.as_slice(),
        )))
        .chain(std::iter::once(("samples".to_string(), samples)));

    let mut expected: Option<usize> = None;
    for (location, vectors) in groups {
        for (i, v) in vectors.iter().enumerate() {
            match expected {
                None => expected = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: v.dim(),
                        location: format!("{location}, row {i}"),
                    })
                }
                Some(_) => {}
            }
        }
    }
    Ok(expected)
}
