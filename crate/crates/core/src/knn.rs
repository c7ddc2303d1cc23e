//! Concept-based prototypical nearest neighbors.
//!
//! A sample's relevance score for concept `j` is the fraction of its `k`
//! nearest neighbors that are prototypes of `j`, where the search space is
//! every concept's prototypes plus a random partition of `β` counterexamples.
//! The fractions are averaged over `α` independently drawn partitions, and
//! concepts are then selected by threshold or by rank.
//!
//! Neighbor search is exact. Distances are computed in `f64`; equal
//! distances are broken by insertion order (concepts in order, prototypes in
//! file order, then the partition in draw order), so the concept with the
//! lower index wins a tie at rank `k`.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    validate_dimensions, ConceptSet, EmbeddingVector, Explanation, HyperParams, Metric,
    RandomPool, ScoreMatrix, SelectionMode, RANDOM_COLUMN,
};

/// `⌈k/m⌉ / k`: the score a concept reaches when it holds its fair share of
/// `k` neighbors among `m` competing concepts.
///
/// ```
/// assert_eq!(copronn::knn::default_threshold(10, 3), 0.4);
/// ```
pub fn default_threshold(k: usize, m: usize) -> f64 {
    assert!(k >= 1 && m >= 1, "default_threshold needs k, m >= 1");
    k.div_ceil(m) as f64 / k as f64
}

/// Draws `alpha` partitions of `beta` distinct pool indices each.
///
/// Indices are distinct within a partition and may repeat across
/// partitions. The whole sequence is a function of `seed`.
pub fn sample_partitions(
    pool: &RandomPool,
    alpha: usize,
    beta: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    sample_partition_indices(pool.len(), alpha, beta, seed)
}

/// [`sample_partitions`] over a pool of `pool_size` items.
pub fn sample_partition_indices(
    pool_size: usize,
    alpha: usize,
    beta: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if beta >= pool_size {
        return Err(Error::PartitionTooLarge {
            beta,
            pool: pool_size,
        });
    }
    if alpha == 0 {
        return Err(Error::InvalidParams("alpha must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..alpha)
        .map(|_| rand::seq::index::sample(&mut rng, pool_size, beta).into_vec())
        .collect())
}

/// The kNN search space for one random partition: all prototypes followed
/// by the partition's pool vectors, each tagged with its set index
/// (`0..m` for concepts, `m` for random).
#[derive(Debug, Clone)]
pub struct FittedIndex<'a> {
    points: Vec<&'a EmbeddingVector>,
    norms: Vec<f64>,
    tags: Vec<usize>,
    sets: usize,
    k: usize,
    metric: Metric,
}

impl<'a> FittedIndex<'a> {
    pub fn fit(
        concepts: &'a [ConceptSet],
        pool: &'a RandomPool,
        partition: &[usize],
        k: usize,
        metric: Metric,
    ) -> Result<Self> {
        let m = concepts.len();
        let mut points = Vec::with_capacity(partition.len() + concepts.iter().map(|c| c.len()).sum::<usize>());
        let mut tags = Vec::with_capacity(points.capacity());
        for (j, concept) in concepts.iter().enumerate() {
            for v in &concept.embeddings {
                points.push(v);
                tags.push(j);
            }
        }
        for &i in partition {
            let v = pool.embeddings.get(i).ok_or_else(|| {
                Error::InvalidParams(format!("partition index {i} outside pool of {}", pool.len()))
            })?;
            points.push(v);
            tags.push(m);
        }
        Self::from_tagged(points, tags, m + 1, k, metric)
    }

    /// Builds an index over arbitrary tagged points. Tags must be `< sets`.
    pub fn from_tagged(
        points: Vec<&'a EmbeddingVector>,
        tags: Vec<usize>,
        sets: usize,
        k: usize,
        metric: Metric,
    ) -> Result<Self> {
        if points.len() != tags.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: tags.len(),
            });
        }
        if let Some(&bad) = tags.iter().find(|&&t| t >= sets) {
            return Err(Error::InvalidParams(format!("tag {bad} >= set count {sets}")));
        }
        if k == 0 || k > points.len() {
            return Err(Error::InvalidParams(format!(
                "k = {k} must be in 1..={} (points in the index)",
                points.len()
            )));
        }
        if let Some(first) = points.first() {
            let dim = first.dim();
            if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.dim() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.dim(),
                    location: format!("index point {i}"),
                });
            }
        }
        let norms = points
            .iter()
            .map(|p| norm(p.as_slice()))
            .collect();
        Ok(Self {
            points,
            norms,
            tags,
            sets,
            k,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tags(&self) -> &[usize] {
        &self.tags
    }

    fn dim(&self) -> usize {
        self.points[0].dim()
    }

    fn distance(&self, i: usize, query: &[f32], query_norm: f64) -> f64 {
        let p = self.points[i].as_slice();
        match self.metric {
            Metric::Euclidean => p
                .iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum(),
            Metric::Cosine => {
                let denom = self.norms[i] * query_norm;
                if denom == 0.0 {
                    1.0
                } else {
                    let dot: f64 = p
                        .iter()
                        .zip(query)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    1.0 - dot / denom
                }
            }
        }
    }

    /// Insertion indices of the `k` nearest points, nearest first.
    pub fn neighbors(&self, query: &EmbeddingVector) -> Result<Vec<usize>> {
        if query.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: query.dim(),
                location: "query".into(),
            });
        }
        let q = query.as_slice();
        let q_norm = norm(q);
        let mut ranked: Vec<(f64, usize)> = (0..self.points.len())
            .map(|i| (self.distance(i, q, q_norm), i))
            .collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if self.k < ranked.len() {
            ranked.select_nth_unstable_by(self.k - 1, by_rank);
            ranked.truncate(self.k);
        }
        ranked.sort_unstable_by(by_rank);
        Ok(ranked.into_iter().map(|(_, i)| i).collect())
    }

    /// How many of the `k` nearest points carry each tag.
    pub fn neighbor_counts(&self, query: &EmbeddingVector) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.sets];
        for i in self.neighbors(query)? {
            counts[self.tags[i]] += 1;
        }
        Ok(counts)
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of the `k` nearest neighbors belonging to each set, random set last.
pub fn knn_scores_one_partition(index: &FittedIndex<'_>, query: &EmbeddingVector) -> Result<Vec<f64>> {
    let k = index.k() as f64;
    Ok(index
        .neighbor_counts(query)?
        .into_iter()
        .map(|c| c as f64 / k)
        .collect())
}

/// Runs the partitioned kNN over all samples and averages the per-partition
/// fractions. Sample ids default to the row index.
pub fn score_matrix(
    concepts: &[ConceptSet],
    pool: &RandomPool,
    samples: &[EmbeddingVector],
    params: &HyperParams,
) -> Result<ScoreMatrix> {
    validate_dimensions(concepts, pool, samples)?;
    let prototypes = concepts.iter().map(ConceptSet::len).sum();
    params.validate(pool.len(), prototypes)?;

    let partitions = sample_partitions(pool, params.alpha, params.beta, params.seed)?;
    let sets = concepts.len() + 1;
    let s = samples.len();

    // Neighbor counts are summed as integers, so the result does not depend
    // on how the partitions are scheduled.
    let counts = partitions
        .par_iter()
        .map(|partition| -> Result<Vec<u64>> {
            let index = FittedIndex::fit(concepts, pool, partition, params.k, params.metric)?;
            let mut local = vec![0u64; s * sets];
            for (i, sample) in samples.iter().enumerate() {
                for (j, c) in index.neighbor_counts(sample)?.into_iter().enumerate() {
                    local[i * sets + j] += c as u64;
                }
            }
            Ok(local)
        })
        .try_reduce(
            || vec![0u64; s * sets],
            |mut acc, other| {
                acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
                Ok(acc)
            },
        )?;

    let denom = (params.k * params.alpha) as f64;
    let scores = counts
        .chunks(sets.max(1))
        .take(s)
        .map(|row| row.iter().map(|&c| c as f64 / denom).collect())
        .collect();
    let mut concept_ids: Vec<String> = concepts.iter().map(|c| c.name.clone()).collect();
    concept_ids.push(RANDOM_COLUMN.to_string());
    Ok(ScoreMatrix {
        sample_ids: (0..s).map(|i| i.to_string()).collect(),
        concept_ids,
        scores,
    })
}

/// Picks the relevant concepts from the first `m` entries of a score row.
/// An empty set means no concept was detected.
pub fn select_relevant(row: &[f64], params: &HyperParams) -> BTreeSet<usize> {
    match params.selection_mode {
        SelectionMode::Threshold => row
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= params.t)
            .map(|(j, _)| j)
            .collect(),
        SelectionMode::TopN(n) => {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.into_iter().take(n).collect()
        }
    }
}

fn join_names(indices: &BTreeSet<usize>, names: &[String]) -> String {
    indices
        .iter()
        .map(|&j| names.get(j).map_or("?", String::as_str))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Fills the "This image is class A, because concepts X are present and
/// concepts Z are absent." template.
pub fn render_explanation(expl: &Explanation, class_name: &str, concept_names: &[String]) -> String {
    let present = join_names(&expl.relevant, concept_names);
    let absent = join_names(&expl.absent, concept_names);
    match (expl.relevant.is_empty(), expl.absent.is_empty()) {
        (true, true) => format!("This image is class {class_name}."),
        (true, false) => format!(
            "This image is class {class_name}, but no defining concept was detected: concepts {absent} are absent."
        ),
        (false, true) => format!("This image is class {class_name}, because concepts {present} are present."),
        (false, false) => format!(
            "This image is class {class_name}, because concepts {present} are present and concepts {absent} are absent."
        ),
    }
}

/// Selects and renders an explanation for every row of `matrix`.
///
/// `classes[i]` names the class the explanation is phrased for (typically
/// the classifier's prediction); `None` renders as "unknown".
pub fn explain(
    matrix: &ScoreMatrix,
    params: &HyperParams,
    concept_names: &[String],
    classes: &[Option<String>],
) -> Vec<Explanation> {
    let m = matrix.concept_count();
    (0..matrix.rows())
        .map(|i| {
            let relevant = select_relevant(matrix.concept_row(i), params);
            let absent = (0..m).filter(|j| !relevant.contains(j)).collect();
            let predicted_class = classes.get(i).cloned().flatten();
            let mut expl = Explanation {
                sample_id: matrix.sample_ids[i].clone(),
                predicted_class: predicted_class.clone(),
                relevant,
                absent,
                scores: matrix.row(i).to_vec(),
                rendered: String::new(),
            };
            expl.rendered = render_explanation(
                &expl,
                predicted_class.as_deref().unwrap_or("unknown"),
                concept_names,
            );
            expl
        })
        .collect()
}

/// Prototype sets, random pool and hyperparameters bundled and validated once.
#[derive(Debug, Clone)]
pub struct Explainer {
    concepts: Vec<ConceptSet>,
    pool: RandomPool,
    params: HyperParams,
}

impl Explainer {
    pub fn new(concepts: Vec<ConceptSet>, pool: RandomPool, params: HyperParams) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::InvalidParams("at least one concept is required".into()));
        }
        validate_dimensions(&concepts, &pool, &[])?;
        params.validate(pool.len(), concepts.iter().map(ConceptSet::len).sum())?;
        Ok(Self {
            concepts,
            pool,
            params,
        })
    }

    pub fn params(&self) -> &HyperParams {
        &self.params
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn score(&self, samples: &[EmbeddingVector]) -> Result<ScoreMatrix> {
        score_matrix(&self.concepts, &self.pool, samples, &self.params)
    }

    pub fn explain(
        &self,
        samples: &[EmbeddingVector],
        classes: &[Option<String>],
    ) -> Result<Vec<Explanation>> {
        let matrix = self.score(samples)?;
        Ok(explain(&matrix, &self.params, &self.concept_names(), classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn params(k: usize, t: f64) -> HyperParams {
        HyperParams {
            k,
            t,
            alpha: 1,
            beta: 1,
            seed: 0,
            selection_mode: SelectionMode::Threshold,
            metric: Metric::Euclidean,
        }
    }

    fn two_concepts() -> (Vec<ConceptSet>, RandomPool) {
        let concepts = vec![
            ConceptSet::new("a", None, vec![ev(&[0.0, 0.0])]).unwrap(),
            ConceptSet::new("b", None, vec![ev(&[10.0, 10.0])]).unwrap(),
        ];
        let pool = RandomPool::new("rnd", vec![ev(&[5.0, 5.0]), ev(&[100.0, 100.0])]).unwrap();
        (concepts, pool)
    }

    #[test]
    fn nearest_prototype_wins_with_k1() {
        let (concepts, pool) = two_concepts();
        let index = FittedIndex::fit(&concepts, &pool, &[0], 1, Metric::Euclidean).unwrap();
        let scores = knn_scores_one_partition(&index, &ev(&[0.1, 0.0])).unwrap();
        assert_eq!(scores, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn k3_takes_every_point() {
        let (concepts, pool) = two_concepts();
        let index = FittedIndex::fit(&concepts, &pool, &[0], 3, Metric::Euclidean).unwrap();
        let scores = knn_scores_one_partition(&index, &ev(&[0.1, 0.0])).unwrap();
        assert_eq!(scores, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn ties_go_to_lowest_insertion_index() {
        // (1,0) and (-1,0) are both at distance 1 from the origin.
        let concepts = vec![
            ConceptSet::new("a", None, vec![ev(&[1.0, 0.0])]).unwrap(),
            ConceptSet::new("b", None, vec![ev(&[-1.0, 0.0])]).unwrap(),
        ];
        let pool = RandomPool::new("rnd", vec![ev(&[0.0, 1.0]), ev(&[9.0, 9.0])]).unwrap();
        let index = FittedIndex::fit(&concepts, &pool, &[0], 1, Metric::Euclidean).unwrap();
        assert_eq!(
            knn_scores_one_partition(&index, &ev(&[0.0, 0.0])).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        // Reversing concept order reverses the winner.
        let swapped = vec![concepts[1].clone(), concepts[0].clone()];
        let index = FittedIndex::fit(&swapped, &pool, &[0], 1, Metric::Euclidean).unwrap();
        assert_eq!(
            knn_scores_one_partition(&index, &ev(&[0.0, 0.0])).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        // A three-way tie at k = 2 keeps both concepts and drops the random point.
        let index = FittedIndex::fit(&concepts, &pool, &[0], 2, Metric::Euclidean).unwrap();
        assert_eq!(
            index.neighbor_counts(&ev(&[0.0, 0.0])).unwrap(),
            vec![1, 1, 0]
        );
    }

    #[test]
    fn query_dimension_checked() {
        let (concepts, pool) = two_concepts();
        let index = FittedIndex::fit(&concepts, &pool, &[0], 1, Metric::Euclidean).unwrap();
        assert!(matches!(
            knn_scores_one_partition(&index, &ev(&[0.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_metric_ignores_magnitude() {
        let concepts = vec![
            ConceptSet::new("a", None, vec![ev(&[1.0, 0.0])]).unwrap(),
            ConceptSet::new("b", None, vec![ev(&[0.0, 10.0])]).unwrap(),
        ];
        let pool = RandomPool::new("rnd", vec![ev(&[-1.0, -1.0]), ev(&[-2.0, 0.0])]).unwrap();
        let query = ev(&[8.0, 6.0]);
        let cosine = FittedIndex::fit(&concepts, &pool, &[0], 1, Metric::Cosine).unwrap();
        assert_eq!(cosine.neighbor_counts(&query).unwrap(), vec![1, 0, 0]);
        let euclid = FittedIndex::fit(&concepts, &pool, &[0], 1, Metric::Euclidean).unwrap();
        assert_eq!(euclid.neighbor_counts(&query).unwrap(), vec![0, 1, 0]);
        // A zero query is equidistant from everything; insertion order decides.
        assert_eq!(
            cosine.neighbor_counts(&ev(&[0.0, 0.0])).unwrap(),
            vec![1, 0, 0]
        );
    }

    #[test]
    fn partitions_are_distinct_and_seeded() {
        let a = sample_partition_indices(10, 5, 9, 42).unwrap();
        for p in &a {
            let set: BTreeSet<_> = p.iter().collect();
            assert_eq!(set.len(), 9);
            assert!(p.iter().all(|&i| i < 10));
        }
        assert_eq!(a, sample_partition_indices(10, 5, 9, 42).unwrap());
        assert_ne!(a, sample_partition_indices(10, 5, 9, 43).unwrap());
        assert!(matches!(
            sample_partition_indices(10, 1, 10, 0),
            Err(Error::PartitionTooLarge { beta: 10, pool: 10 })
        ));
    }

    #[test]
    fn alpha_one_equals_single_partition() {
        let (concepts, pool) = two_concepts();
        let mut p = params(2, 0.5);
        p.seed = 5;
        let samples = vec![ev(&[0.1, 0.0]), ev(&[9.0, 9.5]), ev(&[60.0, 60.0])];
        let matrix = score_matrix(&concepts, &pool, &samples, &p).unwrap();
        let partition = &sample_partitions(&pool, 1, 1, 5).unwrap()[0];
        let index = FittedIndex::fit(&concepts, &pool, partition, 2, Metric::Euclidean).unwrap();
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(matrix.row(i), knn_scores_one_partition(&index, s).unwrap().as_slice());
        }
    }

    #[test]
    fn threshold_selection_is_inclusive() {
        let p = params(10, 0.4);
        assert_eq!(select_relevant(&[0.5, 0.3, 0.1], &p), BTreeSet::from([0]));
        assert_eq!(select_relevant(&[0.4, 0.4, 0.1], &p), BTreeSet::from([0, 1]));
        assert!(select_relevant(&[0.1, 0.1, 0.1], &p).is_empty());
    }

    #[test]
    fn top_n_selection() {
        let mut p = params(10, 0.4);
        p.selection_mode = SelectionMode::TopN(1);
        assert_eq!(select_relevant(&[0.2, 0.1, 0.3], &p), BTreeSet::from([2]));
        p.selection_mode = SelectionMode::TopN(2);
        assert_eq!(select_relevant(&[0.3, 0.3, 0.3], &p), BTreeSet::from([0, 1]));
        p.selection_mode = SelectionMode::TopN(5);
        assert_eq!(select_relevant(&[0.3, 0.3], &p).len(), 2);
    }

    #[test]
    fn default_threshold_values() {
        assert_eq!(default_threshold(10, 3), 0.4);
        assert_eq!(default_threshold(18, 3), 6.0 / 18.0);
        assert!((default_threshold(18, 3) - 1.0 / 3.0).abs() < 1e-15);
        for k in 1..20 {
            assert_eq!(default_threshold(k, k), 1.0 / k as f64);
        }
    }

    fn bee_names() -> Vec<String> {
        ["fuzzy orange", "fuzzy yellow", "shiny brown"]
            .map(String::from)
            .to_vec()
    }

    fn expl(relevant: &[usize], m: usize) -> Explanation {
        let relevant: BTreeSet<usize> = relevant.iter().copied().collect();
        Explanation {
            sample_id: "0".into(),
            predicted_class: None,
            absent: (0..m).filter(|j| !relevant.contains(j)).collect(),
            relevant,
            scores: vec![],
            rendered: String::new(),
        }
    }

    #[test]
    fn renders_template() {
        assert_eq!(
            render_explanation(&expl(&[0], 3), "A. fulva", &bee_names()),
            "This image is class A. fulva, because concepts fuzzy orange are present and concepts fuzzy yellow, shiny brown are absent."
        );
    }

    #[test]
    fn renders_empty_and_full_selections() {
        let none = render_explanation(&expl(&[], 3), "B. lucorum", &bee_names());
        assert!(none.contains("no defining concept was detected"), "{none}");
        let all = render_explanation(&expl(&[0, 1, 2], 3), "B. lucorum", &bee_names());
        assert_eq!(
            all,
            "This image is class B. lucorum, because concepts fuzzy orange, fuzzy yellow, shiny brown are present."
        );
    }
}
