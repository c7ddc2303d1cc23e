//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use copronn::knn::score_matrix;
use copronn::{ConceptSet, EmbeddingVector, HyperParams, RandomPool, ScoreMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ev(v: &[f32]) -> EmbeddingVector {
    EmbeddingVector::new(v.to_vec()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Either small integers (many exact distance ties) or uniform floats.
pub fn random_point(rng: &mut impl Rng, dim: usize, integer: bool) -> EmbeddingVector {
    let v: Vec<f32> = (0..dim)
        .map(|_| {
            if integer {
                rng.random_range(-2i32..=2) as f32
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        })
        .collect();
    EmbeddingVector::new(v).unwrap()
}

/// A random kNN instance: tagged points, a query and `k`.
pub struct KnnInstance {
    pub points: Vec<EmbeddingVector>,
    pub tags: Vec<usize>,
    pub sets: usize,
    pub query: EmbeddingVector,
    pub k: usize,
}

pub fn knn_instance(rng: &mut impl Rng) -> KnnInstance {
    let dim = rng.random_range(1..=16);
    let n = rng.random_range(1..=200);
    let sets = rng.random_range(2..=6);
    let integer = rng.random_bool(0.5);
    let points = (0..n).map(|_| random_point(rng, dim, integer)).collect();
    let tags = (0..n).map(|_| rng.random_range(0..sets)).collect();
    let query = random_point(rng, dim, integer);
    let k = rng.random_range(1..=n.min(25));
    KnnInstance {
        points,
        tags,
        sets,
        query,
        k,
    }
}

/// Full sort by squared distance with a stable sort, so equal distances keep
/// insertion order, then the tag fractions of the first `k`.
pub fn brute_force_scores(inst: &KnnInstance) -> Vec<f64> {
    let q = inst.query.as_slice();
    let mut order: Vec<(f64, usize)> = inst
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d: f64 = p
                .as_slice()
                .iter()
                .zip(q)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            (d, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut counts = vec![0usize; inst.sets];
    for &(_, i) in order.iter().take(inst.k) {
        counts[inst.tags[i]] += 1;
    }
    counts.iter().map(|&c| c as f64 / inst.k as f64).collect()
}

/// Concepts as Gaussian blobs around the first `m` axes, pool around the origin.
pub fn blob_problem(
    rng: &mut impl Rng,
    dim: usize,
    m: usize,
    per_concept: usize,
    pool: usize,
) -> (Vec<ConceptSet>, RandomPool) {
    let mut jitter = |center: &[f32], spread: f32| -> EmbeddingVector {
        let v: Vec<f32> = center
            .iter()
            .map(|&c| c + rng.random_range(-spread..spread))
            .collect();
        EmbeddingVector::new(v).unwrap()
    };
    let concepts = (0..m)
        .map(|j| {
            let mut center = vec![0.0f32; dim];
            center[j % dim] = 1.0;
            let protos = (0..per_concept).map(|_| jitter(&center, 0.4)).collect();
            ConceptSet::new(format!("c{j}"), None, protos).unwrap()
        })
        .collect();
    let origin = vec![0.0f32; dim];
    let pool = RandomPool::new("blob", (0..pool).map(|_| jitter(&origin, 1.0)).collect()).unwrap();
    (concepts, pool)
}

/// `score_matrix` plus the row-stochasticity check that every matrix in
/// the suite must satisfy.
pub fn checked_score_matrix(
    concepts: &[ConceptSet],
    pool: &RandomPool,
    samples: &[EmbeddingVector],
    params: &HyperParams,
) -> ScoreMatrix {
    let m = score_matrix(concepts, pool, samples, params).unwrap();
    assert_eq!(m.rows(), samples.len());
    assert!(m.max_row_sum_error() <= 1e-9, "row sum off by {}", m.max_row_sum_error());
    for row in &m.scores {
        assert_eq!(row.len(), concepts.len() + 1);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    m
}
