//! Concept-based explanations from concept prototypes and nearest neighbors.
//!
//! The core loop: fit a kNN index over labeled concept prototypes plus a
//! random partition of background embeddings, look up a query's `k` nearest
//! neighbors, and read off the fraction that belong to each concept. Averaging
//! over `alpha` random partitions gives a row-stochastic score matrix whose
//! last column is the random set.
//!
//! ```
//! use copronn::{ConceptSet, EmbeddingVector, HyperParams, RandomPool};
//! use copronn::knn::score_matrix;
//!
//! let ev = |v: &[f32]| EmbeddingVector::new(v.to_vec()).unwrap();
//! let concepts = vec![
//!     ConceptSet::new("striped", None, vec![ev(&[1.0, 0.0]), ev(&[0.9, 0.1])]).unwrap(),
//!     ConceptSet::new("spotted", None, vec![ev(&[0.0, 1.0]), ev(&[0.1, 0.9])]).unwrap(),
//! ];
//! let pool = RandomPool::new("noise", vec![ev(&[-1.0, -1.0]), ev(&[-1.0, 0.0]), ev(&[0.0, -1.0])]).unwrap();
//! let params = HyperParams { k: 2, alpha: 4, beta: 2, ..HyperParams::for_concepts(2) };
//!
//! let m = score_matrix(&concepts, &pool, &[ev(&[1.0, 0.05])], &params).unwrap();
//! assert_eq!(m.row(0), &[1.0, 0.0, 0.0]);
//! ```
//!
//! Modules:
//!
//! * [`knn`] scores, selection and rendered explanations
//! * [`store`] the embedding file format and the concept manifest
//! * [`tcav`] and [`ibd`] the two comparison baselines, built on [`logistic`]
//! * [`eval`] cosine-similarity evaluation and comparison tables
//! * [`synth`] synthetic corpora with known ground truth
//! * [`pipeline`] the end-to-end runs behind the CLI

pub mod error;
pub mod eval;
pub mod ibd;
pub mod knn;
pub mod logistic;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod synth;
pub mod tcav;

pub use error::{Error, Result};
pub use knn::{default_threshold, Explainer};
pub use model::{
    ConceptSet, EmbeddingVector, Explanation, GroundTruthConceptVector, HyperParams, LinearHead,
    Metric, RandomPool, ScoreMatrix, SelectionMode,
};
pub use store::{load_manifest, Manifest};
