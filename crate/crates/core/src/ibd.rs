//! Interpretable basis decomposition (IBD) baseline, without the
//! localization maps.
//!
//! Each concept contributes a unit "concept weight vector" `q_j`, the normal
//! of a logistic separator between its prototypes and random
//! counterexamples. A class weight vector is decomposed greedily as
//!
//! ```text
//! w_k = Σ_j s_j q_j + r,    s_j ≥ 0
//! ```
//!
//! and a sample `a` gets concept scores `s_j (q_j·a) / (w_k·a)`. Dividing by
//! the class logit makes the concept scores and the residual term
//! `(r·a) / (w_k·a)` sum to exactly one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic::TrainerConfig;
use crate::model::{ConceptSet, EmbeddingVector};
use crate::seed::derive_seed;
use crate::tcav::{self, Cav};

/// Logits smaller than this in magnitude are refused by [`ibd_sample_scores`].
pub const MIN_LOGIT: f64 = 1e-12;

/// One unit vector per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBasis {
    pub vectors: Vec<Vec<f64>>,
}

impl ConceptBasis {
    /// Normalizes each vector to unit length.
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let vectors = vectors
            .iter()
            .map(|v| tcav::unit(v))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = vectors.first() {
            if let Some(v) = vectors.iter().find(|v| v.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: v.len(),
                    location: "concept basis".into(),
                });
            }
        }
        Ok(Self { vectors })
    }

    /// The basis formed by one CAV per concept.
    pub fn from_cavs(cavs: &[&Cav]) -> Result<Self> {
        Self::new(cavs.iter().map(|c| c.vector.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Greedy nonnegative decomposition of one class weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDecomposition {
    pub class: usize,
    pub class_weights: Vec<f64>,
    /// `s_j` per concept, zero for concepts never selected.
    pub coefficients: Vec<f64>,
    pub residual: Vec<f64>,
    /// Concepts in the order they were selected.
    pub selected: Vec<usize>,
}

impl ClassDecomposition {
    pub fn residual_norm(&self) -> f64 {
        norm_sq(&self.residual).sqrt()
    }

    /// `Σ s_j q_j + r`, which equals the class weight vector.
    pub fn reconstruct(&self, basis: &ConceptBasis) -> Vec<f64> {
        let mut out = self.residual.clone();
        for (s, q) in self.coefficients.iter().zip(&basis.vectors) {
            for (o, qi) in out.iter_mut().zip(q) {
                *o += s * qi;
            }
        }
        out
    }
}

/// Concept scores for one sample plus the residual's share.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAttribution {
    pub scores: Vec<f64>,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// One logistic normal per concept against the shared `negatives`.
pub fn fit_concept_basis(
    concepts: &[ConceptSet],
    negatives: &[EmbeddingVector],
    config: &TrainerConfig,
    seed: u64,
) -> Result<ConceptBasis> {
    let vectors = concepts
        .iter()
        .enumerate()
        .map(|(j, c)| {
            tcav::fit_cav(c, negatives, config, derive_seed(seed, &[j as u64])).map(|cav| cav.vector)
        })
        .collect::<Result<Vec<_>>>()?;
    ConceptBasis::new(vectors)
}

/// Solves `G x = h` for symmetric positive definite `G` (row-major, n×n).
fn cholesky_solve(g: &[f64], h: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| g[i * n + i]).fold(0.0f64, f64::max).max(1.0);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g[i * n + j];
            for p in 0..j {
                sum -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if sum <= 1e-13 * scale {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|p| l[i * n + p] * y[p]).sum();
        y[i] = (h[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|p| l[p * n + i] * x[p]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

/// Lawson–Hanson active-set NNLS: minimizes `‖target − Σ x_i columns[i]‖`
/// subject to `x ≥ 0`.
pub fn nnls(columns: &[&[f64]], target: &[f64]) -> Vec<f64> {
    let n = columns.len();
    let gram: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| dot(columns[i], columns[j]))
        .collect();
    let h: Vec<f64> = columns.iter().map(|c| dot(c, target)).collect();
    let tol = 1e-12 * norm_sq(target).sqrt().max(1.0);

    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let solve_passive = |passive: &[bool]| -> Option<Vec<f64>> {
        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let p = idx.len();
        let sub: Vec<f64> = idx
            .iter()
            .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
            .map(|(i, j)| gram[i * n + j])
            .collect();
        let rhs: Vec<f64> = idx.iter().map(|&i| h[i]).collect();
        let sol = cholesky_solve(&sub, &rhs, p)?;
        let mut z = vec![0.0; n];
        for (&i, v) in idx.iter().zip(sol) {
            z[i] = v;
        }
        Some(z)
    };

    for _ in 0..3 * n + 1 {
        let grad: Vec<f64> = (0..n)
            .map(|i| h[i] - (0..n).map(|j| gram[i * n + j] * x[j]).sum::<f64>())
            .collect();
        let candidate = (0..n)
            .filter(|&i| !passive[i] && grad[i] > tol)
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]).then(b.cmp(&a)));
        let Some(t) = candidate else { break };
        passive[t] = true;

        loop {
            let Some(z) = solve_passive(&passive) else {
                // The newly added column is numerically dependent on the
                // passive set; it cannot improve the fit.
                passive[t] = false;
                return x;
            };
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                x = z;
                break;
            }
            let step = (0..n)
                .filter(|&i| passive[i] && z[i] <= 0.0)
                .map(|i| x[i] / (x[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            for i in 0..n {
                x[i] += step * (z[i] - x[i]);
                if passive[i] && x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// Greedily decomposes `class_weights` over `basis`.
///
/// Each round tries every unselected concept, refits nonnegative
/// coefficients over the selected set plus the candidate, and keeps the
/// candidate leaving the smallest residual (lowest index on ties). Stops
/// after `max_components` rounds or when no candidate reduces the residual.
pub fn decompose_class(
    class: usize,
    class_weights: &[f64],
    basis: &ConceptBasis,
    max_components: usize,
) -> Result<ClassDecomposition> {
    let m = basis.len();
    if max_components > m {
        return Err(Error::InvalidParams(format!(
            "max_components = {max_components} exceeds the {m} basis vectors"
        )));
    }
    if let Some(q) = basis.vectors.first() {
        if q.len() != class_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                found: class_weights.len(),
                location: "class weight vector".into(),
            });
        }
    }

    let residual_of = |coefficients: &[f64], set: &[usize]| -> Vec<f64> {
        let mut r = class_weights.to_vec();
        for (&j, s) in set.iter().zip(coefficients) {
            for (ri, qi) in r.iter_mut().zip(&basis.vectors[j]) {
                *ri -= s * qi;
            }
        }
        r
    };

    let min_gain = 1e-12 * norm_sq(class_weights).max(f64::MIN_POSITIVE);
    let mut selected: Vec<usize> = Vec::new();
    let mut coefficients_sel: Vec<f64> = Vec::new();
    let mut current = norm_sq(class_weights);

    while selected.len() < max_components {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for j in (0..m).filter(|j| !selected.contains(j)) {
            let mut set = selected.clone();
            set.push(j);
            let cols: Vec<&[f64]> = set.iter().map(|&i| basis.vectors[i].as_slice()).collect();
            let coef = nnls(&cols, class_weights);
            let err = norm_sq(&residual_of(&coef, &set));
            if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                best = Some((err, j, coef));
            }
        }
        match best {
            Some((err, j, coef)) if err < current - min_gain => {
                selected.push(j);
                coefficients_sel = coef;
                current = err;
            }
            _ => break,
        }
    }

    let mut coefficients = vec![0.0; m];
    for (&j, &s) in selected.iter().zip(&coefficients_sel) {
        coefficients[j] = s;
    }
    let residual = residual_of(&coefficients_sel, &selected);
    Ok(ClassDecomposition {
        class,
        class_weights: class_weights.to_vec(),
        coefficients,
        residual,
        selected,
    })
}

/// Logit-normalized concept scores for sample `a`.
pub fn ibd_sample_scores(
    a: &EmbeddingVector,
    decomp: &ClassDecomposition,
    basis: &ConceptBasis,
) -> Result<SampleAttribution> {
    let a = a.to_f64();
    if a.len() != decomp.class_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: decomp.class_weights.len(),
            found: a.len(),
            location: "IBD sample".into(),
        });
    }
    let logit = dot(&decomp.class_weights, &a);
    if logit.abs() < MIN_LOGIT {
        return Err(Error::ZeroLogit { logit });
    }
    let scores = decomp
        .coefficients
        .iter()
        .zip(&basis.vectors)
        .map(|(s, q)| s * dot(q, &a) / logit)
        .collect();
    Ok(SampleAttribution {
        scores,
        residual: dot(&decomp.residual, &a) / logit,
    })
}

/// `max(score, 0)` elementwise.
pub fn clamp_negative_scores(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|&s| s.max(0.0)).collect()
}

/// Share of `‖w_k‖²` carried by each selected component:
/// `s_j (q_j·w_k) / ‖w_k‖²`.
pub fn ibd_class_scores(decomp: &ClassDecomposition, basis: &ConceptBasis) -> Vec<f64> {
    let w = &decomp.class_weights;
    let denom = norm_sq(w);
    if denom == 0.0 {
        return vec![0.0; decomp.coefficients.len()];
    }
    decomp
        .coefficients
        .iter()
        .zip(&basis.vectors)
        .map(|(s, q)| s * dot(q, w) / denom)
        .collect()
}
