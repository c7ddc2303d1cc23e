//! Binary logistic regression by full-batch gradient descent.
//!
//! Shared by the TCAV and IBD baselines to separate concept examples from
//! random counterexamples. Inputs are divided by their root-mean-square norm
//! before training so the fixed learning rate behaves the same for any
//! embedding scale; the returned weights are mapped back to the original
//! space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaselineParams, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Training stops once the gradient's largest absolute entry drops below this.
    pub tolerance: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iterations: 5000,
            tolerance: 1e-6,
        }
    }
}

impl From<&BaselineParams> for TrainerConfig {
    fn from(p: &BaselineParams) -> Self {
        Self {
            learning_rate: p.learning_rate,
            max_iterations: p.max_iterations,
            tolerance: p.tolerance,
        }
    }
}

/// A trained separator `w·x + b`, positive side = first class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Training-set accuracy.
    pub accuracy: f64,
}

/// Row-major design matrix with 0/1 labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(Error::LengthMismatch {
                left: features.len(),
                right: dim * labels.len(),
            });
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean logistic loss and its gradient at `params = [w_1..w_D, b]`.
pub fn loss_and_gradient(data: &Dataset, params: &[f64]) -> (f64, Vec<f64>) {
    let d = data.dim;
    let (w, b) = params.split_at(d);
    let b = b[0];
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.labels[i];
        let z = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        loss += softplus(z) - y * z;
        let residual = sigmoid(z) - y;
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += residual * xi;
        }
        grad[d] += residual;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Separates `positives` from `negatives`.
///
/// Weights start from a small seeded Gaussian so that symmetric data, where
/// the zero vector is stationary, still yields a direction.
pub fn train(
    positives: &[EmbeddingVector],
    negatives: &[EmbeddingVector],
    config: &TrainerConfig,
    seed: u64,
) -> Result<LogisticFit> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateData(
            "both classes need at least one example".into(),
        ));
    }
    let dim = positives[0].dim();
    let all = || positives.iter().chain(negatives);
    if let Some(v) = all().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.dim(),
            location: "logistic training data".into(),
        });
    }
    let first = &positives[0];
    if all().all(|v| v == first) {
        return Err(Error::DegenerateData("all training points are identical".into()));
    }

    let n = positives.len() + negatives.len();
    let mean_sq = all()
        .map(|v| v.as_slice().iter().map(|&x| f64::from(x).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let scale = if mean_sq > 0.0 { mean_sq.sqrt() } else { 1.0 };

    let features: Vec<f64> = all()
        .flat_map(|v| v.as_slice().iter().map(move |&x| f64::from(x) / scale))
        .collect();
    let labels: Vec<f64> = std::iter::repeat_n(1.0, positives.len())
        .chain(std::iter::repeat_n(0.0, negatives.len()))
        .collect();
    let data = Dataset::new(dim, features, labels)?;

    let mut fit = train_dataset(&data, config, seed)?;
    fit.weights.iter_mut().for_each(|w| *w /= scale);
    Ok(fit)
}

/// Gradient descent on an already assembled dataset.
pub fn train_dataset(data: &Dataset, config: &TrainerConfig, seed: u64) -> Result<LogisticFit> {
    let d = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut params: Vec<f64> = (0..d).map(|_| init.sample(&mut rng)).collect();
    params.push(0.0);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        let (_, grad) = loss_and_gradient(data, &params);
        let largest = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if largest < config.tolerance {
            converged = true;
            break;
        }
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        iterations += 1;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateData("training diverged".into()));
    }

    let bias = params.pop().expect("bias entry");
    let weights = params;
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateData("fitted weight vector is zero".into()));
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let z = data.row(i).iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias;
            (z > 0.0) == (data.labels[i] > 0.5)
        })
        .count();
    Ok(LogisticFit {
        weights,
        bias,
        iterations,
        converged,
        accuracy: correct as f64 / data.len() as f64,
    })
}
