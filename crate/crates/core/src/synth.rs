//! Seeded synthetic corpora with known concept structure.
//!
//! Concept `j` has a unit mean direction `μ_j`; its prototypes are
//! `μ_j + σ_j·N(0, I)`. A sample of a class with concept bits `b` is
//! `normalize(Σ_{b_j = 1} μ_j) + σ_s·N(0, I)`. Random-pool vectors are
//! uniform directions on the unit sphere, rejected when closer than
//! `pool_max_cosine` to any concept mean. The classifier head is a
//! nearest-centroid linear layer fitted on a separate draw of class samples.
//!
//! Everything is drawn from one ChaCha stream in a fixed order (directions,
//! prototypes, pool, samples, head samples), so a spec and its seed pin the
//! corpus down to the bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BaselineParams, ConceptSet, EmbeddingVector, GroundTruthConceptVector, HyperParams,
    LinearHead, RandomPool,
};
use crate::store::{
    self, ClassEntry, ConceptEntry, HeadEntry, HyperParamsEntry, LabeledSample,
    ManifestDocument, PoolEntry, SampleEntry,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Prototype spread around the mean.
    pub sigma: f64,
    /// Mean direction; normalized on use. Drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub bits: Vec<u8>,
}

fn default_pool_max_cosine() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub concepts: Vec<ConceptSpec>,
    pub classes: Vec<ClassSpec>,
    pub prototypes_per_concept: usize,
    pub pool_size: usize,
    pub samples_per_class: usize,
    /// Samples per class used to fit the head; defaults to `samples_per_class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_samples_per_class: Option<usize>,
    /// Noise on test samples.
    pub sample_sigma: f64,
    #[serde(default = "default_pool_max_cosine")]
    pub pool_max_cosine: f64,
    pub seed: u64,
    /// Explainer settings written to the manifest; defaults to
    /// [`HyperParams::for_concepts`] with the corpus seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<HyperParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<BaselineParams>,
}

impl SyntheticSpec {
    /// Three concepts and five classes laid out like the wild-bee task:
    /// fuzzy orange, fuzzy yellow with black stripes, smooth shiny dark brown.
    ///
    /// Ten prototypes per concept keep every set smaller than the default
    /// `k = 18`, so a sample lying between two concept clusters draws
    /// neighbors from both instead of exhausting the nearer one.
    pub fn wild_bees(sigma: f64, seed: u64) -> Self {
        let concept = |name: &str, prompt: &str| ConceptSpec {
            name: name.into(),
            prompt: Some(prompt.into()),
            sigma,
            direction: None,
        };
        let class = |name: &str, bits: [u8; 3]| ClassSpec {
            name: name.into(),
            bits: bits.to_vec(),
        };
        Self {
            dim: 16,
            concepts: vec![
                concept("fuzzy orange", "fuzzy dark orange bee"),
                concept("fuzzy yellow", "bee with fuzzy yellow and black stripes"),
                concept("shiny brown", "smooth shiny dark brown bee"),
            ],
            classes: vec![
                class("A. bicolor", [1, 0, 1]),
                class("A. flavipes", [0, 0, 1]),
                class("A. fulva", [1, 0, 0]),
                class("B. lucorum", [0, 1, 0]),
                class("B. pratorum", [1, 1, 0]),
            ],
            prototypes_per_concept: 10,
            pool_size: 1000,
            samples_per_class: 30,
            head_samples_per_class: None,
            sample_sigma: sigma,
            pool_max_cosine: 0.5,
            seed,
            hyperparams: None,
            baselines: None,
        }
    }

    /// Reads and validates a spec file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::store::read_text(path)?;
        let spec: Self =
            serde_json::from_str(&text).map_err(|e| Error::schema("<spec>", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.concepts.len();
        if self.dim == 0 {
            return Err(Error::Spec("dim must be positive".into()));
        }
        if m == 0 {
            return Err(Error::Spec("at least one concept is required".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Spec("at least one class is required".into()));
        }
        for c in &self.concepts {
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return Err(Error::Spec(format!("concept `{}` needs sigma > 0", c.name)));
            }
            if let Some(d) = &c.direction {
                if d.len() != self.dim {
                    return Err(Error::Spec(format!(
                        "direction of `{}` has length {}, expected {}",
                        c.name,
                        d.len(),
                        self.dim
                    )));
                }
                if d.iter().all(|&x| x == 0.0) || d.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Spec(format!("direction of `{}` is degenerate", c.name)));
                }
            }
        }
        if !(self.sample_sigma > 0.0 && self.sample_sigma.is_finite()) {
            return Err(Error::Spec("sample_sigma must be > 0".into()));
        }
        for c in &self.classes {
            if c.bits.len() != m || c.bits.iter().any(|&b| b > 1) || !c.bits.contains(&1) {
                return Err(Error::Spec(format!(
                    "class `{}` needs {m} bits of 0/1 with at least one set",
                    c.name
                )));
            }
        }
        if self.prototypes_per_concept == 0 || self.samples_per_class == 0 {
            return Err(Error::Spec("counts must be positive".into()));
        }
        if self.pool_size < 2 {
            return Err(Error::Spec("pool_size must be at least 2".into()));
        }
        if !(self.pool_max_cosine > -1.0 && self.pool_max_cosine < 1.0) {
            return Err(Error::Spec("pool_max_cosine must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

/// A generated corpus, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub directions: Vec<Vec<f64>>,
    pub concepts: Vec<ConceptSet>,
    pub pool: RandomPool,
    pub samples: Vec<LabeledSample>,
    pub truth: Vec<GroundTruthConceptVector>,
    pub head: LinearHead,
    pub hyperparams: HyperParams,
    pub baselines: BaselineParams,
}

impl Corpus {
    pub fn dim(&self) -> usize {
        self.directions.first().map_or(0, Vec::len)
    }

    pub fn sample_embeddings(&self) -> Vec<EmbeddingVector> {
        self.samples.iter().map(|s| s.embedding.clone()).collect()
    }

    pub fn sample_labels(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| s.class.clone().unwrap_or_default())
            .collect()
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn to_embedding(v: &[f64]) -> Result<EmbeddingVector> {
    EmbeddingVector::new(v.iter().map(|&x| x as f32).collect())
}

/// Mean directions: given ones are normalized; missing ones are drawn from
/// the sphere and Gram–Schmidt orthogonalized against the earlier ones while
/// the dimension allows.
fn mean_directions(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.concepts.len());
    for c in &spec.concepts {
        let mut d = match &c.direction {
            Some(d) => d.clone(),
            None => {
                let mut d = gaussian(rng, spec.dim);
                if dirs.len() < spec.dim {
                    for prev in &dirs {
                        let proj: f64 = d.iter().zip(prev).map(|(a, b)| a * b).sum();
                        d.iter_mut().zip(prev).for_each(|(x, p)| *x -= proj * p);
                    }
                }
                d
            }
        };
        if normalize(&mut d) == 0.0 {
            return Err(Error::Spec(format!("direction of `{}` is degenerate", c.name)));
        }
        dirs.push(d);
    }
    for i in 0..dirs.len() {
        for j in 0..i {
            if dirs[i] == dirs[j] {
                return Err(Error::Spec(format!(
                    "concepts `{}` and `{}` share a mean direction",
                    spec.concepts[j].name, spec.concepts[i].name
                )));
            }
        }
    }
    Ok(dirs)
}

fn class_center(bits: &[u8], dirs: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    for (j, _) in bits.iter().enumerate().filter(|(_, &b)| b == 1) {
        c.iter_mut().zip(&dirs[j]).for_each(|(x, d)| *x += d);
    }
    normalize(&mut c);
    c
}

fn draw_around(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Result<EmbeddingVector> {
    let noise = gaussian(rng, center.len());
    let v: Vec<f64> = center.iter().zip(noise).map(|(c, n)| c + sigma * n).collect();
    to_embedding(&v)
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let directions = mean_directions(spec, &mut rng)?;

    let mut concepts = Vec::with_capacity(spec.concepts.len());
    for (c, dir) in spec.concepts.iter().zip(&directions) {
        let protos = (0..spec.prototypes_per_concept)
            .map(|_| draw_around(&mut rng, dir, c.sigma))
            .collect::<Result<Vec<_>>>()?;
        concepts.push(ConceptSet::new(&c.name, c.prompt.clone(), protos)?);
    }

    let mut pool = Vec::with_capacity(spec.pool_size);
    let mut attempts = 0usize;
    while pool.len() < spec.pool_size {
        attempts += 1;
        if attempts > 1000 * spec.pool_size {
            return Err(Error::Spec(
                "could not place random pool far enough from the concept means; raise pool_max_cosine".into(),
            ));
        }
        let mut u = gaussian(&mut rng, dim);
        if normalize(&mut u) == 0.0 {
            continue;
        }
        let close = directions.iter().any(|d| {
            let cos: f64 = u.iter().zip(d).map(|(a, b)| a * b).sum();
            cos > spec.pool_max_cosine
        });
        if !close {
            pool.push(to_embedding(&u)?);
        }
    }
    let pool = RandomPool::new("synthetic uniform sphere", pool)?;

    let centers: Vec<Vec<f64>> = spec
        .classes
        .iter()
        .map(|c| class_center(&c.bits, &directions, dim))
        .collect();

    let mut samples = Vec::new();
    for (class, center) in spec.classes.iter().zip(&centers) {
        for i in 0..spec.samples_per_class {
            samples.push(LabeledSample {
                id: format!("{}/{i}", class.name),
                class: Some(class.name.clone()),
                embedding: draw_around(&mut rng, center, spec.sample_sigma)?,
            });
        }
    }

    let head_n = spec.head_samples_per_class.unwrap_or(spec.samples_per_class).max(1);
    let mut weights = Vec::with_capacity(centers.len());
    let mut biases = Vec::with_capacity(centers.len());
    for center in &centers {
        let mut mean = vec![0.0; dim];
        for _ in 0..head_n {
            let v = draw_around(&mut rng, center, spec.sample_sigma)?;
            mean.iter_mut().zip(v.as_slice()).for_each(|(m, &x)| *m += f64::from(x));
        }
        // Round through f32 so the in-memory head equals the one read back
        // from its embedding file.
        let mean: Vec<f64> = mean
            .iter()
            .map(|m| f64::from((m / head_n as f64) as f32))
            .collect();
        biases.push(-0.5 * mean.iter().map(|x| x * x).sum::<f64>());
        weights.push(mean);
    }
    let head = LinearHead::new(weights, biases)?;

    let truth = spec
        .classes
        .iter()
        .map(|c| GroundTruthConceptVector::new(&c.name, c.bits.clone()))
        .collect::<Result<Vec<_>>>()?;

    let hyperparams = spec.hyperparams.clone().unwrap_or_else(|| HyperParams {
        seed: spec.seed,
        ..HyperParams::for_concepts(spec.concepts.len())
    });

    Ok(Corpus {
        directions,
        concepts,
        pool,
        samples,
        truth,
        head,
        hyperparams,
        baselines: spec.baselines.clone().unwrap_or_default(),
    })
}

fn slug(i: usize, prefix: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}_{i:02}.emb"))
}

/// Writes the corpus as embedding files plus `manifest.json` into `out_dir`
/// and returns the manifest path.
pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let dim = corpus.dim();

    let mut concepts = Vec::new();
    for (j, c) in corpus.concepts.iter().enumerate() {
        let file = slug(j, "concept");
        store::write_embedding_file(out_dir.join(&file), dim, &c.embeddings)?;
        concepts.push(ConceptEntry {
            name: c.name.clone(),
            prompt: c.prompt.clone(),
            embedding_file: file,
        });
    }

    let pool_file = PathBuf::from("random_pool.emb");
    store::write_embedding_file(out_dir.join(&pool_file), dim, &corpus.pool.embeddings)?;

    let mut samples = Vec::new();
    for (k, t) in corpus.truth.iter().enumerate() {
        let rows: Vec<&EmbeddingVector> = corpus
            .samples
            .iter()
            .filter(|s| s.class.as_deref() == Some(&t.class_name))
            .map(|s| &s.embedding)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let file = slug(k, "samples");
        store::write_embedding_file(out_dir.join(&file), dim, &rows)?;
        samples.push(SampleEntry {
            class: t.class_name.clone(),
            embedding_file: file,
        });
    }

    let head_file = PathBuf::from("head.emb");
    let head_rows: Vec<Vec<f32>> = corpus
        .head
        .weights
        .iter()
        .map(|w| w.iter().map(|&x| x as f32).collect())
        .collect();
    store::write_embedding_file(out_dir.join(&head_file), dim, &head_rows)?;

    let doc = ManifestDocument {
        concepts,
        random_pool: PoolEntry {
            source: corpus.pool.source.clone(),
            embedding_file: pool_file,
        },
        classes: corpus
            .truth
            .iter()
            .map(|t| ClassEntry {
                name: t.class_name.clone(),
                bits: t.bits.clone(),
            })
            .collect(),
        hyperparams: HyperParamsEntry::from(&corpus.hyperparams),
        samples,
        head: Some(HeadEntry {
            embedding_file: head_file,
            biases: corpus.head.biases.clone(),
        }),
        baselines: Some(corpus.baselines.clone()),
    };
    let manifest = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    store::write_atomic(&manifest, text.as_bytes())?;
    Ok(manifest)
}

/// Draws a random unit vector; used by tests and examples.
pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) > 0.0 {
            return v;
        }
    }
}
