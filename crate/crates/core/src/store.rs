//! On-disk formats: the `COPROEMB` binary embedding file and the JSON
//! manifest that ties concept sets, the random pool, class labels and
//! hyperparameters together.
//!
//! # Embedding file layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size            | field                                   |
//! |--------|-----------------|-----------------------------------------|
//! | 0      | 8               | magic `b"COPROEMB"`                     |
//! | 8      | 2               | version (`u16`, currently 1)            |
//! | 10     | 4               | dim `D` (`u32`)                         |
//! | 14     | 8               | count (`u64`)                           |
//! | 22     | `count * D * 4` | row-major `f32` payload                 |
//!
//! The file ends exactly after the payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_dimensions, BaselineParams, ConceptSet, EmbeddingVector, GroundTruthConceptVector,
    HyperParams, LinearHead, Metric, RandomPool, SelectionMode,
};

pub const MAGIC: [u8; 8] = *b"COPROEMB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8 + 2 + 4 + 8;

/// Serializes rows into the embedding file layout.
///
/// Every row must have length `dim` and contain only finite values.
pub fn encode_embeddings<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Vec<u8>> {
    let dim32 = u32::try_from(dim)
        .map_err(|_| Error::InvalidParams(format!("dimension {dim} does not fit in u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + rows.len() * dim * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for (row, values) in rows.iter().enumerate() {
        let values = values.as_ref();
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: values.len(),
                location: format!("row {row}"),
            });
        }
        for (col, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row, col });
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses an embedding file image. Returns the declared dimension and rows.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, Vec<EmbeddingVector>)> {
    if bytes.len() >= 8 && bytes[..8] != MAGIC {
        let mut found = [0u8; 8];
        found.copy_from_slice(&bytes[..8]);
        return Err(Error::BadMagic(found));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(bytes[10..14].try_into().expect("4-byte slice")) as usize;
    let count = u64::from_le_bytes(bytes[14..22].try_into().expect("8-byte slice"));

    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .unwrap_or(u64::MAX);
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingData {
            extra: found - expected,
        });
    }

    let rows: Result<Vec<EmbeddingVector>> = if dim == 0 {
        (0..count).map(|_| EmbeddingVector::new(Vec::new())).collect()
    } else {
        payload
            .chunks_exact(dim * 4)
            .enumerate()
            .map(|(row, chunk)| {
                let values: Vec<f32> = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                    .collect();
                EmbeddingVector::new(values).map_err(|e| match e {
                    Error::NonFiniteValue { col, .. } => Error::NonFiniteValue { row, col },
                    other => other,
                })
            })
            .collect()
    };
    Ok((dim, rows?))
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<Vec<EmbeddingVector>> {
    read_embedding_file_with_dim(path).map(|(_, rows)| rows)
}

/// Like [`read_embedding_file`] but also returns the header's dimension,
/// which is the only source of `D` for an empty file.
pub fn read_embedding_file_with_dim(
    path: impl AsRef<Path>,
) -> Result<(usize, Vec<EmbeddingVector>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_embeddings(&bytes)
}

pub fn write_embedding_file<R: AsRef<[f32]>>(
    path: impl AsRef<Path>,
    dim: usize,
    rows: &[R],
) -> Result<()> {
    let bytes = encode_embeddings(dim, rows)?;
    write_atomic(path.as_ref(), &bytes)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParams(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// The manifest exactly as it appears on disk.
///
/// Paths are relative to the manifest's directory. `samples`, `head` and
/// `baselines` are optional; the explainer only needs the first four blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDocument {
    pub concepts: Vec<ConceptEntry>,
    pub random_pool: PoolEntry,
    pub classes: Vec<ClassEntry>,
    pub hyperparams: HyperParamsEntry,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<BaselineParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub embedding_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub source: String,
    pub embedding_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub bits: Vec<u8>,
}

/// Hyperparameters with `t` optional: it is required only for threshold
/// selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParamsEntry {
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    pub alpha: usize,
    pub beta: usize,
    pub seed: u64,
    pub selection_mode: SelectionMode,
    #[serde(default)]
    pub metric: Metric,
}

impl From<&HyperParams> for HyperParamsEntry {
    fn from(p: &HyperParams) -> Self {
        Self {
            k: p.k,
            t: Some(p.t),
            alpha: p.alpha,
            beta: p.beta,
            seed: p.seed,
            selection_mode: p.selection_mode,
            metric: p.metric,
        }
    }
}

/// Test samples of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub class: String,
    pub embedding_file: PathBuf,
}

/// Classifier head: one weight row per entry of `classes`, same order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub embedding_file: PathBuf,
    pub biases: Vec<f64>,
}

/// One test sample with its identifier and, when known, its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub class: Option<String>,
    pub embedding: EmbeddingVector,
}

/// A fully loaded, dimension-checked manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dim: usize,
    pub concepts: Vec<ConceptSet>,
    pub pool: RandomPool,
    pub truth: Vec<GroundTruthConceptVector>,
    pub hyperparams: HyperParams,
    pub samples: Vec<LabeledSample>,
    pub head: Option<LinearHead>,
    pub baselines: BaselineParams,
}

impl Manifest {
    pub fn truth_for(&self, class: &str) -> Option<&GroundTruthConceptVector> {
        self.truth.iter().find(|t| t.class_name == class)
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.truth.iter().position(|t| t.class_name == class)
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn sample_embeddings(&self) -> Vec<EmbeddingVector> {
        self.samples.iter().map(|s| s.embedding.clone()).collect()
    }
}

pub fn parse_manifest_document(text: &str) -> Result<ManifestDocument> {
    serde_json::from_str(text).map_err(|e| Error::schema("<document>", e.to_string()))
}

/// Reads a UTF-8 input file, reporting a missing file as [`Error::MissingFile`].
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Loads a manifest and every embedding file it references.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let doc = parse_manifest_document(&read_text(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_manifest(&doc, base)
}

/// Turns a parsed document into a [`Manifest`], reading embedding files
/// relative to `base`.
pub fn resolve_manifest(doc: &ManifestDocument, base: &Path) -> Result<Manifest> {
    let m = doc.concepts.len();
    if m == 0 {
        return Err(Error::schema("concepts", "at least one concept is required"));
    }
    for (i, c) in doc.concepts.iter().enumerate() {
        if doc.concepts[..i].iter().any(|o| o.name == c.name) {
            return Err(Error::schema(
                format!("concepts[{i}].name"),
                format!("duplicate concept name `{}`", c.name),
            ));
        }
    }
    if doc.classes.is_empty() {
        return Err(Error::schema("classes", "at least one class is required"));
    }
    let mut truth = Vec::with_capacity(doc.classes.len());
    for (i, class) in doc.classes.iter().enumerate() {
        if doc.classes[..i].iter().any(|o| o.name == class.name) {
            return Err(Error::schema(
                format!("classes[{i}].name"),
                format!("duplicate class name `{}`", class.name),
            ));
        }
        if class.bits.len() != m {
            return Err(Error::schema(
                format!("classes[{i}].bits"),
                format!("expected {m} bits, found {}", class.bits.len()),
            ));
        }
        truth.push(GroundTruthConceptVector::new(&class.name, class.bits.clone())?);
    }

    let hp = &doc.hyperparams;
    let t = match (hp.t, hp.selection_mode) {
        (Some(t), _) => t,
        (None, SelectionMode::TopN(_)) => crate::knn::default_threshold(hp.k.max(1), m),
        (None, SelectionMode::Threshold) => {
            return Err(Error::schema(
                "hyperparams.t",
                "threshold selection requires `t`",
            ))
        }
    };
    let hyperparams = HyperParams {
        k: hp.k,
        t,
        alpha: hp.alpha,
        beta: hp.beta,
        seed: hp.seed,
        selection_mode: hp.selection_mode,
        metric: hp.metric,
    };

    let mut dim: Option<usize> = None;
    let mut load = |file: &Path, location: &str| -> Result<Vec<EmbeddingVector>> {
        let (d, rows) = read_embedding_file_with_dim(base.join(file))?;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: d,
                    location: location.to_string(),
                })
            }
            Some(_) => {}
        }
        Ok(rows)
    };

    let mut concepts = Vec::with_capacity(m);
    for c in &doc.concepts {
        let rows = load(&c.embedding_file, &format!("concept `{}`", c.name))?;
        concepts.push(ConceptSet::new(&c.name, c.prompt.clone(), rows)?);
    }
    let pool_rows = load(&doc.random_pool.embedding_file, "random pool")?;
    let pool = RandomPool::new(&doc.random_pool.source, pool_rows)?;

    let mut samples = Vec::new();
    for (i, entry) in doc.samples.iter().enumerate() {
        if !truth.iter().any(|t| t.class_name == entry.class) {
            return Err(Error::schema(
                format!("samples[{i}].class"),
                format!("class `{}` is not declared in `classes`", entry.class),
            ));
        }
        let rows = load(&entry.embedding_file, &format!("samples of `{}`", entry.class))?;
        samples.extend(rows.into_iter().enumerate().map(|(r, embedding)| LabeledSample {
            id: format!("{}/{r}", entry.class),
            class: Some(entry.class.clone()),
            embedding,
        }));
    }

    let head = match &doc.head {
        None => None,
        Some(h) => {
            let rows = load(&h.embedding_file, "head")?;
            if rows.len() != truth.len() {
                return Err(Error::schema(
                    "head.embedding_file",
                    format!("expected {} class rows, found {}", truth.len(), rows.len()),
                ));
            }
            if h.biases.len() != truth.len() {
                return Err(Error::schema(
                    "head.biases",
                    format!("expected {} biases, found {}", truth.len(), h.biases.len()),
                ));
            }
            Some(LinearHead::new(
                rows.iter().map(EmbeddingVector::to_f64).collect(),
                h.biases.clone(),
            )?)
        }
    };

    let sample_vectors: Vec<EmbeddingVector> =
        samples.iter().map(|s| s.embedding.clone()).collect();
    validate_dimensions(&concepts, &pool, &sample_vectors)?;
    let prototype_count = concepts.iter().map(ConceptSet::len).sum();
    hyperparams.validate(pool.len(), prototype_count)?;

    Ok(Manifest {
        dim: dim.unwrap_or(0),
        concepts,
        pool,
        truth,
        hyperparams,
        samples,
        head,
        baselines: doc.baselines.clone().unwrap_or_default(),
    })
}
