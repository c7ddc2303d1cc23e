//! End-to-end runs over a loaded [`Manifest`]: explanations, evaluation of
//! stored predictions, and the three-way method comparison.
//!
//! Every function here is deterministic in the manifest's seed, and the
//! writers produce byte-identical files for identical inputs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    compare_methods, csv_string, evaluate_method, mean_scores_per_class, ComparisonTable,
    EvalReport, MethodReport, ReportMetadata,
};
use crate::ibd::{self, ConceptBasis};
use crate::knn::{self, Explainer};
use crate::logistic::TrainerConfig;
use crate::model::{EmbeddingVector, Explanation, HyperParams, Metric, SelectionMode};
use crate::seed::derive_seed;
use crate::store::{self, LabeledSample, Manifest};
use crate::tcav::{self, Cav};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CoProNN")]
    CoProNN,
    #[serde(rename = "TCAV")]
    Tcav,
    #[serde(rename = "IBD")]
    Ibd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CoProNN, Method::Tcav, Method::Ibd];

    pub fn name(self) -> &'static str {
        match self {
            Method::CoProNN => "CoProNN",
            Method::Tcav => "TCAV",
            Method::Ibd => "IBD",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copronn" => Ok(Method::CoProNN),
            "tcav" => Ok(Method::Tcav),
            "ibd" => Ok(Method::Ibd),
            other => Err(Error::InvalidParams(format!("unknown method `{other}`"))),
        }
    }
}

/// Command-line overrides for individual [`HyperParams`] fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HyperParamOverrides {
    pub k: Option<usize>,
    pub t: Option<f64>,
    pub alpha: Option<usize>,
    pub beta: Option<usize>,
    pub seed: Option<u64>,
    pub top_n: Option<usize>,
    pub metric: Option<Metric>,
}

impl HyperParamOverrides {
    /// Applies the overrides and re-validates against the manifest's data.
    pub fn apply(&self, manifest: &mut Manifest) -> Result<()> {
        let hp = &mut manifest.hyperparams;
        if let Some(k) = self.k {
            hp.k = k;
        }
        if let Some(t) = self.t {
            hp.t = t;
        }
        if let Some(alpha) = self.alpha {
            hp.alpha = alpha;
        }
        if let Some(beta) = self.beta {
            hp.beta = beta;
        }
        if let Some(seed) = self.seed {
            hp.seed = seed;
        }
        if let Some(n) = self.top_n {
            hp.selection_mode = SelectionMode::TopN(n);
        }
        if let Some(metric) = self.metric {
            hp.metric = metric;
        }
        let prototypes = manifest.concepts.iter().map(|c| c.len()).sum();
        manifest.hyperparams.validate(manifest.pool.len(), prototypes)
    }
}

/// One explained sample as written by [`explain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    /// Ground-truth class, when the sample came labeled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(flatten)]
    pub explanation: Explanation,
    pub relevant_names: Vec<String>,
}

/// The explanations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationsDocument {
    pub method: String,
    /// Concept names, then `random`: the column order of every `scores` row.
    pub columns: Vec<String>,
    pub hyperparams: HyperParams,
    pub records: Vec<ExplanationRecord>,
}

impl ExplanationsDocument {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&store::read_text(path)?)
            .map_err(|e| Error::schema("<predictions>", e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Reads unlabeled samples from an embedding file; ids are `<stem>/<row>`.
pub fn load_unlabeled_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());
    Ok(store::read_embedding_file(path)?
        .into_iter()
        .enumerate()
        .map(|(i, embedding)| LabeledSample {
            id: format!("{stem}/{i}"),
            class: None,
            embedding,
        })
        .collect())
}

/// Class name each explanation is phrased for: the head's prediction when a
/// head is available, otherwise the sample's own label.
fn explained_class(manifest: &Manifest, sample: &LabeledSample) -> Option<String> {
    match &manifest.head {
        Some(head) => Some(
            manifest.truth[head.predict(&sample.embedding)]
                .class_name
                .clone(),
        ),
        None => sample.class.clone(),
    }
}

/// Runs the explainer over `samples` (or the manifest's own samples).
pub fn explain(manifest: &Manifest, samples: Option<&[LabeledSample]>) -> Result<ExplanationsDocument> {
    let samples = samples.unwrap_or(&manifest.samples);
    let embeddings: Vec<EmbeddingVector> = samples.iter().map(|s| s.embedding.clone()).collect();
    crate::model::validate_dimensions(&manifest.concepts, &manifest.pool, &embeddings)?;

    let explainer = Explainer::new(
        manifest.concepts.clone(),
        manifest.pool.clone(),
        manifest.hyperparams.clone(),
    )?;
    let mut matrix = explainer.score(&embeddings)?;
    matrix.sample_ids = samples.iter().map(|s| s.id.clone()).collect();
    info!(
        "scored {} samples against {} concepts",
        matrix.rows(),
        matrix.concept_count()
    );

    let names = manifest.concept_names();
    let classes: Vec<Option<String>> = samples.iter().map(|s| explained_class(manifest, s)).collect();
    let explanations = knn::explain(&matrix, explainer.params(), &names, &classes);
    let records = explanations
        .into_iter()
        .zip(samples)
        .map(|(explanation, sample)| ExplanationRecord {
            class: sample.class.clone(),
            relevant_names: explanation.relevant.iter().map(|&j| names[j].clone()).collect(),
            explanation,
        })
        .collect();
    Ok(ExplanationsDocument {
        method: Method::CoProNN.name().into(),
        columns: matrix.concept_ids.clone(),
        hyperparams: manifest.hyperparams.clone(),
        records,
    })
}

/// Scores a stored explanations file against the manifest's ground truth.
pub fn evaluate_predictions(manifest: &Manifest, doc: &ExplanationsDocument) -> Result<EvalReport> {
    let m = manifest.concepts.len();
    let mut predictions = Vec::with_capacity(doc.records.len());
    let mut labels = Vec::with_capacity(doc.records.len());
    for r in &doc.records {
        let class = r.class.clone().ok_or_else(|| {
            Error::schema(
                format!("records[{}].class", r.explanation.sample_id),
                "evaluation needs ground-truth class labels",
            )
        })?;
        if r.explanation.scores.len() < m {
            return Err(Error::LengthMismatch {
                left: m,
                right: r.explanation.scores.len(),
            });
        }
        predictions.push(r.explanation.scores[..m].to_vec());
        labels.push(class);
    }
    let per_class = evaluate_method(&predictions, &labels, &manifest.truth)?;
    let mut metadata = ReportMetadata::new(doc.hyperparams.seed);
    metadata.hyperparams = Some(doc.hyperparams.clone());
    Ok(EvalReport {
        methods: vec![MethodReport {
            method: doc.method.clone(),
            per_class,
        }],
        metadata,
    })
}

/// One score vector per class, in manifest order.
pub type ClassScores = Vec<(String, Vec<f64>)>;

/// Per-sample `m`-vectors of every requested method, as evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodPredictions {
    pub method: Method,
    pub scores: Vec<Vec<f64>>,
}

/// Everything [`compare`] computes.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub predictions: Vec<MethodPredictions>,
    pub report: EvalReport,
    pub table: ComparisonTable,
    /// `(method, class, mean score vector)`
    pub class_means: Vec<(Method, String, Vec<f64>)>,
    /// IBD class-level scores averaged over partitions, one row per class.
    pub ibd_class_scores: Option<ClassScores>,
}

fn labeled(manifest: &Manifest) -> Result<(Vec<EmbeddingVector>, Vec<String>, Vec<usize>)> {
    if manifest.samples.is_empty() {
        return Err(Error::schema("samples", "the manifest lists no test samples"));
    }
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    let mut class_idx = Vec::new();
    for s in &manifest.samples {
        let class = s
            .class
            .clone()
            .ok_or_else(|| Error::schema("samples", format!("sample {} has no class", s.id)))?;
        let k = manifest
            .class_index(&class)
            .ok_or_else(|| Error::UnknownClass(class.clone()))?;
        embeddings.push(s.embedding.clone());
        labels.push(class);
        class_idx.push(k);
    }
    Ok((embeddings, labels, class_idx))
}

struct BaselineFits {
    cavs: Vec<Vec<Cav>>,
}

fn fit_baselines(manifest: &Manifest) -> Result<BaselineFits> {
    let b = &manifest.baselines;
    let seed = manifest.hyperparams.seed;
    let partitions =
        knn::sample_partitions(&manifest.pool, b.alpha, b.beta, derive_seed(seed, &[1]))?;
    info!(
        "fitting {} logistic separators for the baselines",
        partitions.len() * manifest.concepts.len()
    );
    let cavs = tcav::fit_cavs(
        &manifest.concepts,
        &manifest.pool,
        &partitions,
        &TrainerConfig::from(b),
        derive_seed(seed, &[2]),
    )?;
    Ok(BaselineFits { cavs })
}

fn tcav_predictions(
    manifest: &Manifest,
    fits: &BaselineFits,
    embeddings: &[EmbeddingVector],
    class_idx: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let head = manifest
        .head
        .as_ref()
        .ok_or_else(|| Error::schema("head", "TCAV needs a classifier head"))?;
    embeddings
        .iter()
        .zip(class_idx)
        .map(|(a, &k)| tcav::tcav_sample_scores(a, k, &fits.cavs, head))
        .collect()
}

fn ibd_predictions(
    manifest: &Manifest,
    fits: &BaselineFits,
    embeddings: &[EmbeddingVector],
    class_idx: &[usize],
) -> Result<(Vec<Vec<f64>>, ClassScores)> {
    let head = manifest
        .head
        .as_ref()
        .ok_or_else(|| Error::schema("head", "IBD needs a classifier head"))?;
    let m = manifest.concepts.len();
    let max_components = manifest.baselines.max_components.unwrap_or(m);
    let partitions = fits.cavs.first().map_or(0, Vec::len);
    let classes = manifest.truth.len();

    let mut sums = vec![vec![0.0; m]; embeddings.len()];
    let mut hits = vec![0usize; embeddings.len()];
    let mut class_sums = vec![vec![0.0; m]; classes];
    for a in 0..partitions {
        let cavs: Vec<&Cav> = fits.cavs.iter().map(|per| &per[a]).collect();
        let basis = ConceptBasis::from_cavs(&cavs)?;
        let decomps = (0..classes)
            .map(|k| ibd::decompose_class(k, &head.weights[k], &basis, max_components))
            .collect::<Result<Vec<_>>>()?;
        for (k, d) in decomps.iter().enumerate() {
            for (acc, s) in class_sums[k].iter_mut().zip(ibd::ibd_class_scores(d, &basis)) {
                *acc += s;
            }
        }
        for (i, (x, &k)) in embeddings.iter().zip(class_idx).enumerate() {
            match ibd::ibd_sample_scores(x, &decomps[k], &basis) {
                Ok(att) => {
                    sums[i].iter_mut().zip(att.scores).for_each(|(acc, s)| *acc += s);
                    hits[i] += 1;
                }
                Err(Error::ZeroLogit { logit }) => {
                    warn!("sample {i}: class logit {logit:e} too small, partition {a} skipped")
                }
                Err(e) => return Err(e),
            }
        }
    }
    let predictions = sums
        .into_iter()
        .zip(hits)
        .map(|(s, n)| {
            let avg: Vec<f64> = if n == 0 {
                vec![0.0; m]
            } else {
                s.iter().map(|v| v / n as f64).collect()
            };
            ibd::clamp_negative_scores(&avg)
        })
        .collect();
    let class_scores = manifest
        .truth
        .iter()
        .zip(class_sums)
        .map(|(t, s)| {
            let n = partitions.max(1) as f64;
            (t.class_name.clone(), s.iter().map(|v| v / n).collect())
        })
        .collect();
    Ok((predictions, class_scores))
}

/// Runs the requested methods on the manifest's labeled samples, all sharing
/// one random pool, and evaluates each against the ground truth.
pub fn compare(manifest: &Manifest, methods: &[Method]) -> Result<Comparison> {
    if methods.is_empty() {
        return Err(Error::InvalidParams("no methods selected".into()));
    }
    let (embeddings, labels, class_idx) = labeled(manifest)?;
    crate::model::validate_dimensions(&manifest.concepts, &manifest.pool, &embeddings)?;

    let needs_baselines = methods.iter().any(|m| matches!(m, Method::Tcav | Method::Ibd));
    let fits = if needs_baselines {
        Some(fit_baselines(manifest)?)
    } else {
        None
    };

    let mut predictions = Vec::new();
    let mut ibd_class_scores = None;
    for &method in methods {
        let scores = match method {
            Method::CoProNN => {
                let matrix = knn::score_matrix(
                    &manifest.concepts,
                    &manifest.pool,
                    &embeddings,
                    &manifest.hyperparams,
                )?;
                (0..matrix.rows())
                    .map(|i| matrix.concept_row(i).to_vec())
                    .collect()
            }
            Method::Tcav => tcav_predictions(
                manifest,
                fits.as_ref().expect("fitted"),
                &embeddings,
                &class_idx,
            )?,
            Method::Ibd => {
                let (p, cls) = ibd_predictions(
                    manifest,
                    fits.as_ref().expect("fitted"),
                    &embeddings,
                    &class_idx,
                )?;
                ibd_class_scores = Some(cls);
                p
            }
        };
        predictions.push(MethodPredictions { method, scores });
    }

    let class_names: Vec<String> = manifest.truth.iter().map(|t| t.class_name.clone()).collect();
    let mut reports = Vec::new();
    let mut class_means = Vec::new();
    for p in &predictions {
        reports.push(MethodReport {
            method: p.method.name().into(),
            per_class: evaluate_method(&p.scores, &labels, &manifest.truth)?,
        });
        for (class, means) in mean_scores_per_class(&p.scores, &labels, &class_names)? {
            class_means.push((p.method, class, means));
        }
    }
    let table = compare_methods(&reports)?;
    let mut metadata = ReportMetadata::new(manifest.hyperparams.seed);
    metadata.hyperparams = Some(manifest.hyperparams.clone());
    if needs_baselines {
        metadata.baselines = Some(manifest.baselines.clone());
    }
    Ok(Comparison {
        predictions,
        report: EvalReport {
            methods: reports,
            metadata,
        },
        table,
        class_means,
        ibd_class_scores,
    })
}

/// `class,method,concept,mean_score` rows for per-class bar charts.
pub fn class_means_csv(comparison: &Comparison, concept_names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "method", "concept", "mean_score"])?;
    for (method, class, means) in &comparison.class_means {
        for (name, v) in concept_names.iter().zip(means) {
            w.write_record([class.as_str(), method.name(), name, &format!("{v:.6}")])?;
        }
    }
    csv_string(w)
}

fn ibd_class_csv(rows: &[(String, Vec<f64>)], concept_names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "concept", "score"])?;
    for (class, scores) in rows {
        for (name, v) in concept_names.iter().zip(scores) {
            w.write_record([class.as_str(), name, &format!("{v:.6}")])?;
        }
    }
    csv_string(w)
}

/// Writes the comparison outputs into `out_dir` and returns the written paths.
pub fn write_comparison(
    comparison: &Comparison,
    concept_names: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = vec![
        ("comparison.md", comparison.table.to_markdown()),
        (
            "comparison.json",
            serde_json::to_string_pretty(&comparison.table)? + "\n",
        ),
        ("report.json", comparison.report.to_json()?),
        ("report.csv", comparison.report.to_csv()?),
        ("class_scores.csv", class_means_csv(comparison, concept_names)?),
    ];
    if let Some(rows) = &comparison.ibd_class_scores {
        files.push(("ibd_class_scores.csv", ibd_class_csv(rows, concept_names)?));
    }
    files
        .into_iter()
        .map(|(name, body)| {
            let path = out_dir.join(name);
            store::write_atomic(&path, body.as_bytes())?;
            Ok(path)
        })
        .collect()
}

/// Writes an evaluation report as `report.json` and `report.csv`.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let json = out_dir.join("report.json");
    let csv = out_dir.join("report.csv");
    store::write_atomic(&json, report.to_json()?.as_bytes())?;
    store::write_atomic(&csv, report.to_csv()?.as_bytes())?;
    Ok(vec![json, csv])
}
