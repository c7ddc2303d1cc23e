//! Scoring explanations against ground-truth concept labels.
//!
//! Each method's predicted relevance vector is compared to the class's
//! binary concept vector by cosine similarity, sample by sample, and the
//! similarities are summarized per class by mean and population standard
//! deviation. Only direction matters, so methods whose scores live on
//! different scales remain comparable.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaselineParams, GroundTruthConceptVector, HyperParams};

/// Cosine similarity between a ground-truth vector and a prediction.
///
/// A zero prediction scores 0 (nothing detected is a miss, not a crash);
/// a zero truth vector is a data error.
pub fn cosine_similarity(truth: &[f64], prediction: &[f64]) -> Result<f64> {
    if truth.len() != prediction.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: prediction.len(),
        });
    }
    let tn = truth.iter().map(|x| x * x).sum::<f64>().sqrt();
    if tn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let pn = prediction.iter().map(|x| x * x).sum::<f64>().sqrt();
    if pn == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = truth.iter().zip(prediction).map(|(a, b)| a * b).sum();
    Ok(dot / (tn * pn))
}

/// Cosine-similarity summary for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub mean_cs: f64,
    /// Population standard deviation across the class's samples.
    pub std_cs: f64,
    pub n_samples: usize,
}

/// Mean and population standard deviation. Values are sorted before
/// summation so the result does not depend on input order.
fn summarize(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-class CS statistics for one method.
///
/// `predictions[i]` is the `m`-vector for a sample of class `labels[i]`.
/// Classes appear in the order of `truth`; classes without samples are
/// omitted.
pub fn evaluate_method(
    predictions: &[Vec<f64>],
    labels: &[String],
    truth: &[GroundTruthConceptVector],
) -> Result<Vec<ClassStats>> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); truth.len()];
    for (pred, label) in predictions.iter().zip(labels) {
        let k = truth
            .iter()
            .position(|t| &t.class_name == label)
            .ok_or_else(|| Error::UnknownClass(label.clone()))?;
        per_class[k].push(cosine_similarity(&truth[k].as_f64(), pred)?);
    }
    Ok(truth
        .iter()
        .zip(per_class)
        .filter(|(_, cs)| !cs.is_empty())
        .map(|(t, mut cs)| {
            let (mean_cs, std_cs) = summarize(&mut cs);
            ClassStats {
                class: t.class_name.clone(),
                mean_cs,
                std_cs,
                n_samples: cs.len(),
            }
        })
        .collect())
}

/// Average relevance vector per class, for bar charts.
pub fn mean_scores_per_class(
    predictions: &[Vec<f64>],
    labels: &[String],
    classes: &[String],
) -> Result<Vec<(String, Vec<f64>)>> {
    let m = predictions.first().map_or(0, Vec::len);
    let mut sums: Vec<(Vec<Vec<f64>>, usize)> = vec![(vec![Vec::new(); m], 0); classes.len()];
    for (pred, label) in predictions.iter().zip(labels) {
        let k = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.clone()))?;
        if pred.len() != m {
            return Err(Error::LengthMismatch {
                left: m,
                right: pred.len(),
            });
        }
        for (col, v) in sums[k].0.iter_mut().zip(pred) {
            col.push(*v);
        }
        sums[k].1 += 1;
    }
    Ok(classes
        .iter()
        .zip(sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(c, (cols, n))| {
            let means = cols
                .into_iter()
                .map(|mut col| {
                    col.sort_by(f64::total_cmp);
                    col.iter().sum::<f64>() / n as f64
                })
                .collect();
            (c.clone(), means)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub per_class: Vec<ClassStats>,
}

impl MethodReport {
    /// Unweighted mean of the per-class means.
    pub fn mean_over_classes(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.iter().map(|c| c.mean_cs).sum::<f64>() / self.per_class.len() as f64
    }

    pub fn class(&self, name: &str) -> Option<&ClassStats> {
        self.per_class.iter().find(|c| c.class == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<BaselineParams>,
    pub seed: u64,
    /// Always "population".
    pub std_kind: String,
    /// Always "samples": spreads are across samples, not partitions.
    pub spread_over: String,
    /// Wall-clock time of the run, only when explicitly requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

impl ReportMetadata {
    pub fn new(seed: u64) -> Self {
        Self {
            hyperparams: None,
            baselines: None,
            seed,
            std_kind: "population".into(),
            spread_over: "samples".into(),
            generated_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `class,method,mean_cs,std_cs,n`, one row per class and method, four
    /// decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "method", "mean_cs", "std_cs", "n"])?;
        for m in &self.methods {
            for c in &m.per_class {
                w.write_record([
                    c.class.clone(),
                    m.method.clone(),
                    format!("{:.4}", c.mean_cs),
                    format!("{:.4}", c.std_cs),
                    c.n_samples.to_string(),
                ])?;
            }
        }
        csv_string(w)
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    /// Highest mean in its row (all tied maxima are marked).
    pub best: bool,
}

impl Cell {
    /// `0.9926 ± 0.0043`
    pub fn formatted(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub class: String,
    pub cells: Vec<Cell>,
}

/// Classes × methods grid of CS summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Markdown table with the row maxima in bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Class | {} |", self.methods.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.methods.len()));
        for row in &self.rows {
            let cells: Vec<String> = row
                .cells
                .iter()
                .map(|c| {
                    if c.best {
                        format!("**{}**", c.formatted())
                    } else {
                        c.formatted()
                    }
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", row.class, cells.join(" | "));
        }
        out
    }
}

/// Lines up several methods' reports class by class.
pub fn compare_methods(reports: &[MethodReport]) -> Result<ComparisonTable> {
    let Some(first) = reports.first() else {
        return Ok(ComparisonTable {
            methods: Vec::new(),
            rows: Vec::new(),
        });
    };
    for r in &reports[1..] {
        let same = r.per_class.len() == first.per_class.len()
            && first.per_class.iter().all(|c| r.class(&c.class).is_some());
        if !same {
            return Err(Error::ClassSetMismatch(format!(
                "`{}` and `{}` report different classes",
                first.method, r.method
            )));
        }
    }
    let rows = first
        .per_class
        .iter()
        .map(|c| {
            let stats: Vec<&ClassStats> = reports
                .iter()
                .map(|r| r.class(&c.class).expect("checked above"))
                .collect();
            let best = stats
                .iter()
                .map(|s| s.mean_cs)
                .fold(f64::NEG_INFINITY, f64::max);
            ComparisonRow {
                class: c.class.clone(),
                cells: stats
                    .iter()
                    .map(|s| Cell {
                        mean: s.mean_cs,
                        std: s.std_cs,
                        best: s.mean_cs == best,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(ComparisonTable {
        methods: reports.iter().map(|r| r.method.clone()).collect(),
        rows,
    })
}
