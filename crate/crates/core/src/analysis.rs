//! Post-hoc diagnostics: class-centroid distances, Step-1 candidate-count
//! histograms, Step-1 recall split by final correctness, and raw vector
//! dumps for external 2-D projection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::eval::PredictionRecord;
use crate::knn::{cosine, EmbeddingStore, KnnError};
use crate::labels::{CandidateSet, LabelSpace};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("class {0:?} has no vectors")]
    MissingClass(String),
    #[error("no vector for id {0:?}")]
    MissingVector(String),
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("lookup is empty")]
    EmptyLookup,
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    CosineDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidMatrix {
    pub metric: Metric,
    pub labels: Vec<String>,
    pub distances: Vec<Vec<f64>>,
}

impl CentroidMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.distances[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("label,{}\n", self.labels.join(","));
        for (label, row) in self.labels.iter().zip(&self.distances) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&format!("{label},{}\n", cells.join(",")));
        }
        out
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean vector per class, in label-space order.
pub fn class_centroids<'a>(
    vectors: &EmbeddingStore,
    golds: impl IntoIterator<Item = (&'a str, &'a str)>,
    space: &LabelSpace,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; space.len()];
    for (id, label) in golds {
        let c = space
            .index_of(label)
            .ok_or_else(|| AnalysisError::UnknownLabel(label.to_string()))?;
        let v = vectors.get(id).ok_or_else(|| AnalysisError::MissingVector(id.to_string()))?;
        let (sum, n) = sums[c].get_or_insert_with(|| (vec![0.0; v.len()], 0));
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        *n += 1;
    }
    sums.into_iter()
        .enumerate()
        .map(|(c, slot)| match slot {
            Some((sum, n)) => Ok(sum.into_iter().map(|s| s / n as f64).collect()),
            None => Err(AnalysisError::MissingClass(space.labels()[c].to_string())),
        })
        .collect()
}

/// Pairwise distances between class centroids. The matrix is built from its
/// upper triangle, so it is exactly symmetric with an exactly zero diagonal.
pub fn centroid_distances<'a>(
    vectors: &EmbeddingStore,
    golds: impl IntoIterator<Item = (&'a str, &'a str)>,
    space: &LabelSpace,
    metric: Metric,
) -> Result<CentroidMatrix, AnalysisError> {
    let centroids = class_centroids(vectors, golds, space)?;
    let c = centroids.len();
    let mut distances = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in i + 1..c {
            let d = match metric {
                Metric::Euclidean => euclidean(&centroids[i], &centroids[j]),
                Metric::CosineDistance => (1.0 - cosine(&centroids[i], &centroids[j])?).max(0.0),
            };
            distances[i][j] = d;
            distances[j][i] = d;
        }
    }
    Ok(CentroidMatrix {
        metric,
        labels: space.labels().iter().map(|l| l.to_string()).collect(),
        distances,
    })
}

/// Share of candidate sets per popcount; empty sets land in bucket 0.
pub fn candidate_histogram<'a>(
    sets: impl IntoIterator<Item = &'a CandidateSet>,
) -> Result<BTreeMap<usize, f64>, AnalysisError> {
    let mut counts = BTreeMap::new();
    let mut total = 0usize;
    for set in sets {
        *counts.entry(set.count()).or_insert(0usize) += 1;
        total += 1;
    }
    if total == 0 {
        return Err(AnalysisError::EmptyLookup);
    }
    Ok(counts
        .into_iter()
        .map(|(k, n)| (k, n as f64 / total as f64))
        .collect())
}

pub fn histogram_csv(hist: &BTreeMap<usize, f64>) -> String {
    let mut out = String::from("candidates,frequency\n");
    for (k, f) in hist {
        out.push_str(&format!("{k},{f}\n"));
    }
    out
}

/// Step-1 set, gold label and final prediction of one test example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step1Record {
    pub candidates: CandidateSet,
    pub gold: String,
    pub predicted: String,
}

impl Step1Record {
    /// `None` for records without a Step-1 key (non-marginsel methods).
    pub fn from_prediction(r: &PredictionRecord, space: &LabelSpace) -> Option<Self> {
        let key = r.step1_candidates.as_deref()?;
        Some(Self {
            candidates: CandidateSet::from_key(key, space.len()).ok()?,
            gold: r.gold.clone(),
            predicted: r.predicted.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub label: String,
    /// Recall among records whose final prediction was correct.
    pub when_correct: Option<f64>,
    pub when_incorrect: Option<f64>,
    pub overall: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Per class: share of records with that gold whose Step-1 set contains it,
/// separately for final-correct and final-incorrect records. Strata without
/// records are `None`.
pub fn step1_recall(records: &[Step1Record], space: &LabelSpace) -> Result<Vec<ClassRecall>, AnalysisError> {
    let c = space.len();
    // [stratum][class] -> (hits, total); stratum 0 = correct
    let mut tally = [vec![(0usize, 0usize); c], vec![(0usize, 0usize); c]];
    for r in records {
        let g = space
            .index_of(&r.gold)
            .ok_or_else(|| AnalysisError::UnknownLabel(r.gold.clone()))?;
        let stratum = usize::from(r.predicted != r.gold);
        let slot = &mut tally[stratum][g];
        slot.1 += 1;
        if r.candidates.contains(g) {
            slot.0 += 1;
        }
    }
    let ratio = |(hits, total): (usize, usize)| (total > 0).then(|| hits as f64 / total as f64);
    Ok((0..c)
        .map(|g| {
            let (ok, bad) = (tally[0][g], tally[1][g]);
            ClassRecall {
                label: space.labels()[g].to_string(),
                when_correct: ratio(ok),
                when_incorrect: ratio(bad),
                overall: ratio((ok.0 + bad.0, ok.1 + bad.1)),
                n_correct: ok.1,
                n_incorrect: bad.1,
            }
        })
        .collect())
}

pub fn recall_csv(rows: &[ClassRecall]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("label,when_correct,when_incorrect,overall,n_correct,n_incorrect\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            opt(r.when_correct),
            opt(r.when_incorrect),
            opt(r.overall),
            r.n_correct,
            r.n_incorrect
        ));
    }
    out
}

/// Header written when there is nothing to dump.
pub const PROJECTION_HEADER: &str = "# id, label, vector";

/// Write `{id, label, vector}` JSON lines for an external projector. Every
/// id is checked before the file is touched.
pub fn dump_projection_input<'a>(
    vectors: &EmbeddingStore,
    golds: impl IntoIterator<Item = (&'a str, &'a str)>,
    path: impl AsRef<Path>,
) -> Result<usize, AnalysisError> {
    let mut lines = Vec::new();
    for (id, label) in golds {
        let v = vectors.get(id).ok_or_else(|| AnalysisError::MissingVector(id.to_string()))?;
        lines.push(json!({ "id": id, "label": label, "vector": v }).to_string());
    }
    let body = if lines.is_empty() {
        format!("{PROJECTION_HEADER}\n")
    } else {
        lines.join("\n") + "\n"
    };
    fs::write(path, body)?;
    Ok(lines.len())
}
