//! Dataset ingestion, stratified splitting and label frequencies.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{Example, LabelSpace};
use crate::seed::{self, round_half_up};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown label `{label}` on line {line}")]
    UnknownLabel { line: usize, label: String },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("class `{0}` has fewer than 2 examples and cannot be split")]
    ClassTooSmall(String),
    #[error("test fraction {0} is not in (0, 1)")]
    InvalidFraction(f64),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// A validated collection of examples over one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    space: LabelSpace,
    examples: Vec<Example>,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    text: String,
    label: String,
}

impl Dataset {
    /// Validates ids and labels; gold labels are stored in canonical form.
    pub fn new(space: LabelSpace, examples: Vec<Example>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(examples.len());
        for (i, mut ex) in examples.into_iter().enumerate() {
            if ex.id.is_empty() {
                return Err(DatasetError::Parse {
                    line: i + 1,
                    message: "empty id".into(),
                });
            }
            if !seen.insert(ex.id.clone()) {
                return Err(DatasetError::DuplicateId(ex.id));
            }
            ex.gold = space
                .resolve(&ex.gold)
                .map_err(|_| DatasetError::UnknownLabel {
                    line: i + 1,
                    label: ex.gold.clone(),
                })?
                .to_string();
            out.push(ex);
        }
        Ok(Self {
            space,
            examples: out,
        })
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }
}

/// Load a JSON-lines dataset with `id`, `text` and `label` keys. Blank lines
/// are skipped; unknown keys are ignored.
pub fn load_dataset(path: impl AsRef<Path>, space: &LabelSpace) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let gold = space
            .resolve(&rec.label)
            .map_err(|_| DatasetError::UnknownLabel {
                line: line_no,
                label: rec.label.clone(),
            })?
            .to_string();
        if rec.id.is_empty() {
            return Err(DatasetError::Parse {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateId(rec.id));
        }
        examples.push(Example {
            id: rec.id,
            text: rec.text,
            gold,
        });
    }
    Ok(Dataset {
        space: space.clone(),
        examples,
    })
}

/// Per-class test counts: round half up, clamp to `[1, count - 1]`, then
/// nudge classes that were rounded the "wrong way" until the total matches
/// the rounded global test size.
fn per_class_test_counts(counts: &[usize], fraction: f64) -> Vec<usize> {
    let mut test: Vec<usize> = counts
        .iter()
        .map(|&c| round_half_up(fraction * c as f64).clamp(1, c - 1))
        .collect();
    let total: usize = counts.iter().sum();
    let target = round_half_up(fraction * total as f64);
    let current: usize = test.iter().sum();

    // residual = exact share minus assigned; positive means rounded down
    let residual = |i: usize, t: &[usize]| fraction * counts[i] as f64 - t[i] as f64;
    if current < target {
        let mut order: Vec<usize> = (0..counts.len())
            .filter(|&i| residual(i, &test) > 0.0 && test[i] + 1 < counts[i])
            .collect();
        order.sort_by(|&a, &b| residual(b, &test).total_cmp(&residual(a, &test)).then(a.cmp(&b)));
        for i in order.into_iter().take(target - current) {
            test[i] += 1;
        }
    } else if current > target {
        let mut order: Vec<usize> = (0..counts.len())
            .filter(|&i| residual(i, &test) < 0.0 && test[i] > 1)
            .collect();
        order.sort_by(|&a, &b| residual(a, &test).total_cmp(&residual(b, &test)).then(a.cmp(&b)));
        for i in order.into_iter().take(current - target) {
            test[i] -= 1;
        }
    }
    test
}

/// Split into (train, test) with per-class stratification. Both outputs keep
/// the original example order.
pub fn stratified_split(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(test_fraction));
    }
    let space = ds.space();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); space.len()];
    for (i, ex) in ds.examples.iter().enumerate() {
        let class = space.index_of(&ex.gold).expect("validated gold label");
        by_class[class].push(i);
    }
    let present: Vec<usize> = (0..space.len()).filter(|&c| !by_class[c].is_empty()).collect();
    for &c in &present {
        if by_class[c].len() < 2 {
            return Err(DatasetError::ClassTooSmall(space.labels()[c].clone()));
        }
    }
    let counts: Vec<usize> = present.iter().map(|&c| by_class[c].len()).collect();
    let quotas = per_class_test_counts(&counts, test_fraction);

    let mut rng = seed::rng(seed);
    let mut in_test = vec![false; ds.len()];
    for (&c, &quota) in present.iter().zip(&quotas) {
        let mut members = by_class[c].clone();
        members.shuffle(&mut rng);
        for &i in &members[..quota] {
            in_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ex, &t) in ds.examples.iter().zip(&in_test) {
        if t {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((
        Dataset {
            space: space.clone(),
            examples: train,
        },
        Dataset {
            space: space.clone(),
            examples: test,
        },
    ))
}

/// Proportion of each label in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFrequency {
    proportions: BTreeMap<String, f64>,
}

impl LabelFrequency {
    pub fn from_counts<I, S>(counts: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let counts: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| (s.into(), n))
            .collect();
        let total: usize = counts.iter().map(|(_, n)| n).sum();
        if total == 0 {
            return Err(DatasetError::EmptyDataset);
        }
        let proportions = counts
            .into_iter()
            .map(|(label, n)| (label, n as f64 / total as f64))
            .collect();
        Ok(Self { proportions })
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.proportions.get(label).copied()
    }

    /// Inverse-frequency sampling weight `1 / rho(label)`.
    pub fn weight(&self, label: &str) -> Option<f64> {
        self.get(label).filter(|&p| p > 0.0).map(|p| 1.0 / p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.proportions.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn label_frequency(ds: &Dataset) -> Result<LabelFrequency, DatasetError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in ds.examples() {
        *counts.entry(ex.gold.as_str()).or_default() += 1;
    }
    LabelFrequency::from_counts(counts)
}
