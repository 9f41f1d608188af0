//! Hard-example demonstration selection.
//!
//! Step 1 assigns every training example a zero-shot candidate-label set
//! and stores it in a lookup table. Step 2 keeps the training examples whose
//! candidate set is bit-identical to the test example's, draws up to
//! `round(alpha * n)` of them by inverse-label-frequency weighted sampling
//! without replacement, and fills the remaining shots with cosine nearest
//! neighbours.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, LabelFrequency};
use crate::knn::{knn_by_vector, EmbeddingStore, KnnError};
use crate::labels::{candidate_set_from_labels, CandidateSet, Example, LabelError, LabelSpace};
use crate::llm::{map_bounded, ChatBackend, ChatExchange, LlmError};
use crate::prompting::{parse_candidate_labels, render_candidate_prompt, PromptError, PromptTemplate};
use crate::seed::{self, round_half_up, SeededRng};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no training example matches the test candidate set and alpha = 1")]
    EmptySelection,
    #[error("label `{0}` has no frequency entry")]
    MissingFrequency(String),
    #[error("alpha < 1 requires an embedding query for kNN retrieval")]
    MissingKnn,
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("lookup table is empty")]
    EmptyLookup,
    #[error("lookup file {path}: {message}")]
    LookupFile { path: String, message: String },
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

/// A training example with its Step-1 candidate set. An empty set marks a
/// failed Step-1 parse and never matches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupEntry {
    pub example: Example,
    pub candidates: CandidateSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn new(alpha: f64, n: usize, seed: u64) -> Result<Self, SelectionError> {
        let cfg = Self { alpha, n, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SelectionError::InvalidConfig(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if self.n == 0 {
            return Err(SelectionError::InvalidConfig("n must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of hard examples requested: `round(alpha * n)`, half up.
    pub fn hard_quota(&self) -> usize {
        round_half_up(self.alpha * self.n as f64).min(self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoSource {
    Hard,
    Knn,
    /// Uniform draw from the training pool (baseline or fallback).
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub example: Example,
    pub source: DemoSource,
}

/// Ordered demonstrations: hard examples (in sampled order) first, then kNN
/// examples (most similar first).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DemoSet {
    pub demos: Vec<Demo>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.demos.iter().map(|d| d.example.id.as_str()).collect()
    }

    pub fn ids_from(&self, source: DemoSource) -> Vec<&str> {
        self.demos
            .iter()
            .filter(|d| d.source == source)
            .map(|d| d.example.id.as_str())
            .collect()
    }
}

/// Run the candidate-assignment prompt for one text. A reply that cannot be
/// parsed yields the empty sentinel set; transport errors propagate.
pub fn assign_candidates<B: ChatBackend + ?Sized>(
    backend: &B,
    template: &PromptTemplate,
    text: &str,
    space: &LabelSpace,
) -> Result<CandidateSet, SelectionError> {
    let (system, user) = render_candidate_prompt(template, text, space)?;
    let exchange = backend.chat(ChatExchange::new(system, user))?;
    match parse_candidate_labels(&exchange.reply, space) {
        Ok(set) => Ok(set),
        Err(err) => {
            tracing::warn!(error = %err, reply = %exchange.reply, "unparseable candidate reply; using empty set");
            Ok(CandidateSet::empty(space.len()))
        }
    }
}

/// Step 1 over a training set: one entry per example, in dataset order.
pub fn build_lookup<B: ChatBackend + ?Sized>(
    train: &Dataset,
    backend: &B,
    template: &PromptTemplate,
    concurrency: usize,
) -> Result<Vec<LookupEntry>, SelectionError> {
    let space = train.space();
    let results = map_bounded(train.examples(), concurrency, |ex| {
        assign_candidates(backend, template, &ex.text, space).map(|candidates| {
            if candidates.is_empty() {
                tracing::warn!(id = %ex.id, "training example has no Step-1 candidates; excluded from matching");
            }
            LookupEntry {
                example: ex.clone(),
                candidates,
            }
        })
    });
    results.into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct LookupRecord {
    id: String,
    text: String,
    gold: String,
    candidates: Vec<String>,
}

/// Write the lookup table as JSON lines (`id`, `text`, `gold`, `candidates`).
pub fn save_lookup(path: impl AsRef<Path>, entries: &[LookupEntry], space: &LabelSpace) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for entry in entries {
        let record = LookupRecord {
            id: entry.example.id.clone(),
            text: entry.example.text.clone(),
            gold: entry.example.gold.clone(),
            candidates: entry
                .candidates
                .labels(space)
                .into_iter()
                .map(str::to_string)
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn load_lookup(path: impl AsRef<Path>, space: &LabelSpace) -> Result<Vec<LookupEntry>, SelectionError> {
    let path = path.as_ref();
    let err = |message: String| SelectionError::LookupFile {
        path: path.display().to_string(),
        message,
    };
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LookupRecord =
            serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        let gold = space.resolve(&rec.gold)?.to_string();
        entries.push(LookupEntry {
            candidates: candidate_set_from_labels(&rec.candidates, space)?,
            example: Example {
                id: rec.id,
                text: rec.text,
                gold,
            },
        });
    }
    Ok(entries)
}

/// Entries whose candidate set equals `test_candidates` exactly, in lookup
/// order. An empty test set matches nothing.
pub fn match_hard<'a>(lookup: &'a [LookupEntry], test_candidates: &CandidateSet) -> Vec<&'a LookupEntry> {
    if test_candidates.is_empty() {
        return Vec::new();
    }
    lookup
        .iter()
        .filter(|e| e.candidates == *test_candidates)
        .collect()
}

/// Draw `k` distinct indices sequentially: each draw picks index `i` with
/// probability `w_i / sum(remaining w)`, then removes it.
pub fn sequential_weighted_draw(weights: &[f64], k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(k.min(weights.len()));
    while picked.len() < k && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            acc += weights[i];
            if target < acc {
                chosen = pos;
                break;
            }
        }
        picked.push(remaining.remove(chosen));
    }
    picked
}

/// Normalised inverse-frequency weights `(1/rho(y_i)) / sum_j (1/rho(y_j))`.
pub fn normalized_weights(entries: &[&LookupEntry], rho: &LabelFrequency) -> Result<Vec<f64>, SelectionError> {
    let raw = entries
        .iter()
        .map(|e| {
            rho.weight(&e.example.gold)
                .ok_or_else(|| SelectionError::MissingFrequency(e.example.gold.clone()))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Keep `matched` as is when it has at most `k` entries; otherwise draw `k`
/// of them without replacement with inverse-label-frequency weights.
pub fn weighted_sample<'a>(
    matched: &[&'a LookupEntry],
    k: usize,
    rho: &LabelFrequency,
    seed: u64,
) -> Result<Vec<&'a LookupEntry>, SelectionError> {
    let weights = normalized_weights(matched, rho)?;
    if matched.len() <= k {
        return Ok(matched.to_vec());
    }
    let mut rng = seed::rng(seed);
    Ok(sequential_weighted_draw(&weights, k, &mut rng)
        .into_iter()
        .map(|i| matched[i])
        .collect())
}

/// Where the kNN query vector comes from.
#[derive(Debug, Clone, Copy)]
pub enum KnnQuery<'a> {
    /// An id present in the store (excluded from its own neighbours).
    Id(&'a EmbeddingStore, &'a str),
    /// A free-standing vector.
    Vector(&'a EmbeddingStore, &'a [f64]),
}

impl KnnQuery<'_> {
    pub fn retrieve(&self, k: usize, candidates: &[&str], exclude: &HashSet<&str>) -> Result<Vec<String>, KnnError> {
        match *self {
            KnnQuery::Id(store, id) => crate::knn::knn_retrieve(store, id, k, candidates, exclude),
            KnnQuery::Vector(store, v) => knn_by_vector(store, v, k, candidates, exclude),
        }
    }
}

/// Compose the demonstration set for one test example.
///
/// With `h = round(alpha * n)`, up to `h` hard examples are sampled from the
/// exact-match pool; when `alpha < 1`, kNN then fills the set up to `n`
/// (covering any hard shortfall) from the remaining training ids. At
/// `alpha = 1` no kNN is used and an empty pool is an error.
pub fn select_demos(
    lookup: &[LookupEntry],
    test_candidates: &CandidateSet,
    knn: Option<KnnQuery<'_>>,
    rho: &LabelFrequency,
    cfg: &SelectionConfig,
) -> Result<DemoSet, SelectionError> {
    cfg.validate()?;
    if lookup.is_empty() {
        return Err(SelectionError::EmptyLookup);
    }
    let quota = cfg.hard_quota();
    let matched = match_hard(lookup, test_candidates);
    let hard = if quota > 0 {
        weighted_sample(&matched, quota, rho, cfg.seed)?
    } else {
        Vec::new()
    };
    let mut demos: Vec<Demo> = hard
        .iter()
        .map(|e| Demo {
            example: e.example.clone(),
            source: DemoSource::Hard,
        })
        .collect();

    if cfg.alpha >= 1.0 {
        if demos.is_empty() {
            return Err(SelectionError::EmptySelection);
        }
        return Ok(DemoSet { demos });
    }

    let knn = knn.ok_or(SelectionError::MissingKnn)?;
    let exclude: HashSet<&str> = hard.iter().map(|e| e.example.id.as_str()).collect();
    let candidates: Vec<&str> = lookup.iter().map(|e| e.example.id.as_str()).collect();
    let wanted = cfg.n - demos.len();
    for id in knn.retrieve(wanted, &candidates, &exclude)? {
        let entry = lookup
            .iter()
            .find(|e| e.example.id == id)
            .expect("retrieved id comes from the lookup");
        demos.push(Demo {
            example: entry.example.clone(),
            source: DemoSource::Knn,
        });
    }
    Ok(DemoSet { demos })
}
