//! Prediction loop, F1 scoring and the experiment grid runner.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, LabelFrequency};
use crate::knn::EmbeddingStore;
use crate::labels::{Example, LabelSpace};
use crate::llm::{map_bounded, ChatBackend, ChatExchange, LlmError};
use crate::prompting::{parse_single_label, render_final_prompt, DemoBlock, PromptTemplate, RETRY_REMINDER};
use crate::seed::{derive_seed, rng};
use crate::selection::{
    assign_candidates, select_demos, Demo, DemoSet, DemoSource, KnnQuery, LookupEntry, SelectionConfig,
    SelectionError,
};

/// Prediction recorded when the reply could not be parsed after the retry.
/// Labels are canonicalised to lower case, so this never collides with one.
pub const INVALID: &str = "INVALID";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction pairs to score")]
    EmptyInput,
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("records file line {line}: {source}")]
    Records { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl EvalError {
    /// True for failures of the model endpoint rather than of the inputs.
    pub fn is_backend(&self) -> bool {
        matches!(self, EvalError::Llm(_) | EvalError::Selection(SelectionError::Llm(_)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    #[default]
    Macro,
    /// Per-class F1 weighted by gold support.
    Weighted,
}

/// Per-class F1 from a confusion count, 0 when the class never occurs.
fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 over `(gold, predicted)` pairs; `None` predictions are INVALID and
/// count as wrong for every class.
pub fn f1_score(pairs: &[(&str, Option<&str>)], space: &LabelSpace, average: Average) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let c = space.len();
    let (mut tp, mut fp, mut fn_, mut support) = (vec![0; c], vec![0; c], vec![0; c], vec![0; c]);
    let index = |l: &str| space.index_of(l).ok_or_else(|| EvalError::UnknownLabel(l.to_string()));
    for &(gold, pred) in pairs {
        let g = index(gold)?;
        support[g] += 1;
        match pred.map(index).transpose()? {
            Some(p) if p == g => tp[g] += 1,
            Some(p) => {
                fp[p] += 1;
                fn_[g] += 1;
            }
            None => fn_[g] += 1,
        }
    }
    let f1: Vec<f64> = (0..c).map(|i| class_f1(tp[i], fp[i], fn_[i])).collect();
    Ok(match average {
        Average::Macro => f1.iter().sum::<f64>() / c as f64,
        Average::Weighted => {
            let total: usize = support.iter().sum();
            f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64
        }
    })
}

pub fn macro_f1(pairs: &[(&str, Option<&str>)], space: &LabelSpace) -> Result<f64, EvalError> {
    f1_score(pairs, space, Average::Macro)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Random,
    Knn,
    #[serde(rename = "marginsel")]
    MarginSel { alpha: f64 },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Random => f.write_str("random"),
            Method::Knn => f.write_str("knn"),
            Method::MarginSel { alpha } => write!(f, "marginsel(alpha={alpha})"),
        }
    }
}

/// What to do when marginsel at alpha = 1 finds no matching training example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    Knn,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub fallback: Fallback,
    pub average: Average,
    /// Test examples predicted in parallel within a cell.
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Random, Method::Knn, Method::MarginSel { alpha: 0.9 }],
            shots: vec![2, 4, 6, 8, 10],
            seeds: vec![1, 2, 3],
            fallback: Fallback::Knn,
            average: Average::Macro,
            concurrency: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods must be non-empty");
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return bad("shots must be non-empty and positive");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        for m in &self.methods {
            if let Method::MarginSel { alpha } = m {
                if !(0.0..=1.0).contains(alpha) {
                    return bad("alpha must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

/// Everything a prediction needs besides the method and seed.
pub struct EvalContext<'a, B: ?Sized> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    /// Step-1 lookup over `train`; required by marginsel.
    pub lookup: Option<&'a [LookupEntry]>,
    /// Must hold train and test ids; required by knn and alpha < 1.
    pub embeddings: Option<&'a EmbeddingStore>,
    pub rho: &'a LabelFrequency,
    pub backend: &'a B,
    pub candidate_template: &'a PromptTemplate,
    pub final_template: &'a PromptTemplate,
    pub fallback: Fallback,
}

/// Provenance of one test prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub method: String,
    pub shots: usize,
    pub seed: u64,
    pub id: String,
    pub gold: String,
    /// A label, or [`INVALID`].
    pub predicted: String,
    pub demo_ids: Vec<String>,
    pub demo_sources: Vec<DemoSource>,
    /// Test example's Step-1 key (marginsel only).
    pub step1_candidates: Option<String>,
    pub fallback: bool,
    pub retried: bool,
}

impl PredictionRecord {
    pub fn prediction(&self) -> Option<&str> {
        (self.predicted != INVALID).then_some(self.predicted.as_str())
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == self.gold
    }

    fn key(&self) -> (String, usize, u64, String) {
        (self.method.clone(), self.shots, self.seed, self.id.clone())
    }
}

fn random_demos(train: &Dataset, n: usize, seed: u64) -> DemoSet {
    let mut r = rng(seed);
    let pool = train.examples();
    let picked = rand::seq::index::sample(&mut r, pool.len(), n.min(pool.len()));
    DemoSet {
        demos: picked
            .into_iter()
            .map(|i| Demo {
                example: pool[i].clone(),
                source: DemoSource::Random,
            })
            .collect(),
    }
}

fn knn_demos<B: ?Sized>(ctx: &EvalContext<'_, B>, test: &Example, n: usize) -> Result<DemoSet, EvalError> {
    let store = ctx.embeddings.ok_or(SelectionError::MissingKnn)?;
    let ids: Vec<&str> = ctx.train.ids().collect();
    let found = KnnQuery::Id(store, &test.id)
        .retrieve(n, &ids, &HashSet::new())
        .map_err(SelectionError::from)?;
    Ok(DemoSet {
        demos: found
            .iter()
            .map(|id| Demo {
                example: ctx.train.get(id).expect("retrieved from train ids").clone(),
                source: DemoSource::Knn,
            })
            .collect(),
    })
}

/// Per-example seed so cells are reproducible regardless of execution order.
pub fn example_seed(seed: u64, shots: usize, id: &str) -> u64 {
    derive_seed(seed, &format!("{shots}:{id}"))
}

/// Predict one test example: select demonstrations for `method`, render the
/// few-shot prompt and parse a single label, retrying once with a reminder.
pub fn predict_one<B: ChatBackend + ?Sized>(
    ctx: &EvalContext<'_, B>,
    test: &Example,
    method: Method,
    shots: usize,
    seed: u64,
) -> Result<PredictionRecord, EvalError> {
    let space = ctx.train.space();
    let local_seed = example_seed(seed, shots, &test.id);
    let mut step1 = None;
    let mut fallback = false;
    let demos = match method {
        Method::Random => random_demos(ctx.train, shots, local_seed),
        Method::Knn => knn_demos(ctx, test, shots)?,
        Method::MarginSel { alpha } => {
            let lookup = ctx.lookup.ok_or(SelectionError::EmptyLookup)?;
            let cands = assign_candidates(ctx.backend, ctx.candidate_template, &test.text, space)?;
            step1 = Some(cands.key());
            let cfg = SelectionConfig::new(alpha, shots, local_seed)?;
            let knn = ctx.embeddings.map(|s| KnnQuery::Id(s, &test.id));
            match select_demos(lookup, &cands, knn, ctx.rho, &cfg) {
                Ok(set) => set,
                Err(SelectionError::EmptySelection) => {
                    fallback = true;
                    tracing::debug!(id = %test.id, "empty hard pool; falling back to {:?}", ctx.fallback);
                    match ctx.fallback {
                        Fallback::Knn => knn_demos(ctx, test, shots)?,
                        Fallback::Random => random_demos(ctx.train, shots, local_seed),
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    };

    let block = DemoBlock::new(demos.demos.iter().map(|d| (d.example.text.as_str(), d.example.gold.as_str())));
    let (system, user) = render_final_prompt(ctx.final_template, &block, &test.text, space)
        .map_err(SelectionError::from)?;
    let reply = ctx.backend.chat(ChatExchange::new(system.clone(), user.clone()))?;
    let mut retried = false;
    let predicted = match parse_single_label(&reply.reply, space) {
        Ok(label) => label,
        Err(err) => {
            retried = true;
            tracing::debug!(id = %test.id, error = %err, "unparseable prediction; retrying once");
            let again = ctx.backend.chat(ChatExchange::new(system, format!("{user}{RETRY_REMINDER}")))?;
            parse_single_label(&again.reply, space).unwrap_or_else(|_| INVALID.to_string())
        }
    };

    Ok(PredictionRecord {
        method: method.to_string(),
        shots,
        seed,
        id: test.id.clone(),
        gold: test.gold.clone(),
        predicted,
        demo_ids: demos.demos.iter().map(|d| d.example.id.clone()).collect(),
        demo_sources: demos.demos.iter().map(|d| d.source).collect(),
        step1_candidates: step1,
        fallback,
        retried,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub shots: usize,
    pub seed: u64,
    /// Absent when the cell failed.
    pub f1: Option<f64>,
    pub records: usize,
    pub invalid: usize,
    pub fallbacks: usize,
    pub error: Option<String>,
    /// The failure came from the model endpoint.
    #[serde(default)]
    pub backend_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub shots: usize,
    pub seeds: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation over seeds; absent below two seeds.
    pub stdev: Option<f64>,
    /// Two-sided paired t-test against random on the same shots and seeds.
    pub p_value_vs_random: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub average: Average,
    pub cells: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
    pub records: Vec<PredictionRecord>,
}

impl RunReport {
    pub fn cell(&self, method: &str, shots: usize, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.shots == shots && c.seed == seed)
    }

    pub fn summary_for(&self, method: &str, shots: usize) -> Option<&CellSummary> {
        self.summary.iter().find(|s| s.method == method && s.shots == shots)
    }

    /// `method,shots,seed,f1` rows; failed cells leave the score empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,shots,seed,macro_f1\n");
        for c in &self.cells {
            let f1 = c.f1.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("\"{}\",{},{},{}\n", c.method, c.shots, c.seed, f1));
        }
        out
    }

    /// Write `report.json` and `results.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(dir.join("results.csv"), self.to_csv())?;
        Ok(())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_stdev(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Two-sided paired t-test p-value; `None` with fewer than two pairs.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diffs);
    let sd = sample_stdev(&diffs)?;
    if sd == 0.0 {
        return Some(if m == 0.0 { 1.0 } else { 0.0 });
    }
    let n = diffs.len() as f64;
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).ok()?;
    Some(2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Load append-only prediction records. A truncated final line from an
/// interrupted run is skipped.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, EvalError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() => {
                tracing::warn!(line = i + 1, error = %e, "skipping truncated trailing record");
            }
            Err(source) => return Err(EvalError::Records { line: i + 1, source }),
        }
    }
    Ok(out)
}

/// Cut a partial last line left by an interrupted writer so appends start
/// on a fresh line.
fn drop_torn_tail(path: &Path) -> std::io::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let bytes = fs::read(path)?;
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

/// Run the method x shots x seeds grid. With `records_path`, predictions
/// already present there are reused and new ones appended, so an
/// interrupted run resumes without repeating backend calls.
pub fn run_experiment<B: ChatBackend + ?Sized>(
    ctx: &EvalContext<'_, B>,
    cfg: &RunConfig,
    records_path: Option<&Path>,
) -> Result<RunReport, EvalError> {
    cfg.validate()?;
    let space = ctx.train.space();
    let mut known: HashMap<(String, usize, u64, String), PredictionRecord> = HashMap::new();
    if let Some(path) = records_path {
        for r in load_records(path)? {
            known.insert(r.key(), r);
        }
    }
    let mut sink = match records_path {
        Some(path) => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            drop_torn_tail(path)?;
            Some(OpenOptions::new().create(true).append(true).open(path)?)
        }
        None => None,
    };

    let mut cells = Vec::new();
    let mut all_records = Vec::new();
    for &method in &cfg.methods {
        for &shots in &cfg.shots {
            for &seed in &cfg.seeds {
                let name = method.to_string();
                let todo: Vec<&Example> = ctx
                    .test
                    .examples()
                    .iter()
                    .filter(|ex| !known.contains_key(&(name.clone(), shots, seed, ex.id.clone())))
                    .collect();
                let fresh = map_bounded(&todo, cfg.concurrency, |ex| predict_one(ctx, ex, method, shots, seed));
                let mut error = None;
                let mut backend_error = false;
                for result in fresh {
                    match result {
                        Ok(r) => {
                            if let Some(f) = sink.as_mut() {
                                writeln!(f, "{}", serde_json::to_string(&r)?)?;
                            }
                            known.insert(r.key(), r);
                        }
                        Err(e) => {
                            if error.is_none() {
                                backend_error = e.is_backend();
                                error = Some(e.to_string());
                            }
                        }
                    }
                }
                if let Some(f) = sink.as_mut() {
                    f.flush()?;
                }
                let records: Vec<PredictionRecord> = ctx
                    .test
                    .examples()
                    .iter()
                    .filter_map(|ex| known.get(&(name.clone(), shots, seed, ex.id.clone())).cloned())
                    .collect();
                let f1 = if error.is_none() {
                    let pairs: Vec<(&str, Option<&str>)> =
                        records.iter().map(|r| (r.gold.as_str(), r.prediction())).collect();
                    Some(f1_score(&pairs, space, cfg.average)?)
                } else {
                    None
                };
                if let Some(e) = &error {
                    tracing::warn!(method = %name, shots, seed, error = %e, "cell failed");
                } else {
                    tracing::info!(method = %name, shots, seed, f1 = f1.unwrap_or_default(), "cell done");
                }
                cells.push(CellResult {
                    method: name,
                    shots,
                    seed,
                    f1,
                    records: records.len(),
                    invalid: records.iter().filter(|r| r.prediction().is_none()).count(),
                    fallbacks: records.iter().filter(|r| r.fallback).count(),
                    error,
                    backend_error,
                });
                all_records.extend(records);
            }
        }
    }
    Ok(RunReport {
        average: cfg.average,
        summary: summarize(&cells, cfg),
        cells,
        records: all_records,
    })
}

fn summarize(cells: &[CellResult], cfg: &RunConfig) -> Vec<CellSummary> {
    let scores = |method: &str, shots: usize| -> Option<Vec<f64>> {
        cfg.seeds
            .iter()
            .map(|&s| {
                cells
                    .iter()
                    .find(|c| c.method == method && c.shots == shots && c.seed == s)
                    .and_then(|c| c.f1)
            })
            .collect()
    };
    let mut out = Vec::new();
    for method in &cfg.methods {
        let name = method.to_string();
        for &shots in &cfg.shots {
            let mine = scores(&name, shots);
            let p = match (&mine, *method) {
                (Some(a), m) if m != Method::Random => {
                    scores("random", shots).and_then(|b| paired_t_test(a, &b))
                }
                _ => None,
            };
            out.push(CellSummary {
                method: name.clone(),
                shots,
                seeds: cfg.seeds.len(),
                mean: mine.as_deref().map(mean),
                stdev: mine.as_deref().and_then(sample_stdev),
                p_value_vs_random: p,
                significant: p.is_some_and(|p| p < 0.05),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub shots: usize,
    pub mean_f1: Option<f64>,
    pub stdev: Option<f64>,
}

/// One marginsel run per alpha over the configured shots and seeds.
pub fn alpha_sweep<B: ChatBackend + ?Sized>(
    ctx: &EvalContext<'_, B>,
    cfg: &RunConfig,
    alphas: &[f64],
    records_path: Option<&Path>,
) -> Result<(Vec<SweepRow>, Vec<RunReport>), EvalError> {
    if alphas.is_empty() {
        return Err(EvalError::InvalidConfig("alphas must be non-empty".into()));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &alpha in alphas {
        let run = RunConfig {
            methods: vec![Method::MarginSel { alpha }],
            ..cfg.clone()
        };
        let report = run_experiment(ctx, &run, records_path)?;
        for s in &report.summary {
            rows.push(SweepRow {
                alpha,
                shots: s.shots,
                mean_f1: s.mean,
                stdev: s.stdev,
            });
        }
        reports.push(report);
    }
    Ok((rows, reports))
}

/// Sweep table as CSV (`alpha,shots,mean_f1,stdev`).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("alpha,shots,mean_f1,stdev\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.alpha, r.shots, opt(r.mean_f1), opt(r.stdev)));
    }
    out
}

/// Per-class counts over a set of records, keyed by label.
pub fn prediction_counts(records: &[PredictionRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.predicted.clone()).or_insert(0) += 1;
    }
    out
}
