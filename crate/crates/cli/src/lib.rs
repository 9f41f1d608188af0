//! Command-line driver: config loading, backend construction and one function
//! per subcommand. The binary in `main.rs` only parses arguments and maps
//! [`CliError`] to exit codes.

pub mod config;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use marginsel::analysis::{self, histogram_csv, recall_csv, Step1Record};
use marginsel::dataset::DatasetError;
use marginsel::eval::{self, example_seed, EvalError, Method, RunReport};
use marginsel::knn::{load_embeddings, EmbeddingStore};
use marginsel::llm::{LlmError, MockBackend, MockRule};
use marginsel::selection::{self, assign_candidates, KnnQuery, LookupEntry, SelectionError};
use marginsel::{
    label_frequency, load_dataset, stratified_split, theory_check, CachedBackend, ChatBackend, ChatExchange,
    Dataset, DemoSource, EvalContext, Example, HttpBackend, LabelFrequency, PromptTemplate, SelectionConfig,
};

pub use config::Config;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0:#}")]
    Config(anyhow::Error),
    #[error("backend error: {0:#}")]
    Backend(anyhow::Error),
    #[error("{0}")]
    EmptySelection(String),
    #[error("{0:#}")]
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::EmptySelection(_) => 4,
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

fn other(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Other(e.into())
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Config(_) | LlmError::AuthMissing(_) => CliError::Config(e.into()),
            _ => CliError::Backend(e.into()),
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Llm(l) => l.into(),
            SelectionError::EmptySelection => CliError::EmptySelection(
                "no training example shares the test example's candidate set at alpha = 1; \
                 lower alpha, or rely on run.fallback (knn or random) during eval"
                    .into(),
            ),
            SelectionError::MissingKnn | SelectionError::InvalidConfig(_) | SelectionError::LookupFile { .. } => {
                CliError::Config(e.into())
            }
            other => CliError::Other(other.into()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Llm(l) => l.into(),
            EvalError::Selection(s) => s.into(),
            EvalError::InvalidConfig(_) => CliError::Config(e.into()),
            other => CliError::Other(other.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "marginsel", version, about = "Max-margin demonstration selection for few-shot classification")]
pub struct Cli {
    /// TOML config file.
    #[arg(short, long, global = true, default_value = "marginsel.toml")]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set run.shots=[2,4]`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Random,
    Knn,
    Marginsel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assign zero-shot candidate labels to the training set and write the lookup table.
    Assign,
    /// Print the demonstration set chosen for one test example.
    Select {
        /// Test (or training) example id.
        #[arg(long, conflicts_with = "text", required_unless_present = "text")]
        id: Option<String>,
        /// Free text; kNN then needs an HTTP embedding endpoint.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Demonstration count (defaults to the first `run.shots`).
        #[arg(short)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict one test example and print its provenance record.
    Predict {
        #[arg(long)]
        id: String,
        #[arg(long, value_enum, default_value = "marginsel")]
        method: MethodArg,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the method x shots x seeds grid and write the report.
    Eval,
    /// Run marginsel for every alpha in `sweep.alphas`.
    Sweep,
    /// Centroid distances, candidate histogram and Step-1 recall.
    Analyze,
    /// Numerically check the attention identities and the margin solver.
    TheoryCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        margin_instances: Option<usize>,
    },
}

/// Backend call accounting for one command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    /// Requests that reached the model (cache misses).
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Uncached backend that still counts requests.
pub struct Counting {
    inner: Box<dyn ChatBackend>,
    calls: AtomicUsize,
}

impl ChatBackend for Counting {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    fn chat(&self, exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(exchange)
    }
}

/// The configured backend, optionally behind the response cache.
pub enum Engine {
    Cached(CachedBackend<Box<dyn ChatBackend>>),
    Direct(Counting),
}

impl Engine {
    pub fn stats(&self) -> Stats {
        match self {
            Engine::Cached(c) => Stats {
                backend_calls: c.backend_calls(),
                cache_hits: c.cache_hits(),
            },
            Engine::Direct(d) => Stats {
                backend_calls: d.calls.load(Ordering::SeqCst),
                cache_hits: 0,
            },
        }
    }
}

impl ChatBackend for Engine {
    fn model_name(&self) -> &str {
        match self {
            Engine::Cached(c) => c.model_name(),
            Engine::Direct(d) => d.model_name(),
        }
    }

    fn temperature(&self) -> f64 {
        match self {
            Engine::Cached(c) => c.temperature(),
            Engine::Direct(d) => d.temperature(),
        }
    }

    fn chat(&self, exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        match self {
            Engine::Cached(c) => c.chat(exchange),
            Engine::Direct(d) => d.chat(exchange),
        }
    }
}

/// Everything loaded from the config that the subcommands share.
pub struct Workspace {
    pub cfg: Config,
    pub train: Dataset,
    pub test: Dataset,
    pub rho: LabelFrequency,
    pub candidate: PromptTemplate,
    pub final_prediction: PromptTemplate,
    pub engine: Engine,
}

pub fn build_engine(cfg: &Config, candidate: &PromptTemplate, final_prediction: &PromptTemplate) -> Result<Engine, CliError> {
    let space = cfg.label_space().map_err(config_err)?;
    let inner: Box<dyn ChatBackend> = match cfg.backend.kind {
        config::BackendKind::Mock => {
            let m = cfg.backend.mock.as_ref().expect("validated");
            let rule = MockRule::new(m.rules.clone(), &m.default, &space).map_err(config_err)?;
            Box::new(
                MockBackend::new(rule, space)
                    .map_err(config_err)?
                    .with_templates(candidate.clone(), final_prediction.clone())
                    .with_predictor(m.predictor),
            )
        }
        config::BackendKind::Http => Box::new(HttpBackend::new(cfg.backend.http.clone())?),
    };
    if cfg.backend.cache_dir.as_os_str().is_empty() {
        return Ok(Engine::Direct(Counting {
            inner,
            calls: AtomicUsize::new(0),
        }));
    }
    Ok(Engine::Cached(CachedBackend::new(inner, cfg.resolve(&cfg.backend.cache_dir))?))
}

fn load_data(cfg: &Config) -> Result<(Dataset, Dataset), CliError> {
    let space = cfg.label_space().map_err(config_err)?;
    let load = |p: &Path| -> Result<Dataset, CliError> {
        let path = cfg.resolve(p);
        load_dataset(&path, &space)
            .with_context(|| format!("dataset {}", path.display()))
            .map_err(config_err)
    };
    let d = &cfg.dataset;
    match (&d.train, &d.test, &d.path) {
        (Some(train), Some(test), _) => Ok((load(train)?, load(test)?)),
        (_, _, Some(all)) => {
            let all = load(all)?;
            stratified_split(&all, d.test_fraction, d.split_seed)
                .context("splitting dataset")
                .map_err(config_err)
        }
        _ => unreachable!("validated dataset section"),
    }
}

impl Workspace {
    pub fn open(cfg: Config) -> Result<Self, CliError> {
        let (candidate, final_prediction) = cfg.templates().map_err(config_err)?;
        let (train, test) = load_data(&cfg)?;
        let rho = label_frequency(&train)
            .map_err(|e: DatasetError| config_err(anyhow!(e).context("training label frequencies")))?;
        let engine = build_engine(&cfg, &candidate, &final_prediction)?;
        Ok(Self {
            cfg,
            train,
            test,
            rho,
            candidate,
            final_prediction,
            engine,
        })
    }

    fn lookup_path(&self) -> PathBuf {
        self.cfg.resolve(&self.cfg.lookup.path)
    }

    pub fn load_lookup(&self) -> Result<Vec<LookupEntry>, CliError> {
        let path = self.lookup_path();
        if !path.exists() {
            return Err(config_err(anyhow!(
                "lookup table {} not found; run `marginsel assign` first",
                path.display()
            )));
        }
        selection::load_lookup(&path, self.train.space())
            .with_context(|| format!("lookup table {}", path.display()))
            .map_err(config_err)
    }

    pub fn embeddings(&self) -> Result<Option<EmbeddingStore>, CliError> {
        match &self.cfg.embeddings {
            None => Ok(None),
            Some(e) => {
                let path = self.cfg.resolve(&e.path);
                load_embeddings(&path)
                    .with_context(|| format!("embeddings {}", path.display()))
                    .map(Some)
                    .map_err(config_err)
            }
        }
    }

    fn find_example(&self, id: &str) -> Result<&Example, CliError> {
        self.test
            .get(id)
            .or_else(|| self.train.get(id))
            .ok_or_else(|| config_err(anyhow!("no example with id {id:?} in the test or training set")))
    }

    fn context<'a>(
        &'a self,
        lookup: Option<&'a [LookupEntry]>,
        embeddings: Option<&'a EmbeddingStore>,
    ) -> EvalContext<'a, Engine> {
        EvalContext {
            train: &self.train,
            test: &self.test,
            lookup,
            embeddings,
            rho: &self.rho,
            backend: &self.engine,
            candidate_template: &self.candidate,
            final_template: &self.final_prediction,
            fallback: self.cfg.run.fallback,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(other)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(other)
}

fn pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Parse args, load the config and run one subcommand, writing
/// human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Stats, CliError> {
    if let Command::TheoryCheck {
        seed,
        instances,
        margin_instances,
    } = &cli.command
    {
        // the theory check needs no dataset, so a missing config is fine
        let (theory, output) = if cli.config.exists() {
            let cfg = Config::load(&cli.config, &cli.overrides).map_err(config_err)?;
            let output = cfg.resolve(&cfg.theory.output);
            (cfg.theory, output)
        } else {
            let t = config::TheorySection::default();
            let output = t.output.clone();
            (t, output)
        };
        cmd_theory_check(&theory, &output, *seed, *instances, *margin_instances, out)?;
        return Ok(Stats::default());
    }
    let cfg = Config::load(&cli.config, &cli.overrides).map_err(config_err)?;
    let ws = Workspace::open(cfg)?;
    match &cli.command {
        Command::Assign => cmd_assign(&ws, out)?,
        Command::Select {
            id,
            text,
            alpha,
            n,
            seed,
        } => cmd_select(&ws, id.as_deref(), text.as_deref(), *alpha, *n, *seed, out)?,
        Command::Predict {
            id,
            method,
            alpha,
            shots,
            seed,
        } => cmd_predict(&ws, id, *method, *alpha, *shots, *seed, out)?,
        Command::Eval => cmd_eval(&ws, out)?,
        Command::Sweep => cmd_sweep(&ws, out)?,
        Command::Analyze => cmd_analyze(&ws, out)?,
        Command::TheoryCheck { .. } => unreachable!("handled above"),
    }
    let stats = ws.engine.stats();
    writeln!(out, "{} new calls ({} cached)", stats.backend_calls, stats.cache_hits).map_err(other)?;
    Ok(stats)
}

pub fn cmd_assign(ws: &Workspace, out: &mut dyn Write) -> Result<(), CliError> {
    let concurrency = ws.cfg.run.concurrency.unwrap_or(ws.cfg.backend.http.concurrency);
    let lookup = selection::build_lookup(&ws.train, &ws.engine, &ws.candidate, concurrency)?;
    let path = ws.lookup_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(other)?;
    }
    selection::save_lookup(&path, &lookup, ws.train.space()).map_err(other)?;
    let hist = analysis::candidate_histogram(lookup.iter().map(|e| &e.candidates)).map_err(other)?;
    writeln!(out, "lookup: {} ({} entries)", path.display(), lookup.len()).map_err(other)?;
    writeln!(out, "candidate-set sizes:").map_err(other)?;
    for (k, f) in &hist {
        writeln!(out, "  {k}: {:.4}", f).map_err(other)?;
    }
    Ok(())
}

pub fn cmd_select(
    ws: &Workspace,
    id: Option<&str>,
    text: Option<&str>,
    alpha: Option<f64>,
    n: Option<usize>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let lookup = ws.load_lookup()?;
    let alpha = alpha.unwrap_or(ws.cfg.run.alpha);
    let n = n.unwrap_or(ws.cfg.run.shots[0]);
    let seed = seed.unwrap_or(ws.cfg.run.seeds[0]);
    let (label, input) = match (id, text) {
        (Some(id), _) => (id.to_string(), ws.find_example(id)?.text.clone()),
        (None, Some(t)) => ("text".to_string(), t.to_string()),
        (None, None) => return Err(config_err(anyhow!("give --id or --text"))),
    };
    let space = ws.train.space();
    let candidates = assign_candidates(&ws.engine, &ws.candidate, &input, space)?;
    let cfg = SelectionConfig::new(alpha, n, example_seed(seed, n, &label))?;

    let store = if alpha < 1.0 { ws.embeddings()? } else { None };
    let query_vec;
    let knn = match (&store, id) {
        (Some(s), Some(id)) => Some(KnnQuery::Id(s, id)),
        (Some(s), None) => {
            let http = match ws.cfg.backend.kind {
                config::BackendKind::Http => HttpBackend::new(ws.cfg.backend.http.clone())?,
                config::BackendKind::Mock => {
                    return Err(config_err(anyhow!(
                        "kNN for --text needs an HTTP embedding endpoint; use --id or alpha = 1"
                    )))
                }
            };
            query_vec = http.embed(&input)?;
            Some(KnnQuery::Vector(s, &query_vec))
        }
        (None, _) => None,
    };
    let set = selection::select_demos(&lookup, &candidates, knn, &ws.rho, &cfg)?;
    let demos: Vec<_> = set
        .demos
        .iter()
        .map(|d| json!({ "id": d.example.id, "label": d.example.gold, "source": d.source }))
        .collect();
    let report = json!({
        "id": id,
        "key": candidates.key(),
        "alpha": alpha,
        "n": n,
        "seed": seed,
        "hard": set.ids_from(DemoSource::Hard).len(),
        "knn": set.ids_from(DemoSource::Knn).len(),
        "demos": demos,
    });
    write!(out, "{}", pretty(&report)).map_err(other)?;
    Ok(())
}

pub fn cmd_predict(
    ws: &Workspace,
    id: &str,
    method: MethodArg,
    alpha: Option<f64>,
    shots: Option<usize>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let method = match method {
        MethodArg::Random => Method::Random,
        MethodArg::Knn => Method::Knn,
        MethodArg::Marginsel => Method::MarginSel {
            alpha: alpha.unwrap_or(ws.cfg.run.alpha),
        },
    };
    let lookup = match method {
        Method::MarginSel { .. } => Some(ws.load_lookup()?),
        _ => None,
    };
    let store = ws.embeddings()?;
    let ctx = ws.context(lookup.as_deref(), store.as_ref());
    let example = ws.find_example(id)?.clone();
    let record = eval::predict_one(
        &ctx,
        &example,
        method,
        shots.unwrap_or(ws.cfg.run.shots[0]),
        seed.unwrap_or(ws.cfg.run.seeds[0]),
    )?;
    write!(out, "{}", pretty(&record)).map_err(other)?;
    Ok(())
}

fn needs_lookup(methods: &[Method]) -> bool {
    methods.iter().any(|m| matches!(m, Method::MarginSel { .. }))
}

fn required_embeddings(ws: &Workspace, needed: bool) -> Result<Option<EmbeddingStore>, CliError> {
    let store = ws.embeddings()?;
    if needed && store.is_none() {
        return Err(config_err(anyhow!(
            "the configured methods need kNN; add an [embeddings] section"
        )));
    }
    Ok(store)
}

fn report_dir(ws: &Workspace) -> PathBuf {
    ws.cfg.resolve(&ws.cfg.run.output_dir)
}

fn print_summary(report: &RunReport, out: &mut dyn Write) -> Result<(), CliError> {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for s in &report.summary {
        writeln!(
            out,
            "{:<24} shots={:<3} mean={} sd={} p_vs_random={}{}",
            s.method,
            s.shots,
            fmt(s.mean),
            fmt(s.stdev),
            fmt(s.p_value_vs_random),
            if s.significant { " *" } else { "" }
        )
        .map_err(other)?;
    }
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        writeln!(out, "FAILED {} shots={} seed={}: {}", c.method, c.shots, c.seed, c.error.as_deref().unwrap_or(""))
            .map_err(other)?;
    }
    Ok(())
}

pub fn cmd_eval(ws: &Workspace, out: &mut dyn Write) -> Result<(), CliError> {
    let rc = ws.cfg.run_config(&[]).map_err(config_err)?;
    let lookup = if needs_lookup(&rc.methods) { Some(ws.load_lookup()?) } else { None };
    let store = required_embeddings(ws, ws.cfg.needs_embeddings())?;
    let ctx = ws.context(lookup.as_deref(), store.as_ref());
    let dir = report_dir(ws);
    let report = eval::run_experiment(&ctx, &rc, Some(&dir.join("records.jsonl")))?;
    report.write(&dir)?;
    writeln!(out, "report: {}", dir.join("report.json").display()).map_err(other)?;
    print_summary(&report, out)?;
    // backend trouble sets the exit code; scores never fail a run
    if let Some(failed) = report.cells.iter().find(|c| c.backend_error) {
        return Err(CliError::Backend(anyhow!(failed.error.clone().unwrap_or_default())));
    }
    Ok(())
}

pub fn cmd_sweep(ws: &Workspace, out: &mut dyn Write) -> Result<(), CliError> {
    let rc = ws.cfg.run_config(&[]).map_err(config_err)?;
    let alphas = &ws.cfg.sweep.alphas;
    let lookup = ws.load_lookup()?;
    let knn_needed = alphas.iter().any(|&a| a < 1.0) || ws.cfg.run.fallback == eval::Fallback::Knn;
    let store = required_embeddings(ws, knn_needed)?;
    let ctx = ws.context(Some(&lookup), store.as_ref());
    let dir = ws.cfg.resolve(&ws.cfg.sweep.output_dir);
    let (rows, _) = eval::alpha_sweep(&ctx, &rc, alphas, Some(&dir.join("records.jsonl")))?;
    write_file(&dir.join("sweep.json"), &pretty(&rows))?;
    write_file(&dir.join("sweep.csv"), &eval::sweep_csv(&rows))?;
    writeln!(out, "sweep: {}", dir.join("sweep.csv").display()).map_err(other)?;
    for r in &rows {
        let mean = r.mean_f1.map_or("-".into(), |m| format!("{m:.4}"));
        writeln!(out, "alpha={:<5} shots={:<3} mean={}", r.alpha, r.shots, mean).map_err(other)?;
    }
    Ok(())
}

pub fn cmd_analyze(ws: &Workspace, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = ws.cfg.resolve(&ws.cfg.analysis.output_dir);
    let space = ws.train.space();

    let lookup = ws.load_lookup()?;
    let hist = analysis::candidate_histogram(lookup.iter().map(|e| &e.candidates)).map_err(other)?;
    write_file(&dir.join("histogram.json"), &pretty(&hist))?;
    write_file(&dir.join("histogram.csv"), &histogram_csv(&hist))?;
    writeln!(out, "histogram: {}", dir.join("histogram.json").display()).map_err(other)?;

    let report_path = report_dir(ws).join("report.json");
    if report_path.exists() {
        let text = fs::read_to_string(&report_path).map_err(other)?;
        let report: RunReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", report_path.display()))
            .map_err(other)?;
        let records: Vec<Step1Record> = report
            .records
            .iter()
            .filter_map(|r| Step1Record::from_prediction(r, space))
            .collect();
        let recall = analysis::step1_recall(&records, space).map_err(other)?;
        write_file(&dir.join("recall.json"), &pretty(&recall))?;
        write_file(&dir.join("recall.csv"), &recall_csv(&recall))?;
        writeln!(out, "step-1 recall: {} ({} records)", dir.join("recall.json").display(), records.len())
            .map_err(other)?;
    } else {
        writeln!(out, "no run report at {}; skipping step-1 recall", report_path.display()).map_err(other)?;
    }

    let vectors = match &ws.cfg.analysis.vectors {
        Some(p) => {
            let path = ws.cfg.resolve(p);
            Some(
                load_embeddings(&path)
                    .with_context(|| format!("vectors {}", path.display()))
                    .map_err(config_err)?,
            )
        }
        None => ws.embeddings()?,
    };
    match vectors {
        Some(store) => {
            let mut seen = HashSet::new();
            let golds: Vec<(&str, &str)> = ws
                .train
                .examples()
                .iter()
                .chain(ws.test.examples())
                .filter(|e| store.contains(&e.id) && seen.insert(e.id.as_str()))
                .map(|e| (e.id.as_str(), e.gold.as_str()))
                .collect();
            let matrix = analysis::centroid_distances(&store, golds.iter().copied(), space, ws.cfg.analysis.metric)
                .map_err(other)?;
            write_file(&dir.join("centroids.json"), &pretty(&matrix))?;
            write_file(&dir.join("centroids.csv"), &matrix.to_csv())?;
            analysis::dump_projection_input(&store, golds.iter().copied(), dir.join("projection.jsonl"))
                .map_err(other)?;
            writeln!(out, "centroids: {}", dir.join("centroids.json").display()).map_err(other)?;
        }
        None => writeln!(out, "no vectors configured; skipping centroid distances").map_err(other)?,
    }
    Ok(())
}

pub fn cmd_theory_check(
    t: &config::TheorySection,
    path: &Path,
    seed: Option<u64>,
    instances: Option<usize>,
    margin_instances: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let report = theory_check(
        seed.unwrap_or(t.seed),
        instances.unwrap_or(t.instances),
        margin_instances.unwrap_or(t.margin_instances),
    )
    .map_err(other)?;
    write_file(path, &pretty(&report))?;
    writeln!(out, "theory: {}", path.display()).map_err(other)?;
    writeln!(out, "decomposition max error   {:e}", report.decomposition_max_error).map_err(other)?;
    writeln!(out, "affine update max error   {:e}", report.affine_update_max_error).map_err(other)?;
    writeln!(out, "softmax shift max error   {:e}", report.softmax_shift_max_error).map_err(other)?;
    writeln!(out, "KKT max residual          {:e}", report.kkt_max_residual).map_err(other)?;
    writeln!(out, "1-D analytic max error    {:e}", report.analytic_1d_max_error).map_err(other)?;
    writeln!(out, "support restriction dev.  {:e}", report.support_restriction_max_deviation).map_err(other)?;
    writeln!(out, "softmax/linear agreement  {}", report.softmax_linear_label_agreement).map_err(other)?;
    Ok(())
}
