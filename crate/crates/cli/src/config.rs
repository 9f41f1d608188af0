//! TOML configuration with `--set key=value` overrides. Relative paths are
//! resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use marginsel::analysis::Metric;
use marginsel::eval::{Average, Fallback, Method, RunConfig};
use marginsel::llm::MockPredictor;
use marginsel::{BackendConfig, BuiltinTask, LabelSpace, PromptKind, PromptTemplate};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    pub backend: BackendSection,
    #[serde(default)]
    pub embeddings: Option<EmbeddingsSection>,
    #[serde(default)]
    pub lookup: LookupSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Built-in task providing labels and prompts.
    pub task: Option<String>,
    /// Custom label space (requires `[templates]`).
    pub labels: Option<Vec<String>>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Single labelled file split by `test_fraction`.
    pub path: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateText {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    pub candidate: Option<TemplateText>,
    #[serde(rename = "final")]
    pub final_prediction: Option<TemplateText>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSection {
    #[serde(default)]
    pub rules: BTreeMap<String, Vec<String>>,
    pub default: String,
    #[serde(default)]
    pub predictor: MockPredictor,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Response cache directory; set to "" to disable caching.
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub http: BackendConfig,
    pub mock: Option<MockSection>,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsSection {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupSection {
    #[serde(default = "default_lookup")]
    pub path: PathBuf,
}

fn default_lookup() -> PathBuf {
    PathBuf::from("lookup.jsonl")
}

impl Default for LookupSection {
    fn default() -> Self {
        Self { path: default_lookup() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Random,
    Knn,
    Marginsel,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub methods: Vec<MethodName>,
    /// Hard-example share for marginsel.
    pub alpha: f64,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub fallback: Fallback,
    pub average: Average,
    /// Defaults to the backend concurrency.
    pub concurrency: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        let base = RunConfig::default();
        Self {
            methods: vec![MethodName::Random, MethodName::Knn, MethodName::Marginsel],
            alpha: 0.9,
            shots: base.shots,
            seeds: base.seeds,
            fallback: base.fallback,
            average: base.average,
            concurrency: None,
            output_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.25, 0.5, 0.75, 0.9, 1.0],
            output_dir: PathBuf::from("sweep"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub metric: Metric,
    /// Vectors for centroid distances and the projection dump; defaults to
    /// the `[embeddings]` file.
    pub vectors: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            vectors: None,
            output_dir: PathBuf::from("analysis"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub seed: u64,
    pub instances: usize,
    pub margin_instances: usize,
    pub output: PathBuf,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 1000,
            margin_instances: 100,
            output: PathBuf::from("theory.json"),
        }
    }
}

/// Set `dotted.key = value` inside `table`. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{part}` is not a table"))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base_dir, overrides)
    }

    pub fn parse(text: &str, base_dir: PathBuf, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Config = toml::Value::Table(table).try_into().context("invalid config")?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match (&d.task, &d.labels) {
            (Some(_), Some(_)) => bail!("dataset: set either `task` or `labels`, not both"),
            (None, None) => bail!("dataset: one of `task` or `labels` is required"),
            _ => {}
        }
        let split = d.train.is_some() || d.test.is_some();
        if split == d.path.is_some() || (split && (d.train.is_none() || d.test.is_none())) {
            bail!("dataset: give either both `train` and `test`, or a single `path`");
        }
        if self.backend.kind == BackendKind::Mock && self.backend.mock.is_none() {
            bail!("backend: kind = \"mock\" needs a [backend.mock] table");
        }
        if !(0.0..=1.0).contains(&self.run.alpha) {
            bail!("run.alpha must lie in [0, 1]");
        }
        self.run_config(&[]).map(|_| ())?;
        self.label_space()?;
        self.templates()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn builtin_task(&self) -> Result<Option<BuiltinTask>> {
        self.dataset
            .task
            .as_deref()
            .map(|t| t.parse::<BuiltinTask>().map_err(|e| anyhow!(e)))
            .transpose()
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        if let Some(task) = self.builtin_task()? {
            return Ok(task.label_space());
        }
        let labels = self.dataset.labels.clone().unwrap_or_default();
        LabelSpace::new(labels).context("dataset.labels")
    }

    /// Candidate-assignment and final-prediction templates.
    pub fn templates(&self) -> Result<(PromptTemplate, PromptTemplate)> {
        let task = self.builtin_task()?;
        let pick = |text: &Option<TemplateText>, kind: PromptKind, name: &str| -> Result<PromptTemplate> {
            match (text, task) {
                (Some(s), _) => PromptTemplate::new(kind, s.system.clone(), s.user.clone())
                    .with_context(|| format!("templates.{name}")),
                (None, Some(t)) => Ok(t.template(kind)),
                (None, None) => bail!("templates.{name} is required for a custom label space"),
            }
        };
        Ok((
            pick(&self.templates.candidate, PromptKind::CandidateAssignment, "candidate")?,
            pick(&self.templates.final_prediction, PromptKind::FinalPrediction, "final")?,
        ))
    }

    pub fn methods(&self) -> Vec<Method> {
        self.run
            .methods
            .iter()
            .map(|m| match m {
                MethodName::Random => Method::Random,
                MethodName::Knn => Method::Knn,
                MethodName::Marginsel => Method::MarginSel { alpha: self.run.alpha },
            })
            .collect()
    }

    pub fn run_config(&self, methods: &[Method]) -> Result<RunConfig> {
        let cfg = RunConfig {
            methods: if methods.is_empty() { self.methods() } else { methods.to_vec() },
            shots: self.run.shots.clone(),
            seeds: self.run.seeds.clone(),
            fallback: self.run.fallback,
            average: self.run.average,
            concurrency: self.run.concurrency.unwrap_or(self.backend.http.concurrency),
        };
        cfg.validate().context("run")?;
        Ok(cfg)
    }

    pub fn needs_embeddings(&self) -> bool {
        self.methods().iter().any(|m| match m {
            Method::Knn => true,
            Method::MarginSel { alpha } => *alpha < 1.0 || self.run.fallback == Fallback::Knn,
            Method::Random => false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[dataset]
task = "sst5"
path = "data.jsonl"

[backend]
kind = "mock"

[backend.mock]
default = "neutral"
"#;

    fn parse(text: &str, overrides: &[&str]) -> Result<Config> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        Config::parse(text, PathBuf::from("/cfg"), &o)
    }

    #[test]
    fn defaults_and_paths() {
        let cfg = parse(BASE, &[]).unwrap();
        assert_eq!(cfg.run.shots, vec![2, 4, 6, 8, 10]);
        assert_eq!(cfg.resolve(&cfg.lookup.path), PathBuf::from("/cfg/lookup.jsonl"));
        assert_eq!(cfg.resolve(Path::new("/abs")), PathBuf::from("/abs"));
        assert_eq!(cfg.label_space().unwrap().len(), 5);
        assert!(cfg.needs_embeddings());
    }

    #[test]
    fn unknown_keys_list_valid_ones() {
        let err = parse(&format!("{BASE}\n[run]\nshotz = [2]\n"), &[]).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("shotz") && msg.contains("shots"), "{msg}");
    }

    #[test]
    fn overrides() {
        let cfg = parse(BASE, &["run.shots=[2]", "run.alpha=1", "run.methods=[\"marginsel\"]", "lookup.path=x.jsonl"])
            .unwrap();
        assert_eq!(cfg.run.shots, vec![2]);
        assert_eq!(cfg.methods(), vec![Method::MarginSel { alpha: 1.0 }]);
        assert_eq!(cfg.lookup.path, PathBuf::from("x.jsonl"));
        assert!(parse(BASE, &["noequals"]).is_err());
        assert!(parse(BASE, &["run.alpha=2"]).is_err());
        assert!(parse(BASE, &["dataset.task.x=1"]).is_err());
    }

    #[test]
    fn dataset_shape_checked() {
        let both = BASE.replace("path = \"data.jsonl\"", "path = \"a\"\ntrain = \"b\"\ntest = \"c\"");
        assert!(parse(&both, &[]).is_err());
        let custom = BASE.replace("task = \"sst5\"", "labels = [\"a\", \"b\"]");
        assert!(format!("{:#}", parse(&custom, &[]).unwrap_err()).contains("templates"));
    }
}
