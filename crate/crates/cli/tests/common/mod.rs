//! Synthetic mock-backend projects written to a temp directory.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use rand::{Rng, SeedableRng};

use marginsel_cli::{run, Cli, CliError, Stats};

pub const CLASSES: [(&str, &str); 3] = [("a", "alpha"), ("b", "bravo"), ("c", "charlie")];

/// Three classes, each marked by one keyword whose mock candidate set is a
/// distinct pair of labels, so candidate keys identify the gold class.
pub struct Project {
    pub dir: PathBuf,
    pub per_class: usize,
}

impl Project {
    pub fn config_path(&self) -> PathBuf {
        self.dir.join("marginsel.toml")
    }
}

pub fn write_project(dir: &Path, per_class: usize, predictor: &str, extra: &str) -> Project {
    fs::create_dir_all(dir).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut data = fs::File::create(dir.join("data.jsonl")).unwrap();
    let mut emb = fs::File::create(dir.join("embeddings.jsonl")).unwrap();
    for i in 0..per_class {
        for (c, (label, keyword)) in CLASSES.iter().enumerate() {
            let id = format!("{label}{i:03}");
            let text = format!("{keyword} sample number {i} with <markup> & symbols");
            writeln!(data, "{}", serde_json::json!({ "id": id, "text": text, "label": label })).unwrap();
            // class direction plus noise, so kNN is informative but imperfect
            let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            v[c] += 1.0;
            writeln!(emb, "{}", serde_json::json!({ "id": id, "vector": v })).unwrap();
        }
    }
    let config = format!(
        r#"
[dataset]
labels = ["a", "b", "c"]
path = "data.jsonl"
test_fraction = 0.2
split_seed = 7

[templates.candidate]
system = "Assign every plausible label from: {{labels}}."
user = "Text: {{text}}\nAnswer with <label></label> tags."

[templates.final]
system = "Classify the text into one of: {{labels}}."
user = "Text: {{text}}\nAnswer with one <label></label> tag."

[backend]
kind = "mock"

[backend.mock]
default = "a"
predictor = "{predictor}"

[backend.mock.rules]
alpha = ["a", "b"]
bravo = ["b", "c"]
charlie = ["a", "c"]

[embeddings]
path = "embeddings.jsonl"

{extra}
"#
    );
    fs::write(dir.join("marginsel.toml"), config).unwrap();
    Project {
        dir: dir.to_path_buf(),
        per_class,
    }
}

pub fn cli(project: &Project, args: &[&str]) -> Cli {
    let config = project.config_path();
    let mut argv = vec!["marginsel", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    Cli::try_parse_from(argv).unwrap()
}

pub fn run_cmd(project: &Project, args: &[&str]) -> Result<(Stats, String), CliError> {
    let mut out = Vec::new();
    let stats = run(&cli(project, args), &mut out)?;
    Ok((stats, String::from_utf8(out).unwrap()))
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}
