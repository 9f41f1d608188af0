//! Max-margin demonstration selection for in-context-learning classification.
//!
//! The pipeline assigns zero-shot candidate-label sets to training and test
//! examples ([`selection::build_lookup`]), picks hard demonstrations whose
//! candidate sets match the test example, mixes in cosine nearest neighbours
//! ([`selection::select_demos`]), and scores the resulting few-shot
//! predictions ([`eval`]). [`analysis`] holds the post-hoc diagnostics and
//! [`theory`] numerically checks the linear-attention / max-margin view of
//! demonstrations.

pub mod analysis;
pub mod dataset;
pub mod eval;
pub mod knn;
pub mod labels;
pub mod llm;
pub mod prompting;
pub mod seed;
pub mod selection;
pub mod theory;

pub use analysis::{candidate_histogram, centroid_distances, dump_projection_input, step1_recall, CentroidMatrix, Metric};
pub use dataset::{label_frequency, load_dataset, stratified_split, Dataset, LabelFrequency};
pub use knn::{cosine, knn_retrieve, load_embeddings, EmbeddingStore};
pub use labels::{candidate_key, candidate_set_from_labels, CandidateSet, Example, LabelSpace};
pub use llm::{BackendConfig, CachedBackend, ChatBackend, ChatExchange, HttpBackend, MockBackend, MockRule};
pub use prompting::{BuiltinTask, DemoBlock, PromptKind, PromptTemplate};
pub use selection::{select_demos, DemoSet, DemoSource, LookupEntry, SelectionConfig};
pub use theory::{solve_hard_margin, theory_check, AttentionParams, MarginSolution, PromptTensors, TheoryReport};
pub use eval::{alpha_sweep, macro_f1, predict_one, run_experiment, EvalContext, Method, PredictionRecord, RunConfig, RunReport};
