//! Criterion benchmarks for the selection, metric and theory hot paths; see
//! `benches/hot_paths.rs`.
