//! Embedding store and exact cosine nearest-neighbour retrieval.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("vector for `{0}` has a different dimension from the store")]
    DimensionMismatch(String),
    #[error("duplicate embedding id `{0}`")]
    DuplicateId(String),
    #[error("unknown embedding id `{0}`")]
    UnknownId(String),
    #[error("cosine of a zero-norm vector is undefined")]
    ZeroNorm,
}

/// Id-addressed dense vectors of one shared dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    vector: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<(), KnnError> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(KnnError::DuplicateId(id));
        }
        if vector.is_empty() || (!self.ids.is_empty() && vector.len() != self.dimension) {
            return Err(KnnError::DimensionMismatch(id));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(KnnError::Parse {
                line: self.ids.len() + 1,
                message: format!("non-finite component in vector `{id}`"),
            });
        }
        self.dimension = vector.len();
        self.norms.push(norm(&vector));
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }
}

/// Load JSON-lines records with `id` and `vector`. Blank lines and lines
/// starting with `#` are skipped; other keys are ignored.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore, KnnError> {
    let path = path.as_ref();
    let io_err = |source| KnnError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut store = EmbeddingStore::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: Record = serde_json::from_str(trimmed).map_err(|e| KnnError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match store.insert(rec.id, rec.vector) {
            Err(KnnError::Parse { message, .. }) => {
                return Err(KnnError::Parse {
                    line: i + 1,
                    message,
                })
            }
            other => other?,
        }
    }
    Ok(store)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, KnnError> {
    if a.len() != b.len() {
        return Err(KnnError::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(KnnError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// The `k` candidates most cosine-similar to `query`, best first. Ties go to
/// the lexicographically smaller id. Duplicate candidate ids count once.
pub fn knn_by_vector<S: AsRef<str>>(
    store: &EmbeddingStore,
    query: &[f64],
    k: usize,
    candidate_ids: &[S],
    exclude_ids: &HashSet<&str>,
) -> Result<Vec<String>, KnnError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if query.len() != store.dimension() {
        return Err(KnnError::DimensionMismatch("query".into()));
    }
    let query_norm = norm(query);
    if query_norm == 0.0 {
        return Err(KnnError::ZeroNorm);
    }
    let mut seen = HashSet::new();
    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(candidate_ids.len());
    for id in candidate_ids {
        let id = id.as_ref();
        let &i = store
            .index
            .get(id)
            .ok_or_else(|| KnnError::UnknownId(id.to_string()))?;
        if exclude_ids.contains(id) || !seen.insert(id) {
            continue;
        }
        if store.norms[i] == 0.0 {
            return Err(KnnError::ZeroNorm);
        }
        let score = (dot(query, &store.vectors[i]) / (query_norm * store.norms[i])).clamp(-1.0, 1.0);
        scored.push((score, store.ids[i].as_str()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
}

/// kNN for a query that lives in the store; the query id itself is never
/// returned.
pub fn knn_retrieve<S: AsRef<str>>(
    store: &EmbeddingStore,
    query_id: &str,
    k: usize,
    candidate_ids: &[S],
    exclude_ids: &HashSet<&str>,
) -> Result<Vec<String>, KnnError> {
    let query = store
        .get(query_id)
        .ok_or_else(|| KnnError::UnknownId(query_id.to_string()))?;
    let mut exclude = exclude_ids.clone();
    exclude.insert(query_id);
    knn_by_vector(store, query, k, candidate_ids, &exclude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn store(entries: &[(&str, Vec<f64>)]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new();
        for (id, v) in entries {
            s.insert(*id, v.clone()).unwrap();
        }
        s
    }

    fn file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_cases() {
        let f = file(&[r#"{"id":"a","vector":[1,2,3]}"#, r#"{"id":"b","vector":[0,0,1],"label":"x"}"#]);
        let s = load_embeddings(f.path()).unwrap();
        assert_eq!((s.len(), s.dimension()), (2, 3));

        let f = file(&[r#"{"id":"a","vector":[1,2,3]}"#, r#"{"id":"b","vector":[1,2,3,4]}"#]);
        assert!(matches!(load_embeddings(f.path()), Err(KnnError::DimensionMismatch(id)) if id == "b"));

        let f = file(&[r#"{"id":"a","vector":[1,NaN,3]}"#]);
        assert!(matches!(load_embeddings(f.path()), Err(KnnError::Parse { line: 1, .. })));

        let f = file(&[r#"{"id":"a","vector":[1e999]}"#]);
        assert!(matches!(load_embeddings(f.path()), Err(KnnError::Parse { .. })));

        let f = file(&["# header", r#"{"id":"a","vector":[1]}"#, r#"{"id":"a","vector":[2]}"#]);
        assert!(matches!(load_embeddings(f.path()), Err(KnnError::DuplicateId(_))));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(KnnError::ZeroNorm)));
    }

    #[test]
    fn retrieve_cases() {
        let s = store(&[("q", vec![1.0, 0.0]), ("a", vec![1.0, 0.1]), ("b", vec![0.0, 1.0])]);
        let none = HashSet::new();
        assert_eq!(knn_retrieve(&s, "q", 1, &["a", "b"], &none).unwrap(), ["a"]);
        assert!(knn_retrieve(&s, "q", 0, &["a", "b"], &none).unwrap().is_empty());
        assert_eq!(knn_retrieve(&s, "q", 5, &["q", "a", "b"], &none).unwrap(), ["a", "b"]);
        let ex: HashSet<&str> = ["a"].into();
        assert_eq!(knn_retrieve(&s, "q", 5, &["a", "b"], &ex).unwrap(), ["b"]);
        assert!(matches!(
            knn_retrieve(&s, "q", 1, &["zzz"], &none),
            Err(KnnError::UnknownId(_))
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let s = store(&[("q", vec![1.0, 0.0]), ("y", vec![2.0, 1.0]), ("x", vec![2.0, 1.0])]);
        let none = HashSet::new();
        assert_eq!(knn_retrieve(&s, "q", 1, &["y", "x"], &none).unwrap(), ["x"]);
    }

    fn brute_force(s: &EmbeddingStore, q: &str, k: usize, cands: &[String], ex: &HashSet<&str>) -> Vec<String> {
        let qv = s.get(q).unwrap();
        let mut uniq: Vec<&String> = cands.iter().filter(|c| c.as_str() != q && !ex.contains(c.as_str())).collect();
        uniq.sort();
        uniq.dedup();
        let mut all: Vec<(f64, String)> = uniq
            .into_iter()
            .map(|c| (cosine(qv, s.get(c).unwrap()).unwrap(), c.clone()))
            .collect();
        // full sort, descending score then ascending id
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, id)| id).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_brute_force(
            points in proptest::collection::vec(proptest::collection::vec(-3i32..=3, 3), 2..500),
            k in 0usize..20,
            excl in proptest::collection::vec(any::<prop::sample::Index>(), 0..5),
        ) {
            // small integer grid forces plenty of exact ties
            let mut s = EmbeddingStore::new();
            let mut ids = Vec::new();
            for (i, p) in points.iter().enumerate() {
                let mut v: Vec<f64> = p.iter().map(|&x| x as f64).collect();
                if v.iter().all(|&x| x == 0.0) { v[0] = 1.0; }
                let id = format!("id{i:04}");
                s.insert(id.clone(), v).unwrap();
                ids.push(id);
            }
            let ex: HashSet<&str> = excl.iter().map(|ix| ids[ix.index(ids.len())].as_str()).collect();
            let got = knn_retrieve(&s, &ids[0], k, &ids, &ex).unwrap();
            let want = brute_force(&s, &ids[0], k, &ids, &ex);
            prop_assert_eq!(&got, &want);
            prop_assert!(!got.contains(&ids[0]));
            prop_assert!(got.iter().all(|g| !ex.contains(g.as_str())));
            let available = ids.iter().filter(|i| *i != &ids[0] && !ex.contains(i.as_str())).count();
            prop_assert_eq!(got.len(), k.min(available));
        }
    }
}
