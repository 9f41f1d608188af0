//! Label-space and candidate-set primitives.
//!
//! A [`LabelSpace`] fixes the order of class labels once; bit `i` of every
//! [`CandidateSet`] built over it always refers to `labels[i]`. Candidate
//! sets print as fixed-width bit strings with label 0 leftmost, so a
//! five-label set holding labels 0 and 3 renders as `"10010"`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the number of classes a [`LabelSpace`] may hold.
pub const MAX_LABELS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate label `{0}` in label space")]
    DuplicateLabel(String),
    #[error("label space needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("label space supports at most {MAX_LABELS} labels, got {0}")]
    TooManyLabels(usize),
    #[error("invalid candidate key `{key}` for a space of {width} labels")]
    InvalidKey { key: String, width: usize },
}

/// Lowercase, trim, and collapse internal whitespace runs to a single space.
pub fn canonicalize(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Ordered, immutable set of class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Arc<[String]>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for raw in labels {
            let label = canonicalize(raw.as_ref());
            if label.is_empty() || out.contains(&label) {
                return Err(LabelError::DuplicateLabel(label));
            }
            out.push(label);
        }
        if out.len() < 2 {
            return Err(LabelError::TooFewLabels(out.len()));
        }
        if out.len() > MAX_LABELS {
            return Err(LabelError::TooManyLabels(out.len()));
        }
        Ok(Self { labels: out.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    /// Position of `name` after canonicalization.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let canon = canonicalize(name);
        self.labels.iter().position(|l| *l == canon)
    }

    /// Canonical form of `name` as declared in this space.
    pub fn resolve(&self, name: &str) -> Result<&str, LabelError> {
        self.index_of(name)
            .map(|i| self.labels[i].as_str())
            .ok_or_else(|| LabelError::UnknownLabel(name.to_string()))
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = LabelError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.labels.to_vec()
    }
}

/// Subset of a label space stored as a bitmask.
///
/// The empty set only arises as the sentinel for a failed Step-1 parse; it
/// never equals a set produced by a successful parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CandidateSet {
    bits: u64,
    width: u8,
}

impl CandidateSet {
    pub fn empty(width: usize) -> Self {
        debug_assert!(width <= MAX_LABELS);
        Self {
            bits: 0,
            width: width as u8,
        }
    }

    pub fn full(width: usize) -> Self {
        let bits = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
        Self {
            bits,
            width: width as u8,
        }
    }

    pub fn singleton(width: usize, index: usize) -> Self {
        let mut set = Self::empty(width);
        set.insert(index);
        set
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(width: usize, indices: I) -> Self {
        let mut set = Self::empty(width);
        for i in indices {
            set.insert(i);
        }
        set
    }

    /// Parse a `'0'`/`'1'` key string; leftmost char is label index 0.
    pub fn from_key(key: &str, width: usize) -> Result<Self, LabelError> {
        let invalid = || LabelError::InvalidKey {
            key: key.to_string(),
            width,
        };
        if key.len() != width || width > MAX_LABELS {
            return Err(invalid());
        }
        let mut set = Self::empty(width);
        for (i, ch) in key.bytes().enumerate() {
            match ch {
                b'1' => set.insert(i),
                b'0' => {}
                _ => return Err(invalid()),
            }
        }
        Ok(set)
    }

    pub fn insert(&mut self, index: usize) {
        assert!(index < self.width as usize, "label index out of range");
        self.bits |= 1 << index;
    }

    pub fn contains(&self, index: usize) -> bool {
        index < self.width as usize && self.bits & (1 << index) != 0
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width()).filter(move |&i| self.contains(i))
    }

    /// Member labels in label-space order.
    pub fn labels<'a>(&'a self, space: &'a LabelSpace) -> Vec<&'a str> {
        self.indices().filter_map(|i| space.label(i)).collect()
    }

    pub fn key(&self) -> String {
        candidate_key(self)
    }
}

impl fmt::Display for CandidateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Build the candidate set for a list of label names. Order and repetition
/// of `names` do not matter.
pub fn candidate_set_from_labels<S: AsRef<str>>(
    names: &[S],
    space: &LabelSpace,
) -> Result<CandidateSet, LabelError> {
    let mut set = CandidateSet::empty(space.len());
    for name in names {
        let name = name.as_ref();
        let index = space
            .index_of(name)
            .ok_or_else(|| LabelError::UnknownLabel(name.to_string()))?;
        set.insert(index);
    }
    Ok(set)
}

/// Fixed-width bit string of a candidate set, label 0 leftmost.
pub fn candidate_key(set: &CandidateSet) -> String {
    (0..set.width())
        .map(|i| if set.contains(i) { '1' } else { '0' })
        .collect()
}

/// A labelled text instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub gold: String,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold: gold.into(),
        }
    }
}
