//! WikiHop-format samples: parsing, validation, masking and summary statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed dataset json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("statistics need at least one sample")]
    Empty,
    #[error("invalid query {0:?}: expected \"<relation> <subject>\"")]
    Query(String),
    #[error("mask table does not cover sample {0}")]
    MissingMask(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Splits text on Unicode whitespace and peels leading and trailing ASCII
/// punctuation off each piece as single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        let chars: Vec<char> = piece.chars().collect();
        let mut start = 0;
        while start < chars.len() && chars[start].is_ascii_punctuation() {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut end = chars.len();
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        for c in &chars[end.max(start)..] {
            out.push(c.to_string());
        }
    }
    out
}

/// Tokenizer used for documents, queries and candidate strings.
pub type TokenizeFn = fn(&str) -> Vec<String>;

/// Matching form of a token: lowercase, alphanumerics only. Pure punctuation
/// normalizes to the empty string.
pub fn normalize_token(token: &str) -> String {
    token
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Matching form of a phrase: its normalized tokens with empties dropped.
pub fn normalize_phrase(text: &str, tokenizer: TokenizeFn) -> Vec<String> {
    tokenizer(text)
        .iter()
        .map(|t| normalize_token(t))
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub relation: String,
    pub subject: String,
    pub raw: String,
}

impl Query {
    /// Splits at the first space: `"inception derrty entertainment"` has
    /// relation `inception` and subject `derrty entertainment`.
    pub fn parse(raw: &str) -> Result<Self> {
        let (relation, subject) = raw
            .split_once(' ')
            .ok_or_else(|| DatasetError::Query(raw.to_string()))?;
        if relation.is_empty() || subject.trim().is_empty() {
            return Err(DatasetError::Query(raw.to_string()));
        }
        Ok(Self {
            relation: relation.to_string(),
            subject: subject.to_string(),
            raw: raw.to_string(),
        })
    }

    pub fn new(relation: &str, subject: &str) -> Self {
        Self {
            relation: relation.to_string(),
            subject: subject.to_string(),
            raw: format!("{relation} {subject}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub query: Query,
    /// Support documents, tokenized.
    pub documents: Vec<Vec<String>>,
    pub candidates: Vec<String>,
    pub answer: Option<String>,
}

impl Sample {
    /// Index of the gold answer among the candidates.
    pub fn answer_index(&self) -> Option<usize> {
        let a = self.answer.as_ref()?;
        self.candidates.iter().position(|c| c == a)
    }

    pub fn query_tokens(&self, tokenizer: TokenizeFn) -> Vec<String> {
        tokenizer(&self.query.raw)
    }

    /// Checks every sample invariant and returns the first violation.
    pub fn validate(&self, tokenizer: TokenizeFn) -> std::result::Result<(), String> {
        if self.documents.is_empty() {
            return Err("no support documents".into());
        }
        if self.candidates.is_empty() {
            return Err("empty candidate list".into());
        }
        if self.candidates.len() < 2 {
            return Err("fewer than two candidates".into());
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            let key = normalize_phrase(c, tokenizer);
            if key.is_empty() {
                return Err(format!("candidate {c:?} normalizes to nothing"));
            }
            if !seen.insert(key) {
                return Err(format!("candidate {c:?} duplicates another after normalization"));
            }
        }
        if let Some(a) = &self.answer {
            if !self.candidates.contains(a) {
                return Err(format!("answer {a:?} is not a candidate"));
            }
        }
        Ok(())
    }
}

/// On-disk record layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub query: String,
    pub supports: Vec<String>,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl RawSample {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            query: s.query.raw.clone(),
            supports: s.documents.iter().map(|d| d.join(" ")).collect(),
            candidates: s.candidates.clone(),
            answer: s.answer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// Position in the input array.
    pub index: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedDataset {
    pub samples: Vec<Sample>,
    pub rejections: Vec<Rejection>,
}

pub fn parse_dataset(path: &Path) -> Result<ParsedDataset> {
    parse_dataset_with(path, tokenize)
}

pub fn parse_dataset_with(path: &Path, tokenizer: TokenizeFn) -> Result<ParsedDataset> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset_str(&text, tokenizer)
}

pub fn parse_dataset_str(text: &str, tokenizer: TokenizeFn) -> Result<ParsedDataset> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text)?;
    let mut out = ParsedDataset::default();
    for (index, value) in values.into_iter().enumerate() {
        let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
        let reject = |reason: String| Rejection {
            index,
            id: id.clone(),
            reason,
        };
        let raw: RawSample = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                out.rejections.push(reject(e.to_string()));
                continue;
            }
        };
        let query = match Query::parse(&raw.query) {
            Ok(q) => q,
            Err(e) => {
                out.rejections.push(reject(e.to_string()));
                continue;
            }
        };
        let sample = Sample {
            id: raw.id,
            query,
            documents: raw.supports.iter().map(|d| tokenizer(d)).collect(),
            candidates: raw.candidates,
            answer: raw.answer,
        };
        match sample.validate(tokenizer) {
            Ok(()) => out.samples.push(sample),
            Err(reason) => {
                log::warn!("rejecting sample {index} ({:?}): {reason}", id);
                out.rejections.push(reject(reason));
            }
        }
    }
    Ok(out)
}

pub fn to_json(samples: &[Sample]) -> Result<String> {
    let raw: Vec<RawSample> = samples.iter().map(RawSample::from_sample).collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    fs::write(path, to_json(samples)?).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Placeholder assignments for one masked sample: placeholder to original.
pub type SampleMask = BTreeMap<String, String>;

/// Mask tables of a whole dataset, keyed by sample id.
pub type MaskTable = BTreeMap<String, SampleMask>;

/// Replaces every exact token-sequence occurrence of each candidate (and of
/// the query subject) with a per-sample placeholder `MASKk`. Placeholder
/// indices are a seeded random permutation; indices whose token already
/// occurs in the sample are skipped.
pub fn mask_dataset(samples: &[Sample], seed: u64, tokenizer: TokenizeFn) -> (Vec<Sample>, MaskTable) {
    let mut table = MaskTable::new();
    let masked = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (m, t) = mask_sample(s, seed.wrapping_add(i as u64), tokenizer);
            table.insert(s.id.clone(), t);
            m
        })
        .collect();
    (masked, table)
}

pub fn mask_sample(sample: &Sample, seed: u64, tokenizer: TokenizeFn) -> (Sample, SampleMask) {
    let mut entities: Vec<String> = sample.candidates.clone();
    if !entities.contains(&sample.query.subject) {
        entities.push(sample.query.subject.clone());
    }
    let vocab: HashSet<&str> = sample
        .documents
        .iter()
        .flatten()
        .map(String::as_str)
        .chain(sample.candidates.iter().map(String::as_str))
        .collect();
    let query_tokens: HashSet<String> = tokenizer(&sample.query.raw).into_iter().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.shuffle(&mut rng);

    let mut next = 1usize;
    let mut placeholder_of: HashMap<&str, String> = HashMap::new();
    let mut table = SampleMask::new();
    for &e in &order {
        let name = loop {
            let candidate = format!("MASK{next}");
            next += 1;
            if !vocab.contains(candidate.as_str()) && !query_tokens.contains(&candidate) && !entities.contains(&candidate) {
                break candidate;
            }
        };
        placeholder_of.insert(entities[e].as_str(), name.clone());
        table.insert(name, entities[e].clone());
    }

    // Longest token sequences first so that "New York" wins over "York".
    let mut patterns: Vec<(Vec<String>, &str)> = entities
        .iter()
        .map(|e| (tokenizer(e), placeholder_of[e.as_str()].as_str()))
        .filter(|(toks, _)| !toks.is_empty())
        .collect();
    patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()));

    let documents = sample
        .documents
        .iter()
        .map(|doc| replace_spans(doc, &patterns))
        .collect();
    let masked = Sample {
        id: sample.id.clone(),
        query: Query::new(&sample.query.relation, &placeholder_of[sample.query.subject.as_str()]),
        documents,
        candidates: sample
            .candidates
            .iter()
            .map(|c| placeholder_of[c.as_str()].clone())
            .collect(),
        answer: sample.answer.as_ref().map(|a| placeholder_of[a.as_str()].clone()),
    };
    (masked, table)
}

fn replace_spans(doc: &[String], patterns: &[(Vec<String>, &str)]) -> Vec<String> {
    let mut out = Vec::with_capacity(doc.len());
    let mut i = 0;
    'outer: while i < doc.len() {
        for (toks, name) in patterns {
            if doc.len() - i >= toks.len() && doc[i..i + toks.len()] == toks[..] {
                out.push((*name).to_string());
                i += toks.len();
                continue 'outer;
            }
        }
        out.push(doc[i].clone());
        i += 1;
    }
    out
}

/// Inverse of [`mask_sample`] under its table.
pub fn unmask_sample(sample: &Sample, table: &SampleMask, tokenizer: TokenizeFn) -> Sample {
    let lookup = |t: &String| table.get(t).cloned().unwrap_or_else(|| t.clone());
    let subject = lookup(&sample.query.subject);
    Sample {
        id: sample.id.clone(),
        query: Query::new(&sample.query.relation, &subject),
        documents: sample
            .documents
            .iter()
            .map(|doc| {
                doc.iter()
                    .flat_map(|t| match table.get(t) {
                        Some(orig) => tokenizer(orig),
                        None => vec![t.clone()],
                    })
                    .collect()
            })
            .collect(),
        candidates: sample.candidates.iter().map(lookup).collect(),
        answer: sample.answer.as_ref().map(lookup),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl FieldStats {
    pub fn from_values(values: &[usize]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        Some(Self {
            min: sorted[0] as f64,
            max: sorted[n - 1] as f64,
            mean: sorted.iter().sum::<usize>() as f64 / n as f64,
            median,
            count: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub candidates: FieldStats,
    pub documents: FieldStats,
    pub tokens_per_document: FieldStats,
}

pub fn dataset_stats(samples: &[Sample]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let cands: Vec<usize> = samples.iter().map(|s| s.candidates.len()).collect();
    let docs: Vec<usize> = samples.iter().map(|s| s.documents.len()).collect();
    let toks: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.documents.iter().map(Vec::len))
        .collect();
    Ok(DatasetStats {
        samples: samples.len(),
        candidates: FieldStats::from_values(&cands).ok_or(DatasetError::Empty)?,
        documents: FieldStats::from_values(&docs).ok_or(DatasetError::Empty)?,
        tokens_per_document: FieldStats::from_values(&toks).ok_or(DatasetError::Empty)?,
    })
}

impl DatasetStats {
    /// `field,min,max,mean,median` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("field,min,max,mean,median\n");
        for (name, f) in [
            ("candidates", &self.candidates),
            ("documents", &self.documents),
            ("tokens_per_document", &self.tokens_per_document),
        ] {
            out.push_str(&format!("{name},{},{},{:.4},{}\n", f.min, f.max, f.mean, f.median));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub train_size: usize,
    pub dev_size: usize,
    pub overlapping_ids: Vec<String>,
    /// Share of dev ids that also occur in train.
    pub overlap_fraction: f64,
}

impl SplitReport {
    pub fn disjoint(&self) -> bool {
        self.overlapping_ids.is_empty()
    }
}

pub fn split_check(train: &[Sample], dev: &[Sample]) -> SplitReport {
    let train_ids: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    let overlapping_ids: Vec<String> = dev
        .iter()
        .filter(|s| train_ids.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    let overlap_fraction = if dev.is_empty() {
        0.0
    } else {
        overlapping_ids.len() as f64 / dev.len() as f64
    };
    SplitReport {
        train_size: train.len(),
        dev_size: dev.len(),
        overlapping_ids,
        overlap_fraction,
    }
}
