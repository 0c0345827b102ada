//! Static word-vector baselines: TF-IDF-weighted averages of pretrained word
//! vectors, with mined templates as the IDF documents.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::drain::{LogTemplate, WILDCARD};
use crate::{Embedding, Error, Result};

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub dimension: usize,
    pub vectors: HashMap<String, Vec<f32>>,
    /// Rows that repeated an earlier word; the last occurrence wins.
    pub duplicate_words: usize,
}

impl EmbeddingTable {
    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// Parses the word-vector text format: `word f1 f2 ... fd` per line.
    /// A leading `count dim` header line (word2vec style) is skipped.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut dimension = None;
        let mut vectors = HashMap::new();
        let mut duplicate_words = 0;
        for (no, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if no == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
                continue;
            }
            let vec = values
                .iter()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", no + 1)))?;
            let d = *dimension.get_or_insert(vec.len());
            if vec.len() != d || d == 0 {
                return Err(Error::Format(format!(
                    "line {}: expected {d} values, found {}",
                    no + 1,
                    vec.len()
                )));
            }
            if vectors.insert(word.to_string(), vec).is_some() {
                duplicate_words += 1;
            }
        }
        let dimension = dimension.ok_or_else(|| Error::Format("empty word-vector file".into()))?;
        if duplicate_words > 0 {
            log::warn!("{name}: {duplicate_words} duplicate word rows, kept last occurrence");
        }
        Ok(Self {
            name: name.to_string(),
            dimension,
            vectors,
            duplicate_words,
        })
    }
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingTable::parse(&name, &text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdfModel {
    pub doc_count: usize,
    pub doc_freq: HashMap<String, usize>,
}

impl IdfModel {
    /// `ln((N + 1) / (df + 1)) + 1`; unseen words get `df = 0`.
    pub fn idf(&self, word: &str) -> f64 {
        let df = self.doc_freq.get(word).copied().unwrap_or(0);
        ((self.doc_count as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }
}

/// Document frequencies over templates, wildcard excluded.
pub fn fit_idf(templates: &[LogTemplate]) -> IdfModel {
    let mut doc_freq = HashMap::new();
    for t in templates {
        let unique: HashSet<&str> = t.words().collect();
        for w in unique {
            *doc_freq.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    debug_assert!(!doc_freq.contains_key(WILDCARD));
    IdfModel {
        doc_count: templates.len(),
        doc_freq,
    }
}

/// `Σ tf·idf·v / Σ tf·idf` over in-vocabulary tokens; zero vector when none.
pub fn embed_event<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable, idf: &IdfModel) -> Embedding {
    let mut tf: Vec<(&str, usize)> = Vec::new();
    for t in tokens {
        let t = t.as_ref();
        match tf.iter_mut().find(|(w, _)| *w == t) {
            Some((_, c)) => *c += 1,
            None => tf.push((t, 1)),
        }
    }
    tf.sort_unstable_by_key(|(w, _)| *w);
    let mut acc = vec![0.0f64; table.dimension];
    let mut total = 0.0f64;
    for (word, count) in tf {
        let Some(v) = table.get(word) else { continue };
        let w = count as f64 * idf.idf(word);
        total += w;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * *x as f64;
        }
    }
    if total == 0.0 {
        return vec![0.0; table.dimension];
    }
    acc.into_iter().map(|a| (a / total) as f32).collect()
}

pub fn embed_events(texts: &[&str], table: &EmbeddingTable, idf: &IdfModel) -> Vec<Embedding> {
    texts
        .par_iter()
        .map(|t| {
            let tokens: Vec<&str> = t.split_whitespace().collect();
            embed_event(&tokens, table, idf)
        })
        .collect()
}
