//! BM-25 nearest-neighbour retrieval and normalised edit distance.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::code_transform::Token;
use crate::corpus::{Example, Target};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("cannot compare a class label with a token sequence")]
    KindMismatch,
    #[error("first sequence is empty; normalised distance undefined")]
    EmptyFirstSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub example_id: String,
    pub score: f64,
}

/// Inverted BM-25 index over lower-cased code tokens. Immutable once built.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_term_freqs: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    doc_freq: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_ids: Vec<String>,
    k1: f64,
    b: f64,
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`, non-negative for all df <= N.
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    let n = n_docs as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Saturated term-frequency component for one (term, document) pair.
pub fn bm25_tf(tf: f64, doc_len: f64, avg_doc_len: f64, k1: f64, b: f64) -> f64 {
    tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avg_doc_len))
}

pub fn normalize_terms(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.text.to_lowercase()).collect()
}

impl Bm25Index {
    pub fn build(labeled: &[Example], k1: f64, b: f64) -> Result<Self, RetrievalError> {
        let docs: Vec<(String, Vec<String>)> =
            labeled.iter().map(|e| (e.id.clone(), normalize_terms(&e.tokens))).collect();
        Self::from_documents(docs, k1, b)
    }

    /// Builds from already-normalised documents `(id, terms)`.
    pub fn from_documents(
        docs: Vec<(String, Vec<String>)>,
        k1: f64,
        b: f64,
    ) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut doc_term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_ids = Vec::with_capacity(docs.len());
        for (doc_idx, (id, terms)) in docs.into_iter().enumerate() {
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, &count) in &tf {
                *doc_freq.entry(term.clone()).or_default() += 1;
                postings.entry(term.clone()).or_default().push((doc_idx, count));
            }
            doc_lengths.push(terms.len());
            doc_term_freqs.push(tf);
            doc_ids.push(id);
        }
        let avg_doc_length = doc_lengths.iter().sum::<usize>() as f64 / doc_lengths.len() as f64;
        Ok(Self { doc_term_freqs, doc_lengths, avg_doc_length, doc_freq, postings, doc_ids, k1, b })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_lengths(&self) -> &[usize] {
        &self.doc_lengths
    }

    pub fn term_freq(&self, doc: usize, term: &str) -> u32 {
        self.doc_term_freqs[doc].get(term).copied().unwrap_or(0)
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    /// Scores every document. Each query token occurrence contributes its
    /// term score, so repeated query tokens count repeatedly.
    pub fn score_all(&self, query_terms: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        let n = self.doc_ids.len();
        for term in query_terms {
            let Some(posting) = self.postings.get(term) else { continue };
            let idf = bm25_idf(n, posting.len());
            for &(doc, tf) in posting {
                scores[doc] += idf
                    * bm25_tf(
                        f64::from(tf),
                        self.doc_lengths[doc] as f64,
                        self.avg_doc_length,
                        self.k1,
                        self.b,
                    );
            }
        }
        scores
    }

    /// Top `top_n` documents by descending score, ties by ascending id.
    pub fn query(&self, code_tokens: &[Token], top_n: usize) -> Vec<RetrievalHit> {
        self.query_terms(&normalize_terms(code_tokens), top_n)
    }

    pub fn query_terms(&self, query_terms: &[String], top_n: usize) -> Vec<RetrievalHit> {
        let scores = self.score_all(query_terms);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let cmp = |a: &usize, b: &usize| -> Ordering {
            scores[*b].total_cmp(&scores[*a]).then_with(|| self.doc_ids[*a].cmp(&self.doc_ids[*b]))
        };
        let k = top_n.min(order.len());
        if k == 0 {
            return Vec::new();
        }
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        order
            .into_iter()
            .map(|d| RetrievalHit { example_id: self.doc_ids[d].clone(), score: scores[d] })
            .collect()
    }
}

/// Token-level Levenshtein distance with unit costs, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalised by the length of the first sequence.
pub fn ned_seq<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, RetrievalError> {
    if a.is_empty() {
        return Err(RetrievalError::EmptyFirstSequence);
    }
    Ok(levenshtein(a, b) as f64 / a.len() as f64)
}

/// Sequences: normalised edit distance; class labels: `1{a != b}`.
pub fn ned(a: &Target, b: &Target) -> Result<f64, RetrievalError> {
    match (a, b) {
        (Target::Class(x), Target::Class(y)) => Ok(if x == y { 0.0 } else { 1.0 }),
        (Target::Tokens(x), Target::Tokens(y)) => ned_seq(x, y),
        _ => Err(RetrievalError::KindMismatch),
    }
}
