//! Evaluation metrics: exact match, LCS ratio, token edit distance,
//! precision/recall/F1, BLEU-4 and ROUGE-L.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::levenshtein;

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold sequence is empty")]
    EmptyGold,
    #[error("ROUGE-L needs non-empty prediction and reference")]
    EmptyInput,
    #[error("length mismatch: {0} predictions vs {1} golds")]
    LengthMismatch(usize, usize),
}

/// Named metric values. Edit distances are in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
}

impl EvalResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn exact_match<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    if pred == gold {
        1.0
    } else {
        0.0
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `|LCS(pred, gold)| / |gold|`.
pub fn lcs_ratio<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    Ok(lcs_len(pred, gold) as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 for one positive class. Undefined ratios are 0.
pub fn classification_prf(preds: &[usize], golds: &[usize], positive: usize) -> Result<Prf, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), golds.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        match (*p == positive, *g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Prf { precision, recall, f1 })
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 with add-one smoothing on every n-gram precision and
/// brevity penalty `exp(1 - |gold|/|pred|)` for short predictions.
pub fn bleu4<T: Eq + Hash>(pred: &[T], gold: &[T]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let p_counts = ngram_counts(pred, n);
        let g_counts = ngram_counts(gold, n);
        let matched: usize = p_counts.iter().map(|(g, c)| (*c).min(g_counts.get(g).copied().unwrap_or(0))).sum();
        let total = pred.len().saturating_sub(n - 1);
        log_sum += ((matched as f64 + 1.0) / (total as f64 + 1.0)).ln();
    }
    let bp = if pred.len() < gold.len() { (1.0 - gold.len() as f64 / pred.len() as f64).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

/// LCS-based F-measure with recall weight `beta`.
pub fn rouge_l<T: PartialEq>(pred: &[T], gold: &[T], beta: f64) -> Result<f64, MetricsError> {
    if pred.is_empty() || gold.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let lcs = lcs_len(pred, gold) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / pred.len() as f64;
    let r = lcs / gold.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Accuracy plus P/R/F1 for class 1 (the positive class) and macro F1.
pub fn evaluate_classification(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<EvalResult, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), golds.len()));
    }
    let mut metrics = BTreeMap::new();
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    metrics.insert("accuracy".into(), ratio(correct, preds.len()));
    let positive = if num_classes > 1 { 1 } else { 0 };
    let prf = classification_prf(preds, golds, positive)?;
    metrics.insert("precision".into(), prf.precision);
    metrics.insert("recall".into(), prf.recall);
    metrics.insert("f1".into(), prf.f1);
    let mut macro_f1 = 0.0;
    for c in 0..num_classes.max(1) {
        macro_f1 += classification_prf(preds, golds, c)?.f1;
    }
    metrics.insert("macro_f1".into(), macro_f1 / num_classes.max(1) as f64);
    Ok(EvalResult { metrics, n_examples: preds.len() })
}

/// Means of EM, LCS ratio, token edit distance (raw and normalised by gold
/// length), BLEU-4 and ROUGE-L.
pub fn evaluate_generation(preds: &[Vec<String>], golds: &[Vec<String>]) -> Result<EvalResult, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), golds.len()));
    }
    let n = preds.len().max(1) as f64;
    let (mut em, mut lcs, mut ed, mut ned, mut bleu, mut rouge) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        em += exact_match(p, g);
        lcs += lcs_ratio(p, g)?;
        let d = levenshtein(p, g) as f64;
        ed += d;
        ned += d / g.len() as f64;
        bleu += bleu4(p, g);
        rouge += if p.is_empty() { 0.0 } else { rouge_l(p, g, DEFAULT_ROUGE_BETA)? };
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("exact_match".into(), em / n);
    metrics.insert("lcs".into(), lcs / n);
    metrics.insert("edit_distance_tokens".into(), ed / n);
    metrics.insert("edit_distance_normalized".into(), ned / n);
    metrics.insert("bleu4".into(), bleu / n);
    metrics.insert("rouge_l".into(), rouge / n);
    Ok(EvalResult { metrics, n_examples: preds.len() })
}
