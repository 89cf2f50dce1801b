//! Hybrid pseudo-label selection.
//!
//! Each pseudo-labeled example is compared with its top-1 BM-25 neighbour in
//! the labeled set. Similar code with a similar label is accepted, similar
//! code with a clearly different label is rejected, and everything else
//! falls back to the teacher-loss filter (lowest K% over all pseudo data).

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{downsample_balance, CorpusError, Example, PseudoExample, Target};
use crate::retrieval::{ned, ned_seq, Bm25Index, RetrievalError};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("selection needs a non-empty input")]
    EmptyInput,
    #[error("index document `{0}` is not in the labeled set")]
    IndexMismatch(String),
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Which branches of the selector are active. `Hybrid` is the full method;
/// the other two exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Hybrid,
    RetrievalOnly,
    LossOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// NED threshold `t`.
    pub t: f64,
    /// Percentage `K` kept by the loss filter.
    pub top_k_percent: f64,
    /// Run the selector per pseudo class and down-sample to balance.
    pub per_class: bool,
    pub mode: SelectionMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { t: 0.4, top_k_percent: 20.0, per_class: true, mode: SelectionMode::Hybrid }
    }
}

/// Values of `K` swept by `--sweep-k`.
pub const K_GRID: [f64; 6] = [10.0, 15.0, 20.0, 25.0, 30.0, 35.0];

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(SelectionError::InvalidConfig(format!("t = {} not in (0, 1)", self.t)));
        }
        if !(self.top_k_percent > 0.0 && self.top_k_percent <= 100.0) {
            return Err(SelectionError::InvalidConfig(format!(
                "top_k_percent = {} not in (0, 100]",
                self.top_k_percent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    /// Similar code, similar label.
    RetrievalMatch,
    /// Similar code, clearly different label.
    RetrievalMismatch,
    /// Undecided by retrieval, inside the top-K loss set.
    LowLoss,
    /// Similar code but the label distance fell between `t` and `1 - t`,
    /// and the loss was outside the top-K set.
    NotInTopK,
    /// Retrieved code was not similar enough to judge, and the loss was
    /// outside the top-K set.
    NoRetrievalSignalNotInTopK,
    /// Accepted, then removed by per-class down-sampling.
    Downsampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub example_id: String,
    pub verdict: Verdict,
    pub reason: Reason,
    pub neighbor_id: String,
    pub code_ned: f64,
    pub label_ned: f64,
    pub teacher_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub decisions: Vec<SelectionDecision>,
    pub selected_count: usize,
    pub retrieval_accept_count: usize,
    pub loss_accept_count: usize,
    pub mean_teacher_loss_selected: Option<f64>,
}

impl SelectionReport {
    fn from_decisions(decisions: Vec<SelectionDecision>) -> Self {
        let accepted: Vec<&SelectionDecision> =
            decisions.iter().filter(|d| d.verdict == Verdict::Accept).collect();
        let retrieval_accept_count =
            accepted.iter().filter(|d| d.reason == Reason::RetrievalMatch).count();
        let loss_accept_count = accepted.iter().filter(|d| d.reason == Reason::LowLoss).count();
        let mean_teacher_loss_selected = if accepted.is_empty() {
            None
        } else {
            Some(accepted.iter().map(|d| d.teacher_loss).sum::<f64>() / accepted.len() as f64)
        };
        Self {
            selected_count: accepted.len(),
            retrieval_accept_count,
            loss_accept_count,
            mean_teacher_loss_selected,
            decisions,
        }
    }
}

/// Largest loss inside the lowest `⌈K% · n⌉` losses. Every example whose
/// loss is `<=` the returned value is a member, so ties at the cut are all
/// included.
pub fn loss_threshold(losses: &[f64], top_k_percent: f64) -> Result<f64, SelectionError> {
    if losses.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[top_k_count(losses.len(), top_k_percent) - 1])
}

/// `⌈K/100 · n⌉`, clamped to `[1, n]`. The product is formed before the
/// division and nudged down by 1e-9 so integral results are not pushed up by
/// rounding noise.
pub fn top_k_count(n: usize, top_k_percent: f64) -> usize {
    let raw = (top_k_percent * n as f64 / 100.0 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Runs the selector. `seed` only drives per-class down-sampling.
pub fn select(
    pseudo: &[PseudoExample],
    labeled: &[Example],
    index: &Bm25Index,
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<(Vec<PseudoExample>, SelectionReport), SelectionError> {
    cfg.validate()?;
    if pseudo.is_empty() || labeled.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    let by_id: HashMap<&str, &Example> = labeled.iter().map(|e| (e.id.as_str(), e)).collect();
    if let Some(missing) = index.doc_ids().iter().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(SelectionError::IndexMismatch(missing.clone()));
    }

    let per_class = cfg.per_class && pseudo.iter().all(|p| matches!(p.pseudo_target, Target::Class(_)));
    let groups: Vec<Vec<usize>> = if per_class {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in pseudo.iter().enumerate() {
            map.entry(p.pseudo_target.as_class().unwrap_or_default()).or_default().push(i);
        }
        map.into_values().collect()
    } else {
        vec![(0..pseudo.len()).collect()]
    };

    let mut decisions: Vec<Option<SelectionDecision>> = vec![None; pseudo.len()];
    for group in &groups {
        let members: Vec<&PseudoExample> = group.iter().map(|&i| &pseudo[i]).collect();
        let group_decisions = decide_group(&members, &by_id, index, cfg)?;
        for (&i, d) in group.iter().zip(group_decisions) {
            decisions[i] = Some(d);
        }
    }
    let mut decisions: Vec<SelectionDecision> = decisions.into_iter().flatten().collect();

    if per_class && groups.len() > 1 {
        let mut accepted: BTreeMap<usize, Vec<PseudoExample>> = BTreeMap::new();
        for (p, d) in pseudo.iter().zip(&decisions) {
            if d.verdict == Verdict::Accept {
                accepted
                    .entry(p.pseudo_target.as_class().unwrap_or_default())
                    .or_default()
                    .push(p.clone());
            }
        }
        if !accepted.is_empty() {
            let kept = downsample_balance(&accepted, seed)?;
            let kept_ids: std::collections::HashSet<&str> = kept.iter().map(|p| p.id()).collect();
            for d in decisions.iter_mut() {
                if d.verdict == Verdict::Accept && !kept_ids.contains(d.example_id.as_str()) {
                    d.verdict = Verdict::Reject;
                    d.reason = Reason::Downsampled;
                }
            }
        }
    }

    let selected = pseudo
        .iter()
        .zip(&decisions)
        .filter(|(_, d)| d.verdict == Verdict::Accept)
        .map(|(p, _)| p.clone())
        .collect();
    Ok((selected, SelectionReport::from_decisions(decisions)))
}

fn decide_group(
    members: &[&PseudoExample],
    by_id: &HashMap<&str, &Example>,
    index: &Bm25Index,
    cfg: &SelectionConfig,
) -> Result<Vec<SelectionDecision>, SelectionError> {
    let losses: Vec<f64> = members.iter().map(|p| p.teacher_loss).collect();
    let threshold = loss_threshold(&losses, cfg.top_k_percent)?;
    let t = cfg.t;
    members
        .par_iter()
        .map(|p| {
            let hit = index
                .query(&p.base.tokens, 1)
                .into_iter()
                .next()
                .ok_or(SelectionError::EmptyInput)?;
            let neighbor = by_id[hit.example_id.as_str()];
            let code_ned = ned_seq(&p.base.token_texts(), &token_texts(neighbor))?;
            let label_ned = ned(&p.pseudo_target, &neighbor.target)?;
            let in_top_k = p.teacher_loss <= threshold;
            let use_retrieval = cfg.mode != SelectionMode::LossOnly;
            let use_loss = cfg.mode != SelectionMode::RetrievalOnly;
            let similar_code = use_retrieval && code_ned <= t;

            let (verdict, reason) = if similar_code && label_ned <= t {
                (Verdict::Accept, Reason::RetrievalMatch)
            } else if similar_code && label_ned >= 1.0 - t {
                (Verdict::Reject, Reason::RetrievalMismatch)
            } else if use_loss && in_top_k {
                (Verdict::Accept, Reason::LowLoss)
            } else if similar_code {
                (Verdict::Reject, Reason::NotInTopK)
            } else {
                (Verdict::Reject, Reason::NoRetrievalSignalNotInTopK)
            };
            Ok(SelectionDecision {
                example_id: p.id().to_string(),
                verdict,
                reason,
                neighbor_id: hit.example_id,
                code_ned,
                label_ned,
                teacher_loss: p.teacher_loss,
            })
        })
        .collect()
}

fn token_texts(e: &Example) -> Vec<String> {
    e.tokens.iter().map(|t| t.text.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_transform::tokenize;
    use crate::corpus::UnlabeledExample;
    use crate::retrieval::{DEFAULT_B, DEFAULT_K1};
    use proptest::prelude::*;

    fn labeled(id: &str, code: &str, target: Target) -> Example {
        Example { id: id.into(), code: code.into(), tokens: tokenize(code, "java").unwrap(), target }
    }

    fn pseudo(id: &str, code: &str, target: Target, loss: f64) -> PseudoExample {
        PseudoExample {
            base: UnlabeledExample {
                id: id.into(),
                code: code.into(),
                tokens: tokenize(code, "java").unwrap(),
            },
            pseudo_target: target,
            teacher_loss: loss,
            iteration: 1,
        }
    }

    fn toks(s: &str) -> Target {
        Target::Tokens(s.split_whitespace().map(str::to_string).collect())
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(loss_threshold(&[1.0, 2.0, 3.0, 4.0], 25.0).unwrap(), 1.0);
        let v = loss_threshold(&[5.0; 4], 25.0).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!([5.0f64; 4].iter().filter(|l| **l <= v).count(), 4);
        assert!(matches!(loss_threshold(&[], 10.0), Err(SelectionError::EmptyInput)));
        assert_eq!(top_k_count(30, 10.0), 3);
        assert_eq!(top_k_count(3, 10.0), 1);
        assert_eq!(top_k_count(7, 100.0), 7);
    }

    proptest! {
        #[test]
        fn threshold_matches_sort_oracle(losses in prop::collection::vec(0u32..50, 1..1000),
                                         k in 1.0f64..=100.0) {
            let losses: Vec<f64> = losses.into_iter().map(|l| f64::from(l) / 7.0).collect();
            let v = loss_threshold(&losses, k).unwrap();
            let need = (k / 100.0 * losses.len() as f64 - 1e-9).ceil().max(1.0) as usize;
            let members = losses.iter().filter(|l| **l <= v).count();
            let strictly_below = losses.iter().filter(|l| **l < v).count();
            prop_assert!(members >= need);
            prop_assert!(strictly_below < need);
        }
    }

    // Generation data where the neighbour and NEDs are easy to hand-check.
    fn gen_fixture() -> (Vec<Example>, Bm25Index) {
        let d = vec![
            labeled("d1", "int add ( int a , int b ) { return a + b ; }", toks("returns the sum of a and b")),
            labeled("d2", "void log ( String msg ) { print ( msg ) ; }", toks("prints the message")),
        ];
        let idx = Bm25Index::build(&d, DEFAULT_K1, DEFAULT_B).unwrap();
        (d, idx)
    }

    #[test]
    fn retrieval_branches() {
        let (d, idx) = gen_fixture();
        let cfg = SelectionConfig { t: 0.4, top_k_percent: 10.0, per_class: false, ..Default::default() };
        let p = vec![
            // same code as d1, label one token off of seven (ned 1/7) -> match
            pseudo("u1", "int add ( int a , int b ) { return a + b ; }", toks("returns the sum of a and c"), 9.0),
            // same code as d2, unrelated label -> mismatch
            pseudo("u2", "void log ( String msg ) { print ( msg ) ; }", toks("computes a hash"), 0.1),
            // unrelated code -> decided by loss
            pseudo("u3", "while ( true ) { x ++ ; }", toks("loops forever"), 0.05),
            pseudo("u4", "double q ( ) { return 1.0 ; }", toks("gives one"), 3.0),
        ];
        let (sel, report) = select(&p, &d, &idx, &cfg, 0).unwrap();
        let reasons: Vec<Reason> = report.decisions.iter().map(|d| d.reason).collect();
        assert_eq!(
            reasons,
            vec![
                Reason::RetrievalMatch,
                Reason::RetrievalMismatch,
                Reason::LowLoss,
                Reason::NoRetrievalSignalNotInTopK
            ]
        );
        let ids: Vec<&str> = sel.iter().map(|p| p.id()).collect();
        assert_eq!(ids, vec!["u1", "u3"]);
        assert_eq!(report.selected_count, 2);
        assert_eq!(report.retrieval_accept_count, 1);
        assert_eq!(report.loss_accept_count, 1);
        assert!((report.mean_teacher_loss_selected.unwrap() - 4.525).abs() < 1e-12);
        // u2 has the lowest loss but the mismatch rule rejects it before the loss check.
        assert_eq!(report.decisions[1].verdict, Verdict::Reject);
    }

    #[test]
    fn ambiguous_label_band_falls_through() {
        let (d, idx) = gen_fixture();
        let cfg = SelectionConfig { t: 0.4, top_k_percent: 50.0, per_class: false, ..Default::default() };
        // "prints a message now" vs "prints the message": distance 2 over 4 = 0.5, inside (0.4, 0.6).
        let p = vec![
            pseudo("u1", "void log ( String msg ) { print ( msg ) ; }", toks("prints a message now"), 1.0),
            pseudo("u2", "void log ( String msg ) { print ( msg ) ; }", toks("prints a message now"), 2.0),
        ];
        let (_, report) = select(&p, &d, &idx, &cfg, 0).unwrap();
        assert_eq!(report.decisions[0].label_ned, 0.5);
        assert_eq!(report.decisions[0].reason, Reason::LowLoss);
        assert_eq!(report.decisions[1].reason, Reason::NotInTopK);
    }

    #[test]
    fn classification_reduces_to_label_agreement() {
        let d = vec![
            labeled("a", "if ( x > 0 ) { y = 1 ; }", Target::Class(1)),
            labeled("b", "for ( i = 0 ; i < n ; i ++ ) { s += i ; }", Target::Class(0)),
        ];
        let idx = Bm25Index::build(&d, DEFAULT_K1, DEFAULT_B).unwrap();
        let cfg = SelectionConfig { t: 0.4, top_k_percent: 10.0, per_class: false, ..Default::default() };
        let p = vec![
            pseudo("p1", "if ( x > 0 ) { y = 1 ; }", Target::Class(1), 5.0),
            pseudo("p2", "if ( x > 0 ) { y = 1 ; }", Target::Class(0), 0.0),
        ];
        let (_, report) = select(&p, &d, &idx, &cfg, 0).unwrap();
        assert_eq!(report.decisions[0].reason, Reason::RetrievalMatch);
        assert_eq!(report.decisions[1].reason, Reason::RetrievalMismatch);
    }

    #[test]
    fn keep_everything_when_k_is_100_and_no_retrieval_rejects() {
        let (d, idx) = gen_fixture();
        let cfg = SelectionConfig { t: 0.01, top_k_percent: 100.0, per_class: false, ..Default::default() };
        let p: Vec<PseudoExample> = (0..10)
            .map(|i| pseudo(&format!("u{i}"), "x = y + z ;", toks("adds things"), f64::from(i)))
            .collect();
        let (sel, _) = select(&p, &d, &idx, &cfg, 0).unwrap();
        assert_eq!(sel.len(), p.len());
    }

    #[test]
    fn per_class_balances() {
        let d = vec![labeled("a", "alpha beta", Target::Class(0)), labeled("b", "gamma delta", Target::Class(1))];
        let idx = Bm25Index::build(&d, DEFAULT_K1, DEFAULT_B).unwrap();
        let cfg = SelectionConfig { t: 0.4, top_k_percent: 100.0, per_class: true, ..Default::default() };
        let mut p: Vec<PseudoExample> =
            (0..6).map(|i| pseudo(&format!("z{i}"), "zeta eta theta", Target::Class(0), 1.0)).collect();
        p.extend((0..2).map(|i| pseudo(&format!("o{i}"), "omega psi", Target::Class(1), 1.0)));
        let (sel, report) = select(&p, &d, &idx, &cfg, 11).unwrap();
        assert_eq!(sel.len(), 4);
        assert_eq!(report.decisions.iter().filter(|d| d.reason == Reason::Downsampled).count(), 4);
        assert_eq!(report.selected_count, 4);
    }

    #[test]
    fn errors() {
        let (d, idx) = gen_fixture();
        let cfg = SelectionConfig::default();
        assert!(matches!(select(&[], &d, &idx, &cfg, 0), Err(SelectionError::EmptyInput)));
        let p = vec![pseudo("u", "x", toks("y"), 0.0)];
        assert!(matches!(select(&p, &d[..1], &idx, &cfg, 0), Err(SelectionError::IndexMismatch(_))));
        let bad = SelectionConfig { t: 1.0, ..Default::default() };
        assert!(matches!(select(&p, &d, &idx, &bad, 0), Err(SelectionError::InvalidConfig(_))));
    }

    #[test]
    fn raising_k_keeps_low_loss_accepts() {
        let (d, idx) = gen_fixture();
        let p: Vec<PseudoExample> = (0..40)
            .map(|i| pseudo(&format!("u{i}"), "while ( k ) { k -- ; }", toks("counts down"), f64::from(i % 13)))
            .collect();
        let mut prev: Vec<String> = Vec::new();
        for k in K_GRID {
            let cfg = SelectionConfig { t: 0.4, top_k_percent: k, per_class: false, ..Default::default() };
            let (sel, _) = select(&p, &d, &idx, &cfg, 0).unwrap();
            let ids: Vec<String> = sel.iter().map(|p| p.id().to_string()).collect();
            assert!(prev.iter().all(|id| ids.contains(id)));
            prev = ids;
        }
    }
}
