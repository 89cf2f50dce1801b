//! Self-training for code models with hybrid pseudo-label selection.
//!
//! A teacher trained on a small labeled set annotates a large unlabeled
//! corpus. Pseudo labels are filtered by comparing each example with its
//! BM-25 nearest labeled neighbour and, when that comparison is
//! inconclusive, by the teacher's own loss. A freshly initialised student is
//! then trained on gold plus selected data with symmetric cross entropy and
//! a consistency penalty between original and transformed code, and the
//! student replaces the teacher for the next round.
//!
//! Module map:
//!
//! * [`corpus`]: dataset model, JSONL I/O, class balancing.
//! * [`code_transform`]: lexer and the four token-level transformations.
//! * [`retrieval`]: BM-25 index and normalised edit distance.
//! * [`selection`]: the hybrid retrieval/loss selector.
//! * [`objective`]: CE, RCE, SCE, symmetric KL and the combined loss.
//! * [`model`]: model contract, built-in models and the subprocess adapter.
//! * [`metrics`]: EM, LCS, edit distance, P/R/F1, BLEU-4, ROUGE-L.
//! * [`pipeline`]: the iterative teacher/student loop and ablations.
//! * [`synth`]: deterministic toy datasets used by tests and demos.

pub mod code_transform;
pub mod corpus;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod selection;
pub mod synth;

pub use corpus::{Dataset, Example, PseudoExample, Records, Target, TaskKind, UnlabeledExample};
pub use objective::{Distribution, LossKind, ObjectiveConfig};
pub use pipeline::{Ablation, PipelineConfig, RunOutput};
pub use selection::{SelectionConfig, SelectionReport};
