//! Model contract shared by the teacher and the student.
//!
//! Two built-in models ship with the crate: [`BagOfTokensClassifier`] and
//! [`TokenTranslationModel`]. Both are linear in their parameters so the
//! objective's gradients are exact. [`AdapterModel`] delegates to an external
//! executable over JSONL files so real pre-trained models can take part.

mod adapter;
mod classifier;
mod params;
mod train;
mod translator;
mod vocab;

use thiserror::Error;

use crate::code_transform::{ReplacementVocab, Token};
use crate::corpus::{Example, PseudoExample, TaskKind, Target, UnlabeledExample};
use crate::objective::{ObjectiveConfig, ObjectiveError};

pub use adapter::{AdapterError, AdapterModel, AdapterOp, DEFAULT_ADAPTER_TIMEOUT};
pub use classifier::BagOfTokensClassifier;
pub use train::TrainSummary;
pub use translator::TokenTranslationModel;
pub use vocab::{Vocab, MASK, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("non-finite loss in epoch {epoch} on example `{example_id}`")]
    NonFiniteLoss { epoch: u32, example_id: String },
    #[error("model handles {expected:?} targets, got {got:?}")]
    TaskMismatch { expected: TaskKind, got: TaskKind },
    #[error("class {class} outside the model's {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("target has {target} tokens but the input has {input}")]
    LengthMismatch { input: usize, target: usize },
    #[error("training needs at least one example")]
    EmptyTrainingSet,
    #[error("learning rate must be > 0 (or exactly 0 for a no-op run), got {0}")]
    InvalidLearningRate(f64),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Gold plus selected pseudo data (`D ∪ S`).
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub gold: &'a [Example],
    pub pseudo: &'a [PseudoExample],
}

impl<'a> TrainingSet<'a> {
    pub fn gold_only(gold: &'a [Example]) -> Self {
        Self { gold, pseudo: &[] }
    }

    pub fn len(&self) -> usize {
        self.gold.len() + self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(id, tokens, target)` for every example, gold first.
    pub fn items(&self) -> Vec<(&'a str, &'a [Token], &'a Target)> {
        self.gold
            .iter()
            .map(|e| (e.id.as_str(), e.tokens.as_slice(), &e.target))
            .chain(self.pseudo.iter().map(|p| (p.id(), p.base.tokens.as_slice(), &p.pseudo_target)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions<'a> {
    pub objective: ObjectiveConfig,
    /// Fraction of eligible positions altered by each code transformation.
    pub transform_ratio: f64,
    pub replacement_vocab: &'a ReplacementVocab,
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Self-training round, forwarded to external adapters (0 = teacher).
    pub iteration: u32,
}

/// What the pipeline needs from a teacher or student.
pub trait TaskModel: Send + Sync {
    fn task(&self) -> TaskKind;

    /// Discards everything learned and starts from the initial state for `seed`.
    fn reinitialize(&mut self, seed: u64) -> Result<(), ModelError>;

    fn train(&mut self, data: TrainingSet<'_>, opts: &TrainOptions<'_>) -> Result<TrainSummary, ModelError>;

    fn predict_batch(&self, inputs: &[UnlabeledExample]) -> Result<Vec<Target>, ModelError>;

    /// Per-example SCE of the model's prediction against the given targets.
    fn score_batch(
        &self,
        items: &[(UnlabeledExample, Target)],
        objective: &ObjectiveConfig,
    ) -> Result<Vec<f64>, ModelError>;

    /// Flat parameter vector for built-in models.
    fn parameters(&self) -> Option<&[f64]> {
        None
    }
}
