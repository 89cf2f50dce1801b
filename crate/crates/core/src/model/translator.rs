use super::params::{RowGrad, RowParams};
use super::train::{fit, Differentiable, TrainSummary};
use super::vocab::{Vocab, UNK};
use super::{ModelError, TaskModel, TrainOptions, TrainingSet};
use crate::code_transform::Token;
use crate::corpus::{TaskKind, Target, UnlabeledExample};
use crate::objective::{sequence_sce_loss, total_objective_with_grad, Distribution, ObjectiveConfig};

/// Position-wise token translator: output token `i` depends only on input
/// token `i` through a `vocab_in × vocab_out` logit table. Decoding is
/// greedy argmax, so outputs are as long as inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTranslationModel {
    input_vocab: Vocab,
    output_vocab: Vocab,
    table: RowParams,
}

impl TokenTranslationModel {
    pub fn new(input_vocab: Vocab, output_vocab: Vocab, seed: u64) -> Self {
        let table = RowParams::init(input_vocab.len(), output_vocab.len(), seed, "translation");
        Self { input_vocab, output_vocab, table }
    }

    /// Table with `weight` on every `(t, t)` pair present in both vocabularies.
    pub fn identity_dominant(input_vocab: Vocab, output_vocab: Vocab, weight: f64) -> Self {
        let width = output_vocab.len();
        let mut data = vec![0.0; input_vocab.len() * width];
        for r in 0..input_vocab.len() {
            let out = output_vocab.id(input_vocab.token(r));
            if out != 0 || input_vocab.token(r) == UNK {
                data[r * width + out] = weight;
            }
        }
        Self { input_vocab, output_vocab, table: RowParams { width, data } }
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.table.data
    }

    pub fn output_vocab(&self) -> &Vocab {
        &self.output_vocab
    }

    fn rows_of(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.input_vocab.id(&t.text)).collect()
    }

    pub fn predict_distributions(&self, tokens: &[Token]) -> Vec<Distribution> {
        self.rows_of(tokens).into_iter().map(|r| Distribution::from_logits(self.table.row(r))).collect()
    }

    pub fn predict(&self, tokens: &[Token]) -> (Target, Vec<Distribution>) {
        let dists = self.predict_distributions(tokens);
        let out = dists.iter().map(|q| self.output_vocab.token(q.argmax()).to_string()).collect();
        (Target::Tokens(out), dists)
    }

    fn gold(&self, input_len: usize, target: &Target) -> Result<Vec<usize>, ModelError> {
        match target {
            Target::Tokens(t) if t.len() == input_len => Ok(t.iter().map(|w| self.output_vocab.id(w)).collect()),
            Target::Tokens(t) => Err(ModelError::LengthMismatch { input: input_len, target: t.len() }),
            Target::Class(_) => Err(ModelError::TaskMismatch {
                expected: TaskKind::Generation,
                got: TaskKind::Classification,
            }),
        }
    }

    pub fn per_example_loss(&self, tokens: &[Token], target: &Target, clip: f64) -> Result<f64, ModelError> {
        let gold = self.gold(tokens.len(), target)?;
        Ok(sequence_sce_loss(&gold, &self.predict_distributions(tokens), clip)?)
    }

    pub fn loss_and_gradient(
        &self,
        input: &[Token],
        transformed: &[Token],
        target: &Target,
        cfg: &ObjectiveConfig,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.loss_and_dense_gradient(input, transformed, target, cfg)
    }

    pub fn objective(
        &self,
        input: &[Token],
        transformed: &[Token],
        target: &Target,
        cfg: &ObjectiveConfig,
    ) -> Result<f64, ModelError> {
        let gold = self.gold(input.len(), target)?;
        let zx: Vec<Vec<f64>> = self.rows_of(input).into_iter().map(|r| self.table.row(r).to_vec()).collect();
        let zc: Vec<Vec<f64>> = self.rows_of(transformed).into_iter().map(|r| self.table.row(r).to_vec()).collect();
        Ok(total_objective_with_grad(&zx, &zc, &gold, cfg)?.value)
    }
}

impl Differentiable for TokenTranslationModel {
    fn params(&self) -> &RowParams {
        &self.table
    }

    fn params_mut(&mut self) -> &mut RowParams {
        &mut self.table
    }

    fn rows(&self) -> usize {
        self.input_vocab.len()
    }

    fn accumulate(
        &self,
        input: &[Token],
        transformed: &[Token],
        target: &Target,
        cfg: &ObjectiveConfig,
        grad: &mut RowGrad,
        scale: f64,
    ) -> Result<f64, ModelError> {
        let gold = self.gold(input.len(), target)?;
        let rx = self.rows_of(input);
        let rc = self.rows_of(transformed);
        let zx: Vec<Vec<f64>> = rx.iter().map(|&r| self.table.row(r).to_vec()).collect();
        let zc: Vec<Vec<f64>> = rc.iter().map(|&r| self.table.row(r).to_vec()).collect();
        let g = total_objective_with_grad(&zx, &zc, &gold, cfg)?;
        for (r, d) in rx.iter().zip(&g.d_logits_x) {
            grad.add_scaled(*r, d, scale);
        }
        for (r, d) in rc.iter().zip(&g.d_logits_ct) {
            grad.add_scaled(*r, d, scale);
        }
        Ok(g.value)
    }
}

impl TaskModel for TokenTranslationModel {
    fn task(&self) -> TaskKind {
        TaskKind::Generation
    }

    fn reinitialize(&mut self, seed: u64) -> Result<(), ModelError> {
        self.table = RowParams::init(self.input_vocab.len(), self.output_vocab.len(), seed, "translation");
        Ok(())
    }

    fn train(&mut self, data: TrainingSet<'_>, opts: &TrainOptions<'_>) -> Result<TrainSummary, ModelError> {
        fit(self, data, opts)
    }

    fn predict_batch(&self, inputs: &[UnlabeledExample]) -> Result<Vec<Target>, ModelError> {
        Ok(inputs.iter().map(|u| self.predict(&u.tokens).0).collect())
    }

    fn score_batch(
        &self,
        items: &[(UnlabeledExample, Target)],
        objective: &ObjectiveConfig,
    ) -> Result<Vec<f64>, ModelError> {
        items.iter().map(|(u, t)| self.per_example_loss(&u.tokens, t, objective.log_zero_clip)).collect()
    }

    fn parameters(&self) -> Option<&[f64]> {
        Some(&self.table.data)
    }
}
