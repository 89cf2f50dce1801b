use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::params::{RowGrad, RowParams};
use super::{ModelError, TrainOptions, TrainingSet};
use crate::code_transform::{apply_transform, pick_transform, Token, TransformSpec};
use crate::corpus::Target;
use crate::objective::ObjectiveConfig;
use crate::seed::rng_for;
use crate::seed_parts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Mean per-example objective before the first update.
    pub initial_loss: f64,
    /// Mean per-example objective after the last update, on the same
    /// transformed views as `initial_loss`.
    pub final_loss: f64,
    pub epochs: u32,
    pub examples: usize,
}

/// A built-in model whose objective gradient can be accumulated row-wise.
pub(crate) trait Differentiable {
    fn params(&self) -> &RowParams;
    fn params_mut(&mut self) -> &mut RowParams;
    fn rows(&self) -> usize;

    /// Adds `scale * ∂loss/∂params` into `grad` and returns the loss.
    fn accumulate(
        &self,
        input: &[Token],
        transformed: &[Token],
        target: &Target,
        cfg: &ObjectiveConfig,
        grad: &mut RowGrad,
        scale: f64,
    ) -> Result<f64, ModelError>;

    fn loss_and_dense_gradient(
        &self,
        input: &[Token],
        transformed: &[Token],
        target: &Target,
        cfg: &ObjectiveConfig,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grad = RowGrad::new(self.rows(), self.params().width);
        let loss = self.accumulate(input, transformed, target, cfg, &mut grad, 1.0)?;
        Ok((loss, grad.into_dense()))
    }
}

fn transformed_view(tokens: &[Token], id: &str, epoch: u32, opts: &TrainOptions<'_>) -> Vec<Token> {
    let kind = pick_transform(epoch, id, opts.seed);
    let spec = TransformSpec { kind, ratio: opts.transform_ratio, seed: opts.seed };
    apply_transform(tokens, &spec, opts.replacement_vocab, epoch, id)
}

fn mean_objective<M: Differentiable>(
    model: &M,
    items: &[(&str, &[Token], &Target)],
    opts: &TrainOptions<'_>,
) -> Result<f64, ModelError> {
    let mut scratch = RowGrad::new(model.rows(), model.params().width);
    let mut total = 0.0;
    for (id, tokens, target) in items {
        let ct = transformed_view(tokens, id, 0, opts);
        // scale 0 keeps the scratch buffer unchanged in value
        total += model.accumulate(tokens, &ct, target, &opts.objective, &mut scratch, 0.0)?;
    }
    Ok(total / items.len() as f64)
}

/// Mini-batch gradient descent on the combined objective. Each example gets
/// a freshly drawn transformation per epoch.
pub(crate) fn fit<M: Differentiable>(
    model: &mut M,
    data: TrainingSet<'_>,
    opts: &TrainOptions<'_>,
) -> Result<TrainSummary, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(ModelError::InvalidLearningRate(opts.lr));
    }
    opts.objective.validate()?;
    let items = data.items();
    let initial_loss = mean_objective(model, &items, opts)?;
    let batch_size = opts.batch_size.max(1);
    let mut grad = RowGrad::new(model.rows(), model.params().width);
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 0..opts.epochs {
        let mut rng = rng_for(&seed_parts![opts.seed, "shuffle", epoch]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (id, tokens, target) = items[i];
                let ct = transformed_view(tokens, id, epoch, opts);
                let loss = model.accumulate(tokens, &ct, target, &opts.objective, &mut grad, scale)?;
                if !loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch, example_id: id.to_string() });
                }
            }
            grad.apply(model.params_mut(), opts.lr);
        }
    }

    let final_loss = mean_objective(model, &items, opts)?;
    Ok(TrainSummary { initial_loss, final_loss, epochs: opts.epochs, examples: items.len() })
}
