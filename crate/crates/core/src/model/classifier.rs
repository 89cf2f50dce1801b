use std::collections::BTreeSet;

use super::params::{RowGrad, RowParams};
use super::train::{fit, Differentiable, TrainSummary};
use super::vocab::Vocab;
use super::{ModelError, TaskModel, TrainOptions, TrainingSet};
use crate::code_transform::Token;
use crate::corpus::{TaskKind, Target, UnlabeledExample};
use crate::objective::{
    sce_loss, total_objective_with_grad, Distribution, ObjectiveConfig,
};

/// Softmax regression over token presence (binary bag of tokens).
///
/// Parameters are stored token-major: row `v` holds the class weights of
/// vocabulary entry `v`, and the final row holds the class biases.
#[derive(Debug, Clone, PartialEq)]
pub struct BagOfTokensClassifier {
    vocab: Vocab,
    num_classes: usize,
    params: RowParams,
}

impl BagOfTokensClassifier {
    pub fn new(vocab: Vocab, num_classes: usize, seed: u64) -> Self {
        let params = RowParams::init(vocab.len() + 1, num_classes, seed, "bag-of-tokens");
        Self { vocab, num_classes, params }
    }

    /// All-zero parameters; predicts the uniform distribution.
    pub fn zeros(vocab: Vocab, num_classes: usize) -> Self {
        let rows = vocab.len() + 1;
        Self { vocab, num_classes, params: RowParams { width: num_classes, data: vec![0.0; rows * num_classes] } }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params.data
    }

    fn bias_row(&self) -> usize {
        self.vocab.len()
    }

    fn features(&self, tokens: &[Token]) -> Vec<(usize, f64)> {
        let present: BTreeSet<usize> = tokens.iter().map(|t| self.vocab.id(&t.text)).collect();
        present.into_iter().map(|v| (v, 1.0)).collect()
    }

    fn logits(&self, features: &[(usize, f64)]) -> Vec<f64> {
        let mut z = self.params.row(self.bias_row()).to_vec();
        for &(v, x) in features {
            for (zc, w) in z.iter_mut().zip(self.params.row(v)) {
                *zc += x * w;
            }
        }
        z
    }

    pub fn predict_distribution(&self, tokens: &[Token]) -> Distribution {
        Distribution::from_logits(&self.logits(&self.features(tokens)))
    }

    /// Argmax class (lowest id on ties) and its distribution.
    pub fn predict(&self, tokens: &[Token]) -> (Target, Distribution) {
        let q = self.predict_distribution(tokens);
        (Target::Class(q.argmax()), q)
    }

    fn gold(&self, target: &Target) -> Result<usize, ModelError> {
        match target {
            Target::Class(c) if *c < self.num_classes => Ok(*c),
            Target::Class(c) => Err(ModelError::ClassOutOfRange { class: *c, num_classes: self.num_classes }),
            Target::Tokens(_) => Err(ModelError::TaskMismatch {
                expected: TaskKind::Classification,
                got: TaskKind::Generation,
            }),
        }
    }

    pub fn per_example_loss(&self, tokens: &[Token], target: &Target, clip: f64) -> Result<f64, ModelError> {
        let gold = self.gold(target)?;
        Ok(sce_loss(gold, &self.predict_distribution(tokens), clip)?)
    }

    /// Objective value and dense gradient w.r.t. [`TaskModel::parameters`].
    pub fn loss_and_gradient(
        &self,
        input: &[Token],
        transformed: &[Token],
        target: &Target,
        cfg: &ObjectiveConfig,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.loss_and_dense_gradient(input, transformed, target, cfg)
    }

    /// Objective value alone, for finite-difference checks.
    pub fn objective(
        &self,
        input: &[Token],
        transformed: &[Token],
        target: &Target,
        cfg: &ObjectiveConfig,
    ) -> Result<f64, ModelError> {
        let gold = self.gold(target)?;
        let zx = self.logits(&self.features(input));
        let zc = self.logits(&self.features(transformed));
        Ok(total_objective_with_grad(&[zx], &[zc], &[gold], cfg)?.value)
    }
}

impl Differentiable for BagOfTokensClassifier {
    fn params(&self) -> &RowParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut RowParams {
        &mut self.params
    }

    fn rows(&self) -> usize {
        self.vocab.len() + 1
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
        let gold = self.gold(target)?;
        let fx = self.features(input);
        let fc = self.features(transformed);
        let g = total_objective_with_grad(&[self.logits(&fx)], &[self.logits(&fc)], &[gold], cfg)?;
        let (dx, dc) = (&g.d_logits_x[0], &g.d_logits_ct[0]);
        for &(v, x) in &fx {
            grad.add_scaled(v, dx, scale * x);
        }
        for &(v, x) in &fc {
            grad.add_scaled(v, dc, scale * x);
        }
        let bias = self.bias_row();
        grad.add_scaled(bias, dx, scale);
        grad.add_scaled(bias, dc, scale);
        Ok(g.value)
    }
}

impl TaskModel for BagOfTokensClassifier {
    fn task(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn reinitialize(&mut self, seed: u64) -> Result<(), ModelError> {
        self.params = RowParams::init(self.vocab.len() + 1, self.num_classes, seed, "bag-of-tokens");
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
        Some(&self.params.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_transform::{tokenize, ReplacementVocab};
    use crate::corpus::Example;

    fn ex(id: &str, code: &str, class: usize) -> Example {
        Example { id: id.into(), code: code.into(), tokens: tokenize(code, "java").unwrap(), target: Target::Class(class) }
    }

    fn toy() -> Vec<Example> {
        let mut v = Vec::new();
        for i in 0..20 {
            v.push(ex(&format!("p{i}"), &format!("strcpy ( buf{i} , src ) ;"), 1));
            v.push(ex(&format!("n{i}"), &format!("strncpy ( buf{i} , src , n ) ;"), 0));
        }
        v
    }

    fn vocab_of(data: &[Example]) -> Vocab {
        Vocab::build(data.iter().flat_map(|e| e.tokens.iter().map(|t| t.text.as_str())), true)
    }

    fn opts<'a>(rv: &'a ReplacementVocab, lr: f64, epochs: u32) -> TrainOptions<'a> {
        TrainOptions {
            objective: ObjectiveConfig::default(),
            transform_ratio: 0.15,
            replacement_vocab: rv,
            epochs,
            lr,
            batch_size: 8,
            seed: 5,
            iteration: 0,
        }
    }

    #[test]
    fn zero_weights_predict_uniform_and_class_zero() {
        let m = BagOfTokensClassifier::zeros(Vocab::build(["a"], true), 3);
        let toks = tokenize("a b", "java").unwrap();
        let (target, q) = m.predict(&toks);
        assert_eq!(target, Target::Class(0));
        for p in q.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_two_class_loss() {
        let m = BagOfTokensClassifier::zeros(Vocab::build(["a"], true), 2);
        let toks = tokenize("a", "java").unwrap();
        let loss = m.per_example_loss(&toks, &Target::Class(1), -4.0).unwrap();
        assert!((loss - (std::f64::consts::LN_2 + 2.0)).abs() < 1e-9);
    }

    #[test]
    fn learns_separable_toy_set() {
        let data = toy();
        let rv = ReplacementVocab::from_token_lists(data.iter().map(|e| e.tokens.as_slice()));
        let mut m = BagOfTokensClassifier::new(vocab_of(&data), 2, 1);
        let summary = m.train(TrainingSet::gold_only(&data), &opts(&rv, 1.0, 50)).unwrap();
        assert!(summary.final_loss < summary.initial_loss);
        let correct = data.iter().filter(|e| m.predict(&e.tokens).0 == e.target).count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = toy();
        let rv = ReplacementVocab::from_token_lists(data.iter().map(|e| e.tokens.as_slice()));
        let mut m = BagOfTokensClassifier::new(vocab_of(&data), 2, 1);
        let before = m.clone();
        m.train(TrainingSet::gold_only(&data), &opts(&rv, 0.0, 5)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_reinit_is_reproducible() {
        let data = toy();
        let rv = ReplacementVocab::from_token_lists(data.iter().map(|e| e.tokens.as_slice()));
        let mut a = BagOfTokensClassifier::new(vocab_of(&data), 2, 9);
        let mut b = BagOfTokensClassifier::new(vocab_of(&data), 2, 9);
        a.train(TrainingSet::gold_only(&data), &opts(&rv, 0.5, 7)).unwrap();
        b.train(TrainingSet::gold_only(&data), &opts(&rv, 0.5, 7)).unwrap();
        let bits = |m: &BagOfTokensClassifier| m.parameters().unwrap().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        a.reinitialize(3).unwrap();
        b.reinitialize(3).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn argmax_minimises_sce_over_one_hot_targets() {
        let data = toy();
        let rv = ReplacementVocab::from_token_lists(data.iter().map(|e| e.tokens.as_slice()));
        let mut m = BagOfTokensClassifier::new(vocab_of(&data), 2, 2);
        m.train(TrainingSet::gold_only(&data), &opts(&rv, 0.3, 3)).unwrap();
        for e in &data {
            let (pred, _) = m.predict(&e.tokens);
            let best = m.per_example_loss(&e.tokens, &pred, -4.0).unwrap();
            for c in 0..2 {
                assert!(best <= m.per_example_loss(&e.tokens, &Target::Class(c), -4.0).unwrap());
            }
        }
    }

    #[test]
    fn rejects_wrong_targets() {
        let m = BagOfTokensClassifier::zeros(Vocab::build(["a"], true), 2);
        let toks = tokenize("a", "java").unwrap();
        assert!(matches!(m.per_example_loss(&toks, &Target::Class(2), -4.0), Err(ModelError::ClassOutOfRange { .. })));
        assert!(matches!(
            m.per_example_loss(&toks, &Target::Tokens(vec!["a".into()]), -4.0),
            Err(ModelError::TaskMismatch { .. })
        ));
    }
}
