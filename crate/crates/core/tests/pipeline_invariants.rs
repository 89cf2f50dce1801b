use std::sync::{Arc, Mutex};

use hint_core::model::{BagOfTokensClassifier, ModelError, TaskModel, TrainOptions, TrainSummary, TrainingSet, Vocab};
use hint_core::objective::{total_objective, Distribution, LossKind};
use hint_core::pipeline::{build_model, evaluate, evaluate_predictions, run_with_model, PipelineConfig, PipelineData};
use hint_core::seed::derive_seed;
use hint_core::seed_parts;
use hint_core::synth::{classification_task, ClassificationSpec};
use hint_core::{ObjectiveConfig, TaskKind, Target, UnlabeledExample};

#[derive(Default)]
struct Log {
    train_start: Vec<Vec<f64>>,
    train_end: Vec<Vec<f64>>,
    predict: Vec<Vec<f64>>,
}

/// Classifier that records its parameters at train and predict time.
struct Recording {
    inner: BagOfTokensClassifier,
    log: Arc<Mutex<Log>>,
}

impl TaskModel for Recording {
    fn task(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn reinitialize(&mut self, seed: u64) -> Result<(), ModelError> {
        self.inner.reinitialize(seed)
    }

    fn train(&mut self, data: TrainingSet<'_>, opts: &TrainOptions<'_>) -> Result<TrainSummary, ModelError> {
        self.log.lock().unwrap().train_start.push(self.inner.parameters().unwrap().to_vec());
        let s = self.inner.train(data, opts)?;
        self.log.lock().unwrap().train_end.push(self.inner.parameters().unwrap().to_vec());
        Ok(s)
    }

    fn predict_batch(&self, inputs: &[UnlabeledExample]) -> Result<Vec<Target>, ModelError> {
        let mut log = self.log.lock().unwrap();
        let p = self.inner.parameters().unwrap().to_vec();
        if log.predict.last() != Some(&p) {
            log.predict.push(p);
        }
        drop(log);
        self.inner.predict_batch(inputs)
    }

    fn score_batch(&self, items: &[(UnlabeledExample, Target)], o: &ObjectiveConfig) -> Result<Vec<f64>, ModelError> {
        self.inner.score_batch(items, o)
    }
}

fn data(seed: u64, noise: f64) -> PipelineData {
    let t = classification_task(&ClassificationSpec {
        n_labeled: 40,
        n_unlabeled: 150,
        n_heldout: 0,
        n_families: 15,
        label_noise: noise,
        seed,
        ..Default::default()
    });
    PipelineData { labeled: t.labeled, unlabeled: t.unlabeled, heldout: None }
}

fn recorded_run(cfg: &PipelineConfig, d: &PipelineData, vocab: &Vocab) -> Log {
    let log = Arc::new(Mutex::new(Log::default()));
    let model = Recording { inner: BagOfTokensClassifier::new(vocab.clone(), 2, 99), log: log.clone() };
    run_with_model(cfg, d, Box::new(model)).unwrap();
    Arc::try_unwrap(log).ok().unwrap().into_inner().unwrap()
}

#[test]
fn students_start_from_fresh_initialisation_and_become_teachers() {
    let cfg = PipelineConfig { iterations: 3, epochs: 2, seed: 11, ..Default::default() };
    let vocab = Vocab::build(["strcpy", "strncpy", "(", ")", ";"], true);
    let a = recorded_run(&cfg, &data(1, 0.2), &vocab);
    // different labels change every trained model but not the starting points
    let b = recorded_run(&cfg, &data(1, 0.4), &vocab);

    assert_eq!(a.train_start.len(), 4);
    for (i, start) in a.train_start.iter().enumerate() {
        let mut fresh = BagOfTokensClassifier::new(vocab.clone(), 2, 0);
        fresh.reinitialize(derive_seed(&seed_parts![cfg.seed, "init", i as u32])).unwrap();
        assert_eq!(start.as_slice(), fresh.parameters().unwrap(), "iteration {i}");
        assert_eq!(start, &b.train_start[i]);
    }
    assert_ne!(a.train_end, b.train_end);
    // the model that pseudo-labels in iteration i is the one trained just before
    for (i, p) in a.predict.iter().enumerate() {
        assert_eq!(p, &a.train_end[i]);
    }
    assert_eq!(a.predict.len(), 3);
}

#[test]
fn zero_mu_objective_is_the_supervised_sum() {
    let qx = vec![Distribution::from_logits(&[0.3, -1.0, 2.0]), Distribution::from_logits(&[1.0, 1.0, 0.0])];
    let qc = vec![Distribution::from_logits(&[0.0, 0.5, 0.5]), Distribution::from_logits(&[-2.0, 1.0, 0.1])];
    let gold = [2, 0];
    let cfg = ObjectiveConfig { mu: 0.0, log_zero_clip: -4.0, loss: LossKind::Sce };
    let sce = |q: &[Distribution]| {
        q.iter().zip(&gold).map(|(d, &g)| -d.probs()[g].ln() + 4.0 * (1.0 - d.probs()[g])).sum::<f64>() / 2.0
    };
    let want = sce(&qx) + sce(&qc);
    assert!((total_objective(&qx, &qc, &gold, &cfg).unwrap() - want).abs() < 1e-12);
}

#[test]
fn metrics_match_recomputation_from_dumped_predictions() {
    let t = classification_task(&ClassificationSpec { n_labeled: 60, n_unlabeled: 60, n_heldout: 80, seed: 3, ..Default::default() });
    let d = PipelineData { labeled: t.labeled, unlabeled: t.unlabeled, heldout: Some(t.heldout.clone()) };
    let cfg = PipelineConfig { epochs: 3, ..Default::default() };
    let mut model = build_model(&cfg, &d).unwrap();
    model.reinitialize(5).unwrap();
    let preds = model.predict_batch(&t.heldout.inputs()).unwrap();
    let golds: Vec<Target> = t.heldout.examples().unwrap().iter().map(|e| e.target.clone()).collect();

    let dumped = serde_json::to_string(&preds).unwrap();
    let reloaded: Vec<Target> = serde_json::from_str(&dumped).unwrap();
    let direct = evaluate(model.as_ref(), &t.heldout).unwrap();
    let recomputed = evaluate_predictions(&reloaded, &golds, TaskKind::Classification, Some(2)).unwrap();
    assert_eq!(direct, recomputed);

    let correct = reloaded.iter().zip(&golds).filter(|(p, g)| p == g).count();
    assert!((direct.get("accuracy").unwrap() - correct as f64 / golds.len() as f64).abs() < 1e-12);
}

#[test]
fn constant_model_recall_is_zero_or_one() {
    let t = classification_task(&ClassificationSpec { n_labeled: 10, n_unlabeled: 10, n_heldout: 60, ..Default::default() });
    let golds: Vec<Target> = t.heldout.examples().unwrap().iter().map(|e| e.target.clone()).collect();
    for c in 0..2 {
        let preds = vec![Target::Class(c); golds.len()];
        let r = evaluate_predictions(&preds, &golds, TaskKind::Classification, Some(2)).unwrap();
        assert!([0.0, 1.0].contains(&r.get("recall").unwrap()));
    }
}

#[test]
fn perfect_predictions_score_one() {
    let t = classification_task(&ClassificationSpec { n_labeled: 10, n_unlabeled: 10, n_heldout: 50, ..Default::default() });
    let golds: Vec<Target> = t.heldout.examples().unwrap().iter().map(|e| e.target.clone()).collect();
    let r = evaluate_predictions(&golds, &golds, TaskKind::Classification, Some(2)).unwrap();
    for k in ["accuracy", "precision", "recall", "f1", "macro_f1"] {
        assert_eq!(r.get(k), Some(1.0), "{k}");
    }
}

#[test]
fn config_paths_resolve_relative_to_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let t = classification_task(&ClassificationSpec { n_labeled: 30, n_unlabeled: 60, n_heldout: 20, n_families: 10, ..Default::default() });
    t.write_to(dir.path()).unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{"task":"classification","labeled_path":"labeled.jsonl","unlabeled_path":"unlabeled.jsonl",
            "heldout_path":"heldout.jsonl","iterations":1,"epochs":2}"#,
    )
    .unwrap();
    let cfg = PipelineConfig::from_file(&cfg_path).unwrap();
    assert_eq!(cfg.labeled_path, dir.path().join("labeled.jsonl"));
    let out = hint_core::pipeline::run(&cfg).unwrap();
    assert_eq!(out.report.iterations.len(), 1);
    assert!(out.report.final_heldout.is_some());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"iterationz": 3}"#).unwrap();
    assert!(PipelineConfig::from_file(&p).is_err());
}
