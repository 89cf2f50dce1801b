//! The self-training loop: train a teacher on gold data, pseudo-label the
//! unlabeled pool, keep the trustworthy part, train a fresh student on the
//! union and promote it. Repeat.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code_transform::{ReplacementVocab, DEFAULT_RATIO};
use crate::corpus::{load_dataset, CorpusError, Dataset, Example, PseudoExample, Target, TaskKind, UnlabeledExample};
use crate::metrics::{evaluate_classification, evaluate_generation, EvalResult, MetricsError};
use crate::model::{
    AdapterModel, BagOfTokensClassifier, ModelError, TaskModel, TokenTranslationModel, TrainOptions, TrainSummary,
    TrainingSet, Vocab,
};
use crate::objective::{LossKind, ObjectiveConfig, ObjectiveError};
use crate::retrieval::{levenshtein, ned, Bm25Index, RetrievalError, DEFAULT_B, DEFAULT_K1};
use crate::seed::{derive_seed, rng_for};
use crate::seed_parts;
use crate::selection::{select, SelectionConfig, SelectionError, SelectionMode, SelectionReport, K_GRID};

/// Inputs per parallel prediction/scoring chunk for built-in models.
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("labeled set is empty")]
    EmptyLabeledSet,
    #[error("unlabeled set is empty")]
    EmptyUnlabeledSet,
    #[error("{what} has {got:?} data but the run is configured for {expected:?}")]
    TaskMismatch { what: String, expected: TaskKind, got: TaskKind },
    #[error("{0} must contain labeled records")]
    NotLabeled(String),
    #[error("cannot read config {path}: {message}")]
    ConfigIo { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<ObjectiveError> for PipelineError {
    fn from(e: ObjectiveError) -> Self {
        PipelineError::InvalidConfig(e.to_string())
    }
}

/// Which model plays teacher and student.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelSpec {
    BuiltinClassifier,
    BuiltinTranslator,
    Adapter(PathBuf),
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::BuiltinClassifier => f.write_str("builtin-classifier"),
            ModelSpec::BuiltinTranslator => f.write_str("builtin-translator"),
            ModelSpec::Adapter(p) => write!(f, "adapter:{}", p.display()),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "builtin-classifier" => Ok(ModelSpec::BuiltinClassifier),
            "builtin-translator" => Ok(ModelSpec::BuiltinTranslator),
            _ => match s.strip_prefix("adapter:") {
                Some(p) if !p.is_empty() => Ok(ModelSpec::Adapter(PathBuf::from(p))),
                _ => Err(format!(
                    "unknown model `{s}`; expected builtin-classifier, builtin-translator or adapter:<exec>"
                )),
            },
        }
    }
}

impl TryFrom<String> for ModelSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ModelSpec> for String {
    fn from(m: ModelSpec) -> String {
        m.to_string()
    }
}

/// Variants compared by [`compare_baselines`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Uniformly random subset of the same size as the full selection.
    RandomSelection,
    /// Train on every pseudo-labeled example.
    NoSelection,
    NoLossBased,
    NoRetrievalBased,
    /// Plain cross entropy instead of SCE.
    CeLoss,
    /// `μ = 0`.
    NoConsistency,
    /// Classic pseudo-labeling: no selection, cross entropy, no consistency.
    NaivePseudoLabel,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::RandomSelection,
        Ablation::NoSelection,
        Ablation::NoLossBased,
        Ablation::NoRetrievalBased,
        Ablation::CeLoss,
        Ablation::NoConsistency,
        Ablation::NaivePseudoLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::RandomSelection => "random-selection",
            Ablation::NoSelection => "no-selection",
            Ablation::NoLossBased => "no-loss-based",
            Ablation::NoRetrievalBased => "no-retrieval-based",
            Ablation::CeLoss => "ce-loss",
            Ablation::NoConsistency => "no-consistency",
            Ablation::NaivePseudoLabel => "naive-pseudo-label",
        }
    }

    fn objective(self, base: ObjectiveConfig) -> ObjectiveConfig {
        match self {
            Ablation::CeLoss => ObjectiveConfig { loss: LossKind::Ce, ..base },
            Ablation::NoConsistency => ObjectiveConfig { mu: 0.0, ..base },
            Ablation::NaivePseudoLabel => ObjectiveConfig { loss: LossKind::Ce, mu: 0.0, ..base },
            _ => base,
        }
    }

    fn selection(self, base: SelectionConfig) -> SelectionConfig {
        match self {
            Ablation::NoLossBased => SelectionConfig { mode: SelectionMode::RetrievalOnly, ..base },
            Ablation::NoRetrievalBased => SelectionConfig { mode: SelectionMode::LossOnly, ..base },
            _ => base,
        }
    }

    fn keeps_everything(self) -> bool {
        matches!(self, Ablation::NoSelection | Ablation::NaivePseudoLabel)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
            format!("unknown ablation `{s}`; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskKind,
    pub labeled_path: PathBuf,
    pub unlabeled_path: PathBuf,
    pub heldout_path: Option<PathBuf>,
    pub iterations: u32,
    pub selection: SelectionConfig,
    pub objective: ObjectiveConfig,
    pub transform_ratio: f64,
    pub model: ModelSpec,
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Return the student with the best held-out score instead of the last.
    pub select_best_iteration: bool,
    pub ablation: Ablation,
    pub adapter_timeout_secs: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            labeled_path: PathBuf::new(),
            unlabeled_path: PathBuf::new(),
            heldout_path: None,
            iterations: 5,
            selection: SelectionConfig::default(),
            objective: ObjectiveConfig::default(),
            transform_ratio: DEFAULT_RATIO,
            model: ModelSpec::BuiltinClassifier,
            epochs: 20,
            lr: 0.5,
            batch_size: 16,
            seed: 0,
            select_best_iteration: false,
            ablation: Ablation::Full,
            adapter_timeout_secs: 600,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative data paths are resolved against the
    /// config file's directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let io = |message: String| PipelineError::ConfigIo { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.labeled_path);
        resolve(&mut cfg.unlabeled_path);
        if let Some(h) = cfg.heldout_path.as_mut() {
            resolve(h);
        }
        if let ModelSpec::Adapter(exec) = &mut cfg.model {
            if exec.components().count() > 1 {
                resolve(exec);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        self.selection.validate()?;
        self.objective.validate()?;
        if !(0.0..=1.0).contains(&self.transform_ratio) {
            return bad(format!("transform_ratio {} not in [0, 1]", self.transform_ratio));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and >= 0", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        match (&self.model, self.task) {
            (ModelSpec::BuiltinClassifier, TaskKind::Generation) | (ModelSpec::BuiltinTranslator, TaskKind::Classification) => {
                bad(format!("model {} cannot handle {:?}", self.model, self.task))
            }
            _ => Ok(()),
        }
    }
}

/// Datasets of one run. `unlabeled` may hold labeled records, in which case
/// their targets are hidden from the loop and only used for quality stats.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub heldout: Option<Dataset>,
}

impl PipelineData {
    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            labeled: load_dataset(&cfg.labeled_path, cfg.task)?,
            unlabeled: load_dataset(&cfg.unlabeled_path, cfg.task)?,
            heldout: cfg.heldout_path.as_deref().map(|p| load_dataset(p, cfg.task)).transpose()?,
        })
    }

    fn check(&self, task: TaskKind) -> Result<&[Example], PipelineError> {
        for (what, ds) in [("labeled set", Some(&self.labeled)), ("unlabeled set", Some(&self.unlabeled)), ("heldout set", self.heldout.as_ref())] {
            if let Some(ds) = ds {
                if ds.kind != task {
                    return Err(PipelineError::TaskMismatch { what: what.into(), expected: task, got: ds.kind });
                }
            }
        }
        let labeled = self.labeled.examples().ok_or_else(|| PipelineError::NotLabeled("labeled set".into()))?;
        if labeled.is_empty() {
            return Err(PipelineError::EmptyLabeledSet);
        }
        if self.unlabeled.is_empty() {
            return Err(PipelineError::EmptyUnlabeledSet);
        }
        if let Some(h) = &self.heldout {
            if h.examples().is_none() {
                return Err(PipelineError::NotLabeled("heldout set".into()));
            }
        }
        Ok(labeled)
    }

    fn num_classes(&self) -> usize {
        let declared = [Some(&self.labeled), Some(&self.unlabeled), self.heldout.as_ref()]
            .into_iter()
            .flatten()
            .filter_map(|d| d.num_classes)
            .max();
        let observed = [Some(&self.labeled), self.heldout.as_ref()]
            .into_iter()
            .flatten()
            .filter_map(|d| d.examples())
            .flatten()
            .filter_map(|e| e.target.as_class())
            .max()
            .map_or(0, |c| c + 1);
        declared.unwrap_or(0).max(observed).max(2)
    }
}

/// Pseudo-label quality against the hidden gold targets of `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoQuality {
    /// Mean `ned(gold, pseudo)` over every pseudo-labeled example.
    pub mean_ned_all: f64,
    /// Same over the selected set; absent when nothing was selected.
    pub mean_ned_selected: Option<f64>,
    /// Mean token edit distance (class labels count 0 or 1).
    pub mean_edit_all: f64,
    pub mean_edit_selected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub pseudo_count: usize,
    pub selected_size: usize,
    pub retrieval_accept_count: usize,
    pub loss_accept_count: usize,
    pub student_training: TrainSummary,
    pub heldout: Option<EvalResult>,
    pub pseudo_quality: Option<PseudoQuality>,
}

/// Everything written to the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: Ablation,
    pub seed: u64,
    pub teacher_heldout: Option<EvalResult>,
    pub iterations: Vec<IterationReport>,
    /// Iteration whose student is returned.
    pub returned_iteration: u32,
    pub final_heldout: Option<EvalResult>,
}

pub struct RunOutput {
    pub model: Box<dyn TaskModel>,
    pub report: RunReport,
    /// Selection decisions per iteration, in iteration order.
    pub selections: Vec<SelectionReport>,
    /// Ids of the selected pseudo examples per iteration.
    pub selected_ids: Vec<Vec<String>>,
}

impl fmt::Debug for RunOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOutput").field("report", &self.report).finish_non_exhaustive()
    }
}

fn vocab_tokens<'a>(data: &'a PipelineData, unlabeled: &'a [UnlabeledExample]) -> impl Iterator<Item = &'a [crate::code_transform::Token]> {
    data.labeled
        .examples()
        .unwrap_or_default()
        .iter()
        .map(|e| e.tokens.as_slice())
        .chain(unlabeled.iter().map(|u| u.tokens.as_slice()))
}

/// Builds the configured model. Built-in input vocabularies cover `D ∪ U`;
/// the translator's output vocabulary covers the gold targets of `D`.
pub fn build_model(cfg: &PipelineConfig, data: &PipelineData) -> Result<Box<dyn TaskModel>, PipelineError> {
    let unlabeled = data.unlabeled.inputs();
    let input_vocab = || {
        Vocab::build(vocab_tokens(data, &unlabeled).flat_map(|ts| ts.iter().map(|t| t.text.as_str())), true)
    };
    let init = derive_seed(&seed_parts![cfg.seed, "init", 0u32]);
    Ok(match &cfg.model {
        ModelSpec::BuiltinClassifier => Box::new(BagOfTokensClassifier::new(input_vocab(), data.num_classes(), init)),
        ModelSpec::BuiltinTranslator => {
            let gold = data.labeled.examples().unwrap_or_default();
            let out = Vocab::build(gold.iter().filter_map(|e| e.target.as_tokens()).flatten().map(String::as_str), false);
            Box::new(TokenTranslationModel::new(input_vocab(), out, init))
        }
        ModelSpec::Adapter(exec) => {
            let classes = (cfg.task == TaskKind::Classification).then(|| data.num_classes());
            Box::new(
                AdapterModel::new(exec, cfg.task, classes)
                    .map_err(ModelError::from)?
                    .with_timeout(Duration::from_secs(cfg.adapter_timeout_secs)),
            )
        }
    })
}

fn parallel(cfg: &PipelineConfig) -> bool {
    !matches!(cfg.model, ModelSpec::Adapter(_))
}

fn predict_all(model: &dyn TaskModel, inputs: &[UnlabeledExample], par: bool) -> Result<Vec<Target>, ModelError> {
    if !par {
        return model.predict_batch(inputs);
    }
    let chunks: Vec<Vec<Target>> = inputs.par_chunks(CHUNK).map(|c| model.predict_batch(c)).collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn score_all(
    model: &dyn TaskModel,
    items: &[(UnlabeledExample, Target)],
    objective: &ObjectiveConfig,
    par: bool,
) -> Result<Vec<f64>, ModelError> {
    if !par {
        return model.score_batch(items, objective);
    }
    let chunks: Vec<Vec<f64>> =
        items.par_chunks(CHUNK).map(|c| model.score_batch(c, objective)).collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Held-out metrics of `model`: P/R/F1 and accuracy for classification;
/// EM, LCS, token edit distance, BLEU-4 and ROUGE-L for generation.
pub fn evaluate(model: &dyn TaskModel, heldout: &Dataset) -> Result<EvalResult, PipelineError> {
    evaluate_with(model, heldout, true)
}

fn evaluate_with(model: &dyn TaskModel, heldout: &Dataset, par: bool) -> Result<EvalResult, PipelineError> {
    if heldout.kind != model.task() {
        return Err(PipelineError::TaskMismatch { what: "heldout set".into(), expected: model.task(), got: heldout.kind });
    }
    let gold = heldout.examples().ok_or_else(|| PipelineError::NotLabeled("heldout set".into()))?;
    if gold.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    let preds = predict_all(model, &heldout.inputs(), par)?;
    let golds: Vec<Target> = gold.iter().map(|e| e.target.clone()).collect();
    evaluate_predictions(&preds, &golds, heldout.kind, heldout.num_classes)
}

/// Metrics from already computed predictions.
pub fn evaluate_predictions(
    preds: &[Target],
    golds: &[Target],
    kind: TaskKind,
    num_classes: Option<usize>,
) -> Result<EvalResult, PipelineError> {
    let mismatch = |got: TaskKind| PipelineError::TaskMismatch { what: "predictions".into(), expected: kind, got };
    match kind {
        TaskKind::Classification => {
            let to_class = |t: &Target| t.as_class().ok_or_else(|| mismatch(t.kind()));
            let p: Vec<usize> = preds.iter().map(to_class).collect::<Result<_, _>>()?;
            let g: Vec<usize> = golds.iter().map(to_class).collect::<Result<_, _>>()?;
            let observed = p.iter().chain(&g).max().map_or(0, |c| c + 1);
            Ok(evaluate_classification(&p, &g, num_classes.unwrap_or(0).max(observed).max(2))?)
        }
        TaskKind::Generation => {
            let to_seq = |t: &Target| t.as_tokens().map(<[String]>::to_vec).ok_or_else(|| mismatch(t.kind()));
            let p: Vec<Vec<String>> = preds.iter().map(to_seq).collect::<Result<_, _>>()?;
            let g: Vec<Vec<String>> = golds.iter().map(to_seq).collect::<Result<_, _>>()?;
            Ok(evaluate_generation(&p, &g)?)
        }
    }
}

fn target_edit(a: &Target, b: &Target) -> f64 {
    match (a, b) {
        (Target::Tokens(x), Target::Tokens(y)) => levenshtein(x, y) as f64,
        _ => f64::from(u8::from(a != b)),
    }
}

fn quality(
    gold: &[Example],
    pseudo: &[PseudoExample],
    selected: &[PseudoExample],
) -> Result<PseudoQuality, PipelineError> {
    let by_id: std::collections::HashMap<&str, &Target> = gold.iter().map(|e| (e.id.as_str(), &e.target)).collect();
    let stats = |set: &[PseudoExample]| -> Result<Option<(f64, f64)>, PipelineError> {
        if set.is_empty() {
            return Ok(None);
        }
        let (mut n, mut e) = (0.0, 0.0);
        for p in set {
            let g = by_id[p.id()];
            n += ned(g, &p.pseudo_target)?;
            e += target_edit(g, &p.pseudo_target);
        }
        let len = set.len() as f64;
        Ok(Some((n / len, e / len)))
    };
    let (mean_ned_all, mean_edit_all) = stats(pseudo)?.unwrap_or_default();
    let sel = stats(selected)?;
    Ok(PseudoQuality {
        mean_ned_all,
        mean_ned_selected: sel.map(|s| s.0),
        mean_edit_all,
        mean_edit_selected: sel.map(|s| s.1),
    })
}

fn everything_report(pseudo: &[PseudoExample]) -> SelectionReport {
    SelectionReport {
        decisions: Vec::new(),
        selected_count: pseudo.len(),
        retrieval_accept_count: 0,
        loss_accept_count: 0,
        mean_teacher_loss_selected: (!pseudo.is_empty())
            .then(|| pseudo.iter().map(|p| p.teacher_loss).sum::<f64>() / pseudo.len() as f64),
    }
}

fn random_subset(pseudo: &[PseudoExample], size: usize, seed: u64) -> Vec<PseudoExample> {
    let mut rng = rng_for(&seed_parts![seed, "random-selection"]);
    let mut keep = index::sample(&mut rng, pseudo.len(), size.min(pseudo.len())).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| pseudo[i].clone()).collect()
}

/// Best held-out score among students; ties go to the earliest iteration.
fn best_iteration(reports: &[IterationReport], task: TaskKind) -> Option<u32> {
    let key = match task {
        TaskKind::Classification => "f1",
        TaskKind::Generation => "bleu4",
    };
    let mut best: Option<(u32, f64)> = None;
    for r in reports {
        if let Some(v) = r.heldout.as_ref().and_then(|h| h.get(key)) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((r.iteration, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Loads the datasets named in `cfg` and runs the loop.
pub fn run(cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let data = PipelineData::load(cfg)?;
    run_with_data(cfg, &data)
}

pub fn run_with_data(cfg: &PipelineConfig, data: &PipelineData) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    data.check(cfg.task)?;
    let model = build_model(cfg, data)?;
    run_with_model(cfg, data, model)
}

/// Runs the loop with a caller-supplied model (it is reinitialized first).
pub fn run_with_model(
    cfg: &PipelineConfig,
    data: &PipelineData,
    mut model: Box<dyn TaskModel>,
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let labeled = data.check(cfg.task)?;
    if model.task() != cfg.task {
        return Err(ModelError::TaskMismatch { expected: cfg.task, got: model.task() }.into());
    }
    let par = parallel(cfg);
    let objective = cfg.ablation.objective(cfg.objective);
    let selection_cfg = cfg.ablation.selection(cfg.selection);
    let unlabeled = data.unlabeled.inputs();
    let unlabeled_gold = data.unlabeled.examples();
    let replacement = ReplacementVocab::from_token_lists(vocab_tokens(data, &unlabeled));
    let index = Bm25Index::build(labeled, DEFAULT_K1, DEFAULT_B)?;

    let options = |iteration: u32| TrainOptions {
        objective,
        transform_ratio: cfg.transform_ratio,
        replacement_vocab: &replacement,
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: derive_seed(&seed_parts![cfg.seed, "train", iteration]),
        iteration,
    };
    let init_seed = |iteration: u32| derive_seed(&seed_parts![cfg.seed, "init", iteration]);
    let heldout_eval = |m: &dyn TaskModel| data.heldout.as_ref().map(|h| evaluate_with(m, h, par)).transpose();

    model.reinitialize(init_seed(0))?;
    model.train(TrainingSet::gold_only(labeled), &options(0))?;
    let teacher_heldout = heldout_eval(model.as_ref())?;

    let mut reports = Vec::new();
    let mut selections = Vec::new();
    let mut selected_sets: Vec<Vec<PseudoExample>> = Vec::new();
    for i in 1..=cfg.iterations {
        let targets = predict_all(model.as_ref(), &unlabeled, par)?;
        let items: Vec<(UnlabeledExample, Target)> = unlabeled.iter().cloned().zip(targets).collect();
        let losses = score_all(model.as_ref(), &items, &cfg.objective, par)?;
        let pseudo: Vec<PseudoExample> = items
            .into_iter()
            .zip(losses)
            .map(|((base, pseudo_target), teacher_loss)| PseudoExample { base, pseudo_target, teacher_loss, iteration: i })
            .collect();

        let select_seed = derive_seed(&seed_parts![cfg.seed, "select", i]);
        let (selected, report) = match cfg.ablation {
            a if a.keeps_everything() => (pseudo.clone(), everything_report(&pseudo)),
            Ablation::RandomSelection => {
                let (hybrid, _) = select(&pseudo, labeled, &index, &selection_cfg, select_seed)?;
                let chosen = random_subset(&pseudo, hybrid.len(), select_seed);
                let report = everything_report(&chosen);
                (chosen, report)
            }
            _ => select(&pseudo, labeled, &index, &selection_cfg, select_seed)?,
        };

        model.reinitialize(init_seed(i))?;
        let summary = model.train(TrainingSet { gold: labeled, pseudo: &selected }, &options(i))?;
        let pseudo_quality = unlabeled_gold.map(|g| quality(g, &pseudo, &selected)).transpose()?;
        reports.push(IterationReport {
            iteration: i,
            pseudo_count: pseudo.len(),
            selected_size: selected.len(),
            retrieval_accept_count: report.retrieval_accept_count,
            loss_accept_count: report.loss_accept_count,
            student_training: summary,
            heldout: heldout_eval(model.as_ref())?,
            pseudo_quality,
        });
        selections.push(report);
        selected_sets.push(selected);
    }

    let mut returned = cfg.iterations;
    if cfg.select_best_iteration {
        if let Some(best) = best_iteration(&reports, cfg.task) {
            if best != returned {
                // Student training is deterministic, so retraining reproduces it.
                model.reinitialize(init_seed(best))?;
                let pseudo = &selected_sets[best as usize - 1];
                model.train(TrainingSet { gold: labeled, pseudo }, &options(best))?;
                returned = best;
            }
        }
    }
    let final_heldout = reports[returned as usize - 1].heldout.clone();
    let selected_ids = selected_sets.iter().map(|s| s.iter().map(|p| p.id().to_string()).collect()).collect();
    Ok(RunOutput {
        model,
        report: RunReport {
            ablation: cfg.ablation,
            seed: cfg.seed,
            teacher_heldout,
            iterations: reports,
            returned_iteration: returned,
            final_heldout,
        },
        selections,
        selected_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub selected_sizes: Vec<usize>,
    pub final_heldout: Option<EvalResult>,
}

/// Runs every [`Ablation`] with the same seed schedule.
pub fn compare_baselines(cfg: &PipelineConfig, data: &PipelineData) -> Result<Vec<VariantResult>, PipelineError> {
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let out = run_with_data(&PipelineConfig { ablation, ..cfg.clone() }, data)?;
            Ok(VariantResult {
                variant: ablation.name().to_string(),
                selected_sizes: out.report.iterations.iter().map(|r| r.selected_size).collect(),
                final_heldout: out.report.final_heldout,
            })
        })
        .collect()
}

/// Runs the configured pipeline once per value of the `K` grid, serially.
pub fn sweep_k(cfg: &PipelineConfig, data: &PipelineData) -> Result<Vec<(f64, RunReport)>, PipelineError> {
    K_GRID
        .iter()
        .map(|&k| {
            let selection = SelectionConfig { top_k_percent: k, ..cfg.selection };
            let out = run_with_data(&PipelineConfig { selection, ..cfg.clone() }, data)?;
            Ok((k, out.report))
        })
        .collect()
}
