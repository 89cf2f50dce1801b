//! Dataset model and JSONL serialization.
//!
//! A dataset file is UTF-8 JSONL. An optional first line
//! `{"type":"meta","task":...,"num_classes":C}` declares the task; every
//! other line is a record `{"id","code","target"?,"pseudo"?,"teacher_loss"?,"iteration"?}`.
//! A record without `target` is unlabeled.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::code_transform::{KeywordTable, Token, TransformError};
use crate::seed::rng_for;
use crate::seed_parts;

pub const DEFAULT_LANGUAGE: &str = "java";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line_no}: {message}")]
    MalformedRecord { line_no: usize, message: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("target kind mismatch: {0}")]
    TargetKindMismatch(String),
    #[error("I/O failure on {path}: {message}")]
    IoFailure { path: String, message: String },
    #[error("nothing to balance")]
    EmptyInput,
}

fn io_err(path: &Path, e: std::io::Error) -> CorpusError {
    CorpusError::IoFailure { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Tokens(Vec<String>),
}

impl Target {
    pub fn kind(&self) -> TaskKind {
        match self {
            Target::Class(_) => TaskKind::Classification,
            Target::Tokens(_) => TaskKind::Generation,
        }
    }

    pub fn as_class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Tokens(_) => None,
        }
    }

    pub fn as_tokens(&self) -> Option<&[String]> {
        match self {
            Target::Tokens(t) => Some(t),
            Target::Class(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledExample {
    pub id: String,
    pub code: String,
    pub tokens: Vec<Token>,
}

impl UnlabeledExample {
    pub fn token_texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub code: String,
    pub tokens: Vec<Token>,
    pub target: Target,
}

impl Example {
    pub fn input(&self) -> UnlabeledExample {
        UnlabeledExample { id: self.id.clone(), code: self.code.clone(), tokens: self.tokens.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoExample {
    pub base: UnlabeledExample,
    pub pseudo_target: Target,
    pub teacher_loss: f64,
    pub iteration: u32,
}

impl PseudoExample {
    pub fn id(&self) -> &str {
        &self.base.id
    }

    /// The example as training data, with the pseudo label as its target.
    pub fn as_example(&self) -> Example {
        Example {
            id: self.base.id.clone(),
            code: self.base.code.clone(),
            tokens: self.base.tokens.clone(),
            target: self.pseudo_target.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Labeled(Vec<Example>),
    Unlabeled(Vec<UnlabeledExample>),
    Pseudo(Vec<PseudoExample>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Labeled(v) => v.len(),
            Records::Unlabeled(v) => v.len(),
            Records::Pseudo(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub num_classes: Option<usize>,
    pub language: String,
    pub records: Records,
}

impl Dataset {
    pub fn labeled(kind: TaskKind, num_classes: Option<usize>, examples: Vec<Example>) -> Self {
        Self {
            kind,
            num_classes,
            language: DEFAULT_LANGUAGE.to_string(),
            records: Records::Labeled(examples),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn examples(&self) -> Option<&[Example]> {
        match &self.records {
            Records::Labeled(v) => Some(v),
            _ => None,
        }
    }

    /// Inputs of every record, whatever its kind.
    pub fn inputs(&self) -> Vec<UnlabeledExample> {
        match &self.records {
            Records::Labeled(v) => v.iter().map(Example::input).collect(),
            Records::Unlabeled(v) => v.clone(),
            Records::Pseudo(v) => v.iter().map(|p| p.base.clone()).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    #[serde(rename = "type")]
    kind_tag: String,
    task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    language: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RecordLine {
    pub id: String,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
}

impl RecordLine {
    pub(crate) fn from_example(e: &Example) -> Self {
        Self {
            id: e.id.clone(),
            code: e.code.clone(),
            target: Some(e.target.clone()),
            pseudo: None,
            teacher_loss: None,
            iteration: None,
        }
    }

    pub(crate) fn from_unlabeled(e: &UnlabeledExample) -> Self {
        Self {
            id: e.id.clone(),
            code: e.code.clone(),
            target: None,
            pseudo: None,
            teacher_loss: None,
            iteration: None,
        }
    }

    pub(crate) fn from_pseudo(p: &PseudoExample) -> Self {
        Self {
            id: p.base.id.clone(),
            code: p.base.code.clone(),
            target: Some(p.pseudo_target.clone()),
            pseudo: Some(true),
            teacher_loss: Some(p.teacher_loss),
            iteration: Some(p.iteration),
        }
    }
}

/// Loads with the built-in keyword lists.
pub fn load_dataset(path: &Path, kind: TaskKind) -> Result<Dataset, CorpusError> {
    load_dataset_with(path, kind, &KeywordTable::default())
}

pub fn load_dataset_with(
    path: &Path,
    kind: TaskKind,
    keywords: &KeywordTable,
) -> Result<Dataset, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut num_classes = None;
    let mut language = DEFAULT_LANGUAGE.to_string();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut pseudo = Vec::new();
    let mut seen = HashSet::new();
    let mut data_lines = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::MalformedRecord { line_no, message };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if value.get("type").and_then(Value::as_str) == Some("meta") {
            if data_lines > 0 {
                return Err(malformed("meta line must precede data records".into()));
            }
            let meta: MetaLine =
                serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            if meta.task != kind {
                return Err(CorpusError::TargetKindMismatch(format!(
                    "file declares {:?}, caller expects {kind:?}",
                    meta.task
                )));
            }
            num_classes = meta.num_classes;
            if let Some(lang) = meta.language {
                language = lang;
            }
            continue;
        }
        data_lines += 1;
        let rec: RecordLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId(rec.id));
        }
        let tokens = keywords.tokenize(&rec.code, &language).map_err(|e| match e {
            TransformError::EmptyInput => malformed(format!("record `{}` has empty code", rec.id)),
            other => malformed(other.to_string()),
        })?;
        if let Some(target) = &rec.target {
            check_target(target, kind, num_classes).map_err(|m| {
                CorpusError::TargetKindMismatch(format!("line {line_no}, record `{}`: {m}", rec.id))
            })?;
        }
        let base = UnlabeledExample { id: rec.id, code: rec.code, tokens };
        match (rec.target, rec.pseudo.unwrap_or(false)) {
            (None, true) => return Err(malformed("pseudo record without target".into())),
            (None, false) => unlabeled.push(base),
            (Some(target), false) => labeled.push(Example {
                id: base.id,
                code: base.code,
                tokens: base.tokens,
                target,
            }),
            (Some(target), true) => {
                let teacher_loss = rec.teacher_loss.unwrap_or(0.0);
                if teacher_loss.is_nan() || teacher_loss < 0.0 {
                    return Err(malformed(format!("teacher_loss {teacher_loss} is negative")));
                }
                pseudo.push(PseudoExample {
                    base,
                    pseudo_target: target,
                    teacher_loss,
                    iteration: rec.iteration.unwrap_or(1),
                })
            }
        }
        let kinds_present =
            [!labeled.is_empty(), !unlabeled.is_empty(), !pseudo.is_empty()].iter().filter(|b| **b).count();
        if kinds_present > 1 {
            return Err(malformed("dataset mixes labeled, unlabeled and pseudo records".into()));
        }
    }

    let records = if !unlabeled.is_empty() {
        Records::Unlabeled(unlabeled)
    } else if !pseudo.is_empty() {
        Records::Pseudo(pseudo)
    } else {
        Records::Labeled(labeled)
    };
    Ok(Dataset { kind, num_classes, language, records })
}

fn check_target(target: &Target, kind: TaskKind, num_classes: Option<usize>) -> Result<(), String> {
    match (target, kind) {
        (Target::Class(c), TaskKind::Classification) => match num_classes {
            Some(n) if *c >= n => Err(format!("class {c} >= num_classes {n}")),
            _ => Ok(()),
        },
        (Target::Tokens(t), TaskKind::Generation) if t.is_empty() => {
            Err("empty token sequence".into())
        }
        (Target::Tokens(_), TaskKind::Generation) => Ok(()),
        (t, k) => Err(format!("{:?} target in a {k:?} dataset", t.kind())),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_dataset<W: Write>(ds: &Dataset, w: &mut W) -> std::io::Result<()> {
    let meta = MetaLine {
        kind_tag: "meta".into(),
        task: ds.kind,
        num_classes: ds.num_classes,
        language: Some(ds.language.clone()),
    };
    writeln!(w, "{}", serde_json::to_string(&meta)?)?;
    let lines: Vec<RecordLine> = match &ds.records {
        Records::Labeled(v) => v.iter().map(RecordLine::from_example).collect(),
        Records::Unlabeled(v) => v.iter().map(RecordLine::from_unlabeled).collect(),
        Records::Pseudo(v) => v.iter().map(RecordLine::from_pseudo).collect(),
    };
    for line in lines {
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// Balances classes by sampling every class down to the smallest class count.
///
/// Classes are emitted in ascending id order; within a class the kept
/// examples keep their input order.
pub fn downsample_balance(
    selected_per_class: &BTreeMap<usize, Vec<PseudoExample>>,
    seed: u64,
) -> Result<Vec<PseudoExample>, CorpusError> {
    if selected_per_class.values().all(Vec::is_empty) {
        return Err(CorpusError::EmptyInput);
    }
    let m = selected_per_class.values().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(m * selected_per_class.len());
    for (&class, examples) in selected_per_class {
        let mut rng = rng_for(&seed_parts![seed, "downsample", class]);
        let mut keep = index::sample(&mut rng, examples.len(), m).into_vec();
        keep.sort_unstable();
        out.extend(keep.into_iter().map(|i| examples[i].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn pseudo(id: &str, class: usize) -> PseudoExample {
        PseudoExample {
            base: UnlabeledExample {
                id: id.into(),
                code: "x".into(),
                tokens: vec![Token::new("x", crate::code_transform::TokenKind::Identifier)],
            },
            pseudo_target: Target::Class(class),
            teacher_loss: 0.1,
            iteration: 1,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_classification_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            concat!(
                r#"{"type":"meta","task":"classification","num_classes":2}"#, "\n",
                r#"{"id":"a","code":"int f() { return 1; }","target":0}"#, "\n",
                r#"{"id":"b","code":"void g() {}","target":1}"#, "\n",
                r#"{"id":"c","code":"x = y;","target":1}"#, "\n",
            ),
        );
        let ds = load_dataset(&p, TaskKind::Classification).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, Some(2));
        let ex = ds.examples().unwrap();
        assert_eq!(ex[0].tokens[0].text, "int");
        assert_eq!(ex[2].target, Target::Class(1));
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            "{\"id\":\"a1\",\"code\":\"x\",\"target\":0}\n{\"id\":\"a1\",\"code\":\"y\",\"target\":1}\n",
        );
        match load_dataset(&p, TaskKind::Classification) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "a1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.jsonl", "");
        let ds = load_dataset(&p, TaskKind::Generation).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn malformed_and_mismatched_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "m.jsonl", "{\"id\":\"a\",\"code\":\"x\",\"target\":0}\nnot json\n");
        assert!(matches!(
            load_dataset(&p, TaskKind::Classification),
            Err(CorpusError::MalformedRecord { line_no: 2, .. })
        ));
        let p = write(&dir, "k.jsonl", "{\"id\":\"a\",\"code\":\"x\",\"target\":[\"t\"]}\n");
        assert!(matches!(
            load_dataset(&p, TaskKind::Classification),
            Err(CorpusError::TargetKindMismatch(_))
        ));
        let p = write(
            &dir,
            "n.jsonl",
            "{\"type\":\"meta\",\"task\":\"classification\",\"num_classes\":2}\n{\"id\":\"a\",\"code\":\"x\",\"target\":5}\n",
        );
        assert!(matches!(
            load_dataset(&p, TaskKind::Classification),
            Err(CorpusError::TargetKindMismatch(_))
        ));
        let p = write(&dir, "mix.jsonl", "{\"id\":\"a\",\"code\":\"x\",\"target\":0}\n{\"id\":\"b\",\"code\":\"y\"}\n");
        assert!(matches!(
            load_dataset(&p, TaskKind::Classification),
            Err(CorpusError::MalformedRecord { line_no: 2, .. })
        ));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let ds = Dataset::labeled(TaskKind::Classification, Some(2), vec![]);
        let err = save_dataset(&ds, Path::new("/nonexistent-dir/sub/out.jsonl")).unwrap_err();
        assert!(matches!(err, CorpusError::IoFailure { .. }));
    }

    #[test]
    fn downsample_to_smallest_class() {
        let mut map = BTreeMap::new();
        map.insert(0, (0..10).map(|i| pseudo(&format!("a{i}"), 0)).collect::<Vec<_>>());
        map.insert(1, (0..4).map(|i| pseudo(&format!("b{i}"), 1)).collect::<Vec<_>>());
        let out = downsample_balance(&map, 3).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out.iter().filter(|p| p.pseudo_target == Target::Class(0)).count(), 4);
        assert_eq!(out, downsample_balance(&map, 3).unwrap());

        let mut even = BTreeMap::new();
        even.insert(0, (0..5).map(|i| pseudo(&format!("a{i}"), 0)).collect::<Vec<_>>());
        even.insert(1, (0..5).map(|i| pseudo(&format!("b{i}"), 1)).collect::<Vec<_>>());
        assert_eq!(downsample_balance(&even, 0).unwrap().len(), 10);
    }

    #[test]
    fn downsample_zero_class_and_empty() {
        let mut map = BTreeMap::new();
        map.insert(0, vec![pseudo("a", 0)]);
        map.insert(1, vec![]);
        assert!(downsample_balance(&map, 0).unwrap().is_empty());
        assert!(matches!(downsample_balance(&BTreeMap::new(), 0), Err(CorpusError::EmptyInput)));
    }

    fn arb_example(kind: TaskKind) -> impl Strategy<Value = (String, Target)> {
        let code = "[a-z]{1,6}( [a-z0-9(){};=+]{1,4}){0,8}";
        match kind {
            TaskKind::Classification => (code, (0usize..3).prop_map(Target::Class)).boxed(),
            TaskKind::Generation => {
                (code, prop::collection::vec("[a-zA-Z_<>]{1,5}", 1..6).prop_map(Target::Tokens)).boxed()
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_round_trip(recs in prop::collection::vec(arb_example(TaskKind::Generation), 0..100),
                                cls in prop::collection::vec(arb_example(TaskKind::Classification), 1..50)) {
            let dir = tempfile::tempdir().unwrap();
            for (kind, recs, nc) in [(TaskKind::Generation, recs, None), (TaskKind::Classification, cls, Some(3))] {
                let keywords = KeywordTable::default();
                let examples: Vec<Example> = recs.into_iter().enumerate().map(|(i, (code, target))| Example {
                    id: format!("r{i}"),
                    tokens: keywords.tokenize(&code, DEFAULT_LANGUAGE).unwrap(),
                    code,
                    target,
                }).collect();
                let ds = Dataset::labeled(kind, nc, examples);
                let path = dir.path().join("rt.jsonl");
                save_dataset(&ds, &path).unwrap();
                prop_assert_eq!(load_dataset(&path, kind).unwrap(), ds);
            }
        }

        #[test]
        fn balanced_output_is_subset(sizes in prop::collection::vec(1usize..12, 1..5), seed in any::<u64>()) {
            let mut map = BTreeMap::new();
            for (c, n) in sizes.iter().enumerate() {
                map.insert(c, (0..*n).map(|i| pseudo(&format!("c{c}_{i}"), c)).collect::<Vec<_>>());
            }
            let out = downsample_balance(&map, seed).unwrap();
            let m = *sizes.iter().min().unwrap();
            prop_assert_eq!(out.len(), m * sizes.len());
            for (c, items) in &map {
                let kept: Vec<_> = out.iter().filter(|p| p.pseudo_target == Target::Class(*c)).collect();
                prop_assert_eq!(kept.len(), m);
                for k in kept {
                    prop_assert!(items.contains(k));
                }
            }
        }
    }

    #[test]
    fn pseudo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pseudo("z", 1);
        p.teacher_loss = 0.25;
        p.iteration = 3;
        let ds = Dataset {
            kind: TaskKind::Classification,
            num_classes: Some(2),
            language: "python".into(),
            records: Records::Pseudo(vec![p]),
        };
        let path = dir.path().join("p.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path, TaskKind::Classification).unwrap(), ds);
    }
}
