//! Deterministic toy tasks that exercise the whole loop at desk scale.
//!
//! Snippets are Java-like methods drawn from "families": a family fixes a
//! template, a handful of identifiers and (for classification) a class.
//! Instances of a family keep most of those identifiers, so unlabeled code
//! usually has a close labeled neighbour, the way reused code does.
//!
//! * Classification: the class shows through a marker API call that is
//!   sometimes misleading or absent, and through the family identifiers,
//!   which only become useful once enough examples of a family are labeled.
//! * Generation: a token-by-token rewrite (keywords renamed, identifiers
//!   converted to snake case) of the same snippets.
//!
//! Unlabeled sets keep their gold targets so selection quality can be
//! measured; pipelines treat them as unlabeled.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::code_transform::{KeywordTable, TokenKind};
use crate::corpus::{save_dataset, CorpusError, Dataset, Example, Target, TaskKind, DEFAULT_LANGUAGE};
use crate::seed::rng_for;
use crate::seed_parts;

const TEMPLATES: &[&str] = &[
    "public {TY} {F0} ( {TY} {F1} , {TY} {F2} ) { {TY} {F3} = {M} ( {F1} , {F2} ) ; {N0} ( {F3} ) ; return {F3} ; }",
    "void {F0} ( {TY} {F1} ) { if ( {F1} != null ) { {M} ( {F2} , {F1} ) ; } {F3} . {N0} ( ) ; }",
    "static {TY} {F0} ( ) { for ( int i = 0 ; i < {F1} ; i ++ ) { {M} ( {F2} [ i ] , {F3} ) ; } return {N0} ; }",
    "private void {F0} ( {TY} {F1} , {TY} {F2} ) throws Exception { {F3} = new {N0} ( ) ; {M} ( {F1} , {F2} , {F3} ) ; }",
    "public {TY} {F0} ( {TY} {F1} ) { try { {M} ( {F1} ) ; } catch ( Exception {F2} ) { {F3} ( {N0} ) ; } return {F1} ; }",
    "{TY} {F0} ( {TY} {F1} ) { while ( {F2} ( {F1} ) ) { {M} ( {F1} , {F3} ) ; } return {N0} ( {F1} ) ; }",
];

const TYPES: &[&str] = &["int", "long", "String", "byte", "char", "boolean", "double", "Object"];

const PREFIXES: &[&str] = &[
    "get", "set", "load", "parse", "read", "write", "build", "find", "check", "update", "create",
    "copy", "merge", "split", "flush", "open", "close", "send", "recv", "scan",
];

const SUFFIXES: &[&str] = &[
    "Data", "Item", "User", "Node", "Buffer", "Header", "Packet", "Token", "Entry", "Config",
    "Path", "Stream", "Frame", "Record", "Index", "Cache", "Table", "Queue", "Block", "Field",
];

/// Marker calls indicating class 0 ("safe") and class 1 ("unsafe").
const MARKERS: [&[&str]; 2] = [
    &["strncpy", "snprintf", "fgets", "strncat", "memcpy_s", "checkBounds", "sanitize", "validateLen"],
    &["strcpy", "sprintf", "gets", "strcat", "memcpy", "alloca", "system", "rawExec"],
];

const NEUTRAL_CALLS: &[&str] = &["process", "handle", "apply", "run", "dispatch", "invoke"];

const FAMILY_SLOTS: usize = 4;

fn identifier_pool() -> Vec<String> {
    PREFIXES.iter().flat_map(|p| SUFFIXES.iter().map(move |s| format!("{p}{s}"))).collect()
}

/// Knobs of the synthetic classification task.
#[derive(Debug, Clone, Serialize)]
pub struct ClassificationSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_heldout: usize,
    pub n_families: usize,
    /// Fraction of labeled examples whose label is replaced by another class.
    pub label_noise: f64,
    /// Probability that a family identifier is kept in an instance.
    pub keep_family_id: f64,
    /// Probabilities of an own-class and of a misleading marker; the rest
    /// use a neutral call.
    pub own_marker: f64,
    pub misleading_marker: f64,
    pub seed: u64,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            n_labeled: 200,
            n_unlabeled: 2000,
            n_heldout: 400,
            n_families: 100,
            label_noise: 0.2,
            keep_family_id: 0.8,
            own_marker: 0.6,
            misleading_marker: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_heldout: usize,
    pub n_families: usize,
    pub keep_family_id: f64,
    pub seed: u64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self { n_labeled: 100, n_unlabeled: 1000, n_heldout: 200, n_families: 80, keep_family_id: 0.8, seed: 0 }
    }
}

/// Labeled, unlabeled (gold retained) and held-out splits.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub heldout: Dataset,
}

impl ToyTask {
    /// Writes `labeled.jsonl`, `unlabeled.jsonl` and `heldout.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::IoFailure {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        save_dataset(&self.labeled, &dir.join("labeled.jsonl"))?;
        save_dataset(&self.unlabeled, &dir.join("unlabeled.jsonl"))?;
        save_dataset(&self.heldout, &dir.join("heldout.jsonl"))
    }
}

struct Family {
    template: usize,
    ty: &'static str,
    ids: [String; FAMILY_SLOTS],
    class: usize,
}

fn make_families(n: usize, pool: &[String], rng: &mut ChaCha8Rng) -> Vec<Family> {
    (0..n)
        .map(|i| Family {
            template: rng.gen_range(0..TEMPLATES.len()),
            ty: TYPES[rng.gen_range(0..TYPES.len())],
            ids: std::array::from_fn(|_| pool[rng.gen_range(0..pool.len())].clone()),
            class: i % 2,
        })
        .collect()
}

fn render(family: &Family, marker: &str, keep: f64, pool: &[String], rng: &mut ChaCha8Rng) -> String {
    let ids: Vec<String> = family
        .ids
        .iter()
        .map(|id| if rng.gen_bool(keep) { id.clone() } else { pool[rng.gen_range(0..pool.len())].clone() })
        .collect();
    let noise = &pool[rng.gen_range(0..pool.len())];
    let mut code = TEMPLATES[family.template].replace("{TY}", family.ty).replace("{M}", marker).replace("{N0}", noise);
    for (slot, id) in ids.iter().enumerate() {
        code = code.replace(&format!("{{F{slot}}}"), id);
    }
    code
}

fn example(id: String, code: String, target: Target, keywords: &KeywordTable) -> Example {
    let tokens = keywords.tokenize(&code, DEFAULT_LANGUAGE).expect("templates are non-empty");
    Example { id, code, tokens, target }
}

pub fn classification_task(spec: &ClassificationSpec) -> ToyTask {
    let pool = identifier_pool();
    let keywords = KeywordTable::default();
    let mut rng = rng_for(&seed_parts![spec.seed, "toy-classification"]);
    let families = make_families(spec.n_families, &pool, &mut rng);

    let draw = |prefix: &str, n: usize, noise: f64, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let fam = &families[rng.gen_range(0..families.len())];
                let u: f64 = rng.gen();
                let marker = if u < spec.own_marker {
                    *MARKERS[fam.class].choose(rng).unwrap()
                } else if u < spec.own_marker + spec.misleading_marker {
                    *MARKERS[1 - fam.class].choose(rng).unwrap()
                } else {
                    *NEUTRAL_CALLS.choose(rng).unwrap()
                };
                let code = render(fam, marker, spec.keep_family_id, &pool, rng);
                let class = if noise > 0.0 && rng.gen_bool(noise) { 1 - fam.class } else { fam.class };
                example(format!("{prefix}{i:05}"), code, Target::Class(class), &keywords)
            })
            .collect()
    };

    let labeled = draw("l", spec.n_labeled, spec.label_noise, &mut rng);
    let unlabeled = draw("u", spec.n_unlabeled, 0.0, &mut rng);
    let heldout = draw("h", spec.n_heldout, 0.0, &mut rng);
    ToyTask {
        labeled: Dataset::labeled(TaskKind::Classification, Some(2), labeled),
        unlabeled: Dataset::labeled(TaskKind::Classification, Some(2), unlabeled),
        heldout: Dataset::labeled(TaskKind::Classification, Some(2), heldout),
    }
}

fn snake_case(ident: &str) -> String {
    let mut out = String::new();
    for (i, c) in ident.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

fn rewrite_keyword(kw: &str) -> String {
    match kw {
        "public" => "pub".into(),
        "private" => "priv".into(),
        "static" => "const".into(),
        "void" => "unit".into(),
        "int" => "i32".into(),
        "long" => "i64".into(),
        "byte" => "u8".into(),
        "boolean" => "bool".into(),
        "double" => "f64".into(),
        "return" => "ret".into(),
        "throws" => "raises".into(),
        "new" => "make".into(),
        "null" => "nil".into(),
        "while" => "loop_while".into(),
        other => other.to_uppercase(),
    }
}

/// Token-by-token rewrite used as the generation target.
pub fn rewrite_tokens(tokens: &[crate::code_transform::Token]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| match t.kind {
            TokenKind::Keyword => rewrite_keyword(&t.text),
            TokenKind::Identifier => snake_case(&t.text),
            _ => t.text.clone(),
        })
        .collect()
}

pub fn generation_task(spec: &GenerationSpec) -> ToyTask {
    let pool = identifier_pool();
    let keywords = KeywordTable::default();
    let mut rng = rng_for(&seed_parts![spec.seed, "toy-generation"]);
    let families = make_families(spec.n_families, &pool, &mut rng);
    let calls: Vec<&str> = MARKERS.iter().flat_map(|m| m.iter().copied()).chain(NEUTRAL_CALLS.iter().copied()).collect();

    let draw = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let fam = &families[rng.gen_range(0..families.len())];
                let marker = *calls.choose(rng).unwrap();
                let code = render(fam, marker, spec.keep_family_id, &pool, rng);
                let tokens = keywords.tokenize(&code, DEFAULT_LANGUAGE).expect("templates are non-empty");
                let target = Target::Tokens(rewrite_tokens(&tokens));
                Example { id: format!("{prefix}{i:05}"), code, tokens, target }
            })
            .collect()
    };

    let labeled = draw("l", spec.n_labeled, &mut rng);
    let unlabeled = draw("u", spec.n_unlabeled, &mut rng);
    let heldout = draw("h", spec.n_heldout, &mut rng);
    ToyTask {
        labeled: Dataset::labeled(TaskKind::Generation, None, labeled),
        unlabeled: Dataset::labeled(TaskKind::Generation, None, unlabeled),
        heldout: Dataset::labeled(TaskKind::Generation, None, heldout),
    }
}
