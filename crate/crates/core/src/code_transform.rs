//! Code lexing and the token-level transformations used as the second view
//! for consistency regularisation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::seed_parts;

/// Token written by the masking transforms.
pub const MASK_TOKEN: &str = "<mask>";

/// Default fraction of eligible positions altered per transform.
pub const DEFAULT_RATIO: f64 = 0.15;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("code is empty after trimming")]
    EmptyInput,
    #[error("no keyword list registered for language `{0}`")]
    UnknownLanguage(String),
    #[error("transform ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("failed to read keyword file {path}: {message}")]
    KeywordFile { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Identifier,
    Keyword,
    Literal,
    Punctuation,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind) -> Self {
        Self { text: text.into(), kind }
    }
}

const JAVA_KEYWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const",
    "continue", "default", "do", "double", "else", "enum", "extends", "final", "finally", "float",
    "for", "goto", "if", "implements", "import", "instanceof", "int", "interface", "long",
    "native", "new", "package", "private", "protected", "public", "return", "short", "static",
    "strictfp", "super", "switch", "synchronized", "this", "throw", "throws", "transient", "try",
    "void", "volatile", "while", "true", "false", "null", "var", "record", "yield",
];

const PYTHON_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if",
    "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try",
    "while", "with", "yield",
];

const C_KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while", "_Bool", "NULL",
];

// Longest match wins; anything else is a single-character token.
const MULTI_CHAR_OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "**=", "//=", "==", "!=", "<=", ">=", "&&", "||", "++",
    "--", "->", "=>", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "::", "<<", ">>", "**",
    "//",
];

/// Per-language keyword lists. Built-ins cover `java`, `python` and `c`;
/// more can be registered from plain-text files.
#[derive(Debug, Clone)]
pub struct KeywordTable {
    languages: HashMap<String, HashSet<String>>,
}

impl Default for KeywordTable {
    fn default() -> Self {
        let mut languages = HashMap::new();
        for (tag, words) in [("java", JAVA_KEYWORDS), ("python", PYTHON_KEYWORDS), ("c", C_KEYWORDS)]
        {
            languages.insert(tag.to_string(), words.iter().map(|w| w.to_string()).collect());
        }
        Self { languages }
    }
}

impl KeywordTable {
    pub fn register(&mut self, language: &str, keywords: impl IntoIterator<Item = String>) {
        self.languages.insert(language.to_string(), keywords.into_iter().collect());
    }

    /// One keyword per line; blank lines and `#` comments are ignored.
    pub fn load_file(&mut self, language: &str, path: &Path) -> Result<(), TransformError> {
        let text = fs::read_to_string(path).map_err(|e| TransformError::KeywordFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string);
        self.register(language, words);
        Ok(())
    }

    pub fn keywords(&self, language: &str) -> Result<&HashSet<String>, TransformError> {
        self.languages
            .get(language)
            .ok_or_else(|| TransformError::UnknownLanguage(language.to_string()))
    }

    pub fn tokenize(&self, code: &str, language: &str) -> Result<Vec<Token>, TransformError> {
        let keywords = self.keywords(language)?;
        lex(code, keywords)
    }
}

/// Tokenizes with the built-in keyword lists.
pub fn tokenize(code: &str, language: &str) -> Result<Vec<Token>, TransformError> {
    KeywordTable::default().tokenize(code, language)
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn lex(code: &str, keywords: &HashSet<String>) -> Result<Vec<Token>, TransformError> {
    if code.trim().is_empty() {
        return Err(TransformError::EmptyInput);
    }
    let chars: Vec<char> = code.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = if is_ident_start(c) {
            while i < chars.len() && is_ident_continue(chars[i]) {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let kind = if keywords.contains(&word) { TokenKind::Keyword } else { TokenKind::Identifier };
            tokens.push(Token::new(word, kind));
            continue;
        } else if c.is_ascii_digit() {
            while i < chars.len() && (is_ident_continue(chars[i]) || chars[i] == '.') {
                i += 1;
            }
            TokenKind::Literal
        } else if c == '"' || c == '\'' {
            i += 1;
            while i < chars.len() && chars[i] != c && chars[i] != '\n' {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
            TokenKind::Literal
        } else if c.is_ascii_punctuation() {
            let rest: String = chars[i..chars.len().min(i + 4)].iter().collect();
            let len = MULTI_CHAR_OPERATORS
                .iter()
                .filter(|op| rest.starts_with(**op))
                .map(|op| op.len())
                .max()
                .unwrap_or(1);
            i += len;
            TokenKind::Punctuation
        } else {
            while i < chars.len()
                && !chars[i].is_whitespace()
                && !chars[i].is_ascii_punctuation()
                && !is_ident_start(chars[i])
                && !chars[i].is_ascii_digit()
            {
                i += 1;
            }
            TokenKind::Other
        };
        tokens.push(Token::new(chars[start..i].iter().collect::<String>(), kind));
    }
    Ok(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    DynamicMasking,
    DynamicReplacement,
    DynamicMaskingOfIdentifiers,
    DynamicReplacementOfIdentifiers,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::DynamicMasking,
        TransformKind::DynamicReplacement,
        TransformKind::DynamicMaskingOfIdentifiers,
        TransformKind::DynamicReplacementOfIdentifiers,
    ];

    fn identifiers_only(self) -> bool {
        matches!(
            self,
            TransformKind::DynamicMaskingOfIdentifiers | TransformKind::DynamicReplacementOfIdentifiers
        )
    }

    fn masks(self) -> bool {
        matches!(self, TransformKind::DynamicMasking | TransformKind::DynamicMaskingOfIdentifiers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub ratio: f64,
    pub seed: u64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, ratio: f64, seed: u64) -> Result<Self, TransformError> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(TransformError::InvalidRatio(ratio));
        }
        Ok(Self { kind, ratio, seed })
    }
}

/// Tokens available to the replacement transforms, gathered from the
/// labeled training inputs. Sorted so draws are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ReplacementVocab {
    all: Vec<Token>,
    identifiers: Vec<Token>,
}

impl ReplacementVocab {
    pub fn from_token_lists<'a>(lists: impl IntoIterator<Item = &'a [Token]>) -> Self {
        let set: BTreeSet<&Token> = lists.into_iter().flatten().collect();
        let all: Vec<Token> = set.into_iter().cloned().collect();
        let identifiers = all.iter().filter(|t| t.kind == TokenKind::Identifier).cloned().collect();
        Self { all, identifiers }
    }

    pub fn all(&self) -> &[Token] {
        &self.all
    }

    pub fn identifiers(&self) -> &[Token] {
        &self.identifiers
    }
}

/// Number of positions a transform alters: `round(ratio * eligible)`.
pub fn altered_count(ratio: f64, eligible: usize) -> usize {
    ((ratio * eligible as f64).round() as usize).min(eligible)
}

/// Applies one transformation. Output length always equals input length.
///
/// Replacement draws exclude the token being replaced, so each chosen
/// position really changes; a position is left as-is only when the
/// vocabulary has no alternative to offer.
pub fn apply_transform(
    tokens: &[Token],
    spec: &TransformSpec,
    vocab: &ReplacementVocab,
    epoch: u32,
    example_id: &str,
) -> Vec<Token> {
    let mut out = tokens.to_vec();
    let eligible: Vec<usize> = if spec.kind.identifiers_only() {
        (0..tokens.len()).filter(|&i| tokens[i].kind == TokenKind::Identifier).collect()
    } else {
        (0..tokens.len()).collect()
    };
    let k = altered_count(spec.ratio, eligible.len());
    if k == 0 {
        return out;
    }
    let mut rng = rng_for(&seed_parts![spec.seed, "transform", example_id, epoch]);
    let mut chosen: Vec<usize> =
        index::sample(&mut rng, eligible.len(), k).into_iter().map(|j| eligible[j]).collect();
    chosen.sort_unstable();

    let pool = if spec.kind.identifiers_only() { vocab.identifiers() } else { vocab.all() };
    for pos in chosen {
        if spec.kind.masks() {
            out[pos] = Token::new(MASK_TOKEN, TokenKind::Other);
        } else if let Some(replacement) = draw_other(&mut rng, pool, &tokens[pos]) {
            out[pos] = replacement.clone();
        }
    }
    out
}

fn draw_other<'a, R: Rng>(rng: &mut R, pool: &'a [Token], current: &Token) -> Option<&'a Token> {
    let current_idx = pool.iter().position(|t| t.text == current.text);
    let choices = pool.len() - usize::from(current_idx.is_some());
    if choices == 0 {
        return None;
    }
    let mut j = rng.gen_range(0..choices);
    if let Some(c) = current_idx {
        if j >= c {
            j += 1;
        }
    }
    Some(&pool[j])
}

/// Uniform choice among the four transforms for one example in one epoch.
pub fn pick_transform(epoch: u32, example_id: &str, seed: u64) -> TransformKind {
    let mut rng = rng_for(&seed_parts![seed, "pick", example_id, epoch]);
    TransformKind::ALL[rng.gen_range(0..TransformKind::ALL.len())]
}
