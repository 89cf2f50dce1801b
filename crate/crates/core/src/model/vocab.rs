use std::collections::{BTreeSet, HashMap};

use crate::code_transform::MASK_TOKEN;

pub const UNK: &str = "<unk>";
pub const MASK: &str = MASK_TOKEN;

/// Token ↔ index map. Index 0 is `<unk>`; input vocabularies reserve index
/// 1 for `<mask>`. Remaining entries are sorted for reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, with_mask: bool) -> Self {
        let mut tokens = vec![UNK.to_string()];
        if with_mask {
            tokens.push(MASK.to_string());
        }
        let rest: BTreeSet<&str> = words.into_iter().filter(|w| *w != UNK && *w != MASK).collect();
        tokens.extend(rest.into_iter().map(str::to_string));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}
