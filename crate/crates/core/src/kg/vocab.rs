use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::KnowledgeGraph;
use crate::error::{Error, Result};

/// Text tokens kept for the context of one query.
pub const MAX_TEXT_TOKENS: usize = 72;

/// Word-level vocabulary with reserved special tokens.
///
/// Ids 0–4 are `[B]`, `[S]`, `[MASK]`, `[PAD]`, `[UNK]`; corpus tokens follow in
/// lexicographic order so ids are stable under re-serialisation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl TokenVocab {
    pub const BEGIN: usize = 0;
    pub const SEP: usize = 1;
    pub const MASK: usize = 2;
    pub const PAD: usize = 3;
    pub const UNK: usize = 4;
    pub const SPECIALS: [&'static str; 5] = ["[B]", "[S]", "[MASK]", "[PAD]", "[UNK]"];

    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus.into_iter().flat_map(split_words).collect();
        Self::from_tokens(
            Self::SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(words.into_iter().filter(|w| !Self::SPECIALS.contains(&w.as_str())))
                .collect(),
        )
    }

    /// Vocabulary over every entity text and relation name of `g`.
    pub fn for_graph(g: &KnowledgeGraph) -> Self {
        let texts: Vec<String> = (0..g.num_entities())
            .map(|e| g.entity_text(e))
            .chain((0..g.num_relations()).map(|r| g.relation_text(r).to_string()))
            .collect();
        Self::build(texts.iter().map(String::as_str))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < Self::SPECIALS.len()
            || tokens[..Self::SPECIALS.len()].iter().zip(Self::SPECIALS).any(|(a, b)| a != b)
        {
            return Err(Error::config("vocabulary does not start with the special tokens"));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Lowercased words: runs of alphanumerics or `_`, with every other
/// non-space character as its own token.
fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || c == '_' {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token ids for `text`, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &TokenVocab, max_len: usize) -> Vec<usize> {
    split_words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect()
}
