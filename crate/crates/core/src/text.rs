//! Tokenization and vocabulary handling.
//!
//! Normalization keeps only ASCII alphanumeric runs, lowercased, so every
//! vocabulary token survives a detokenize/tokenize round trip unchanged. The
//! three reserved ids are spelled `<pad>`, `<oov>`, `<pseudo>` on disk and in
//! detokenized text; `tokenize` maps those literals straight back to their
//! ids before normalization can split them.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const OOV: usize = 1;
pub const PSEUDO: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<oov>";
pub const PSEUDO_TOKEN: &str = "<pseudo>";

/// Hard cap on encoded sequence length; matches the positional table.
pub const MAX_LEN: usize = 32;

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "beside", "between", "both",
    "but", "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few",
    "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "him",
    "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "me", "more", "most", "my",
    "near", "no", "nor", "not", "of", "off", "on", "once", "only", "or", "other", "ought", "our",
    "out", "over", "own", "photo", "same", "she", "should", "so", "some", "such", "than", "that",
    "the", "their", "them", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your",
];

/// A tokenized piece of text; never longer than [`MAX_LEN`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.len() > MAX_LEN {
            return Err(Error::input(format!(
                "token sequence of length {} exceeds maximum {}",
                ids.len(),
                MAX_LEN
            )));
        }
        Ok(TokenSeq { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased ASCII-alphanumeric word splitting; reserved literals pass
/// through whole.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if piece == PAD_TOKEN || piece == OOV_TOKEN || piece == PSEUDO_TOKEN {
            out.push(piece.to_string());
            continue;
        }
        let mut word = String::new();
        for ch in piece.chars() {
            if ch.is_ascii_alphanumeric() {
                word.push(ch.to_ascii_lowercase());
            } else if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    stopwords: BTreeSet<String>,
}

impl Vocabulary {
    /// Count normalized tokens across `corpus` and keep those seen at least
    /// `min_count` times, ordered by descending frequency then lexicographic.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::input(
                "build_vocab: min_count must be at least 1 (0 would admit unseen tokens)",
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut saw_text = false;
        for text in corpus {
            saw_text = true;
            for tok in normalize(text.as_ref()) {
                if tok == PAD_TOKEN || tok == OOV_TOKEN || tok == PSEUDO_TOKEN {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_text {
            return Err(Error::input("build_vocab: empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            OOV_TOKEN.to_string(),
            PSEUDO_TOKEN.to_string(),
        ];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::input(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the three reserved ids always exist
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    /// Tokens in id order, reserved ids first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Normalize, map to ids (unknown words become `<oov>`), truncate to
    /// [`MAX_LEN`].
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let mut ids: Vec<usize> = normalize(text)
            .into_iter()
            .map(|tok| self.index.get(&tok).copied().unwrap_or(OOV))
            .collect();
        ids.truncate(MAX_LEN);
        TokenSeq { ids }
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        let mut out = String::new();
        for (i, &id) in seq.ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match self.tokens.get(id) {
                Some(tok) => out.push_str(tok),
                None => {
                    let _ = write!(out, "<invalid:{id}>");
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = body.lines().collect();
        if lines.len() < 3 {
            return Err(Error::input(format!(
                "vocabulary file {}: fewer than 3 lines, reserved tokens missing",
                path.display()
            )));
        }
        for (i, expect) in [PAD_TOKEN, OOV_TOKEN, PSEUDO_TOKEN].iter().enumerate() {
            if lines[i] != *expect {
                return Err(Error::input(format!(
                    "vocabulary file {}: line {} is {:?}, expected {:?}",
                    path.display(),
                    i,
                    lines[i],
                    expect
                )));
            }
        }
        for (i, line) in lines.iter().enumerate() {
            if line.is_empty() || line.chars().any(|c| c.is_whitespace()) {
                return Err(Error::input(format!(
                    "vocabulary file {}: line {} is empty or contains whitespace",
                    path.display(),
                    i
                )));
            }
        }
        Self::from_tokens(lines.into_iter().map(String::from).collect())
    }
}
