use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"];

/// Token <-> id bijection with the reserved tokens at ids 0..6.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_size: usize,
}

impl Vocabulary {
    /// Ranks tokens by descending count, ties broken lexicographically, and
    /// keeps at most `max_size - 6` of them.
    pub fn from_counts<'a, I>(counts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, usize)>,
    {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary max_size {max_size} leaves no room beyond {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut merged: HashMap<&str, usize> = HashMap::new();
        for (tok, n) in counts {
            if RESERVED.contains(&tok) {
                continue;
            }
            *merged.entry(tok).or_default() += n;
        }
        let mut ranked: Vec<(&str, usize)> = merged.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, max_size))
    }

    pub fn from_token_lists<S: AsRef<str>>(lists: &[Vec<S>], max_size: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for list in lists {
            for t in list {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        Self::from_counts(counts, max_size)
    }

    fn from_tokens(tokens: Vec<String>, max_size: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, max_size }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to surface tokens, skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let tokens: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        Self::from_token_list(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Parse {
                line: 1,
                message: "vocabulary does not start with the reserved tokens".into(),
            });
        }
        let n = tokens.len();
        let vocab = Self::from_tokens(tokens, n);
        if vocab.index.len() != n {
            return Err(Error::Parse { line: 1, message: "duplicate token in vocabulary".into() });
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&'static str, usize)]) -> Vec<(&'static str, usize)> {
        pairs.to_vec()
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::from_counts(counts(&[("b", 1), ("a", 3)]), 8).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "a", "b"]);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), 7);
    }

    #[test]
    fn lexicographic_tiebreak() {
        let v = Vocabulary::from_counts(counts(&[("b", 2), ("a", 2)]), 8).unwrap();
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), 7);
    }

    #[test]
    fn truncation_maps_to_unk() {
        let v = Vocabulary::from_counts(counts(&[("a", 3), ("b", 1)]), 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn too_small_max_size() {
        assert!(matches!(Vocabulary::from_counts(counts(&[("a", 1)]), 6), Err(Error::Config(_))));
    }

    #[test]
    fn text_roundtrip() {
        let v = Vocabulary::from_counts(counts(&[("x", 2), ("y", 1)]), 50).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.id("y"), v.id("y"));
    }

    #[test]
    fn rejects_vocab_without_reserved_prefix() {
        assert!(Vocabulary::read_from("a\nb\n".as_bytes()).is_err());
    }
}
