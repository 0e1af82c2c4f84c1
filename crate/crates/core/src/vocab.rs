//! Word-level vocabulary and tokenizer.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{ModelError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Ids of `[BLA]`, `[POS]`, `[NEG]`, `[UNC]`.
pub const PROMPT_BASE: usize = 4;

pub const RESERVED: [&str; 8] = ["<pad>", "<bos>", "<eos>", "<unk>", "[BLA]", "[POS]", "[NEG]", "[UNC]"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in order, skipping duplicates.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for w in RESERVED.iter().copied().chain(words.iter().map(|w| w.as_ref())) {
            if !v.ids.contains_key(w) {
                v.ids.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Total lookup with `<unk>` fallback.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased words with punctuation split off, truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(ModelError::EmptyText);
        }
        Ok(words.iter().take(max_len).map(|w| self.id(w)).collect())
    }

    /// Space-joined tokens up to the first `<eos>`, skipping other reserved ids.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= RESERVED.len() || i == UNK)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Reads one token per line; id is the line index.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(ModelError::Data("vocabulary does not start with the reserved tokens".into()));
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, ids })
    }
}

/// Lowercase, split on whitespace, detach punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if ch.is_ascii_punctuation() && ch != '[' && ch != ']' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(&["no", "acute", "findings", "."])
    }

    #[test]
    fn reserved_ids_are_lowest() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("[BLA]"), PROMPT_BASE);
        assert_eq!(v.id("no"), 8);
    }

    #[test]
    fn tokenizes_sentence() {
        let v = vocab();
        assert_eq!(v.tokenize("No acute findings.", 100).unwrap(), vec![8, 9, 10, 11]);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        assert_eq!(vocab().tokenize("zebra", 100).unwrap(), vec![UNK]);
    }

    #[test]
    fn truncates_long_reports() {
        let text = vec!["no"; 150].join(" ");
        assert_eq!(vocab().tokenize(&text, 100).unwrap().len(), 100);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(vocab().tokenize("  \n", 100), Err(ModelError::EmptyText)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab().save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), vocab());
    }
}
