//! Phoneme vocabularies: UTF-8 text, one token per line, id = 0-based line number.

use std::collections::HashMap;
use std::path::Path;

use super::read_file;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self> {
        let mut vocab = Vocab::default();
        let mut offset = 0;
        for (line_no, raw) in text.split_inclusive('\n').enumerate() {
            let token = raw.trim_end_matches('\n').trim_end_matches('\r');
            if token.is_empty() {
                return Err(Error::format(offset, format!("line {}: empty token", line_no + 1)));
            }
            if let Some(&first) = vocab.ids.get(token) {
                return Err(Error::format(
                    offset,
                    format!("line {}: duplicate token {token:?} (first on line {})", line_no + 1, first + 1),
                ));
            }
            vocab.ids.insert(token.to_string(), vocab.tokens.len());
            vocab.tokens.push(token.to_string());
            offset += raw.len();
        }
        if vocab.tokens.is_empty() {
            return Err(Error::format(0, "vocabulary is empty"));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps whitespace-separated tokens to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::Input(format!("token {t:?} is not in the vocabulary"))))
            .collect()
    }
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(e.valid_up_to(), "vocabulary is not UTF-8"))?;
    Vocab::parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_one_tokens() {
        let text: String = (0..51).map(|i| format!("P{i}\n")).collect();
        let v = Vocab::parse(&text).unwrap();
        assert_eq!(v.len(), 51);
        assert_eq!(v.id("P0"), Some(0));
        assert_eq!(v.id("P50"), Some(50));
        assert_eq!(v.token(7), Some("P7"));
        assert_eq!(v.encode("P3 P1\tP3").unwrap(), vec![3, 1, 3]);
        assert!(matches!(v.encode("ZZ"), Err(Error::Input(_))));
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(Vocab::parse(""), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_reports_second_line() {
        let err = Vocab::parse("AA\nAH\nB\nAH\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }));
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn crlf_and_missing_final_newline() {
        let v = Vocab::parse("a\r\nb").unwrap();
        assert_eq!(v.tokens(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "x\ny\n").unwrap();
        assert_eq!(load_vocab(&p).unwrap().len(), 2);
        assert!(matches!(load_vocab(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
