use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const NEWLINE: &str = "\n";
pub const ANSWER: &str = "Answer:";

/// Tokens that exist regardless of corpus content.
pub const RESERVED: &[&str] = &[UNK, "True", "False", "or", "false", ":", ".", ",", NEWLINE, ANSWER];

const PUNCT: &[char] = &['.', ',', ':', ';', '!', '?'];

/// Word-level tokenizer. Whitespace separates words, a newline is its own
/// token, trailing punctuation splits off unless the whole word (e.g.
/// `Answer:`) is itself in the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Token ids of the two answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerIds {
    pub true_id: u32,
    pub false_id: u32,
}

impl AnswerIds {
    pub fn for_truth(&self, truth: bool) -> u32 {
        if truth {
            self.true_id
        } else {
            self.false_id
        }
    }
}

fn pieces(text: &str, known: impl Fn(&str) -> bool) -> Vec<String> {
    let mut out = Vec::new();
    for (li, line) in text.split('\n').enumerate() {
        if li > 0 {
            out.push(NEWLINE.to_string());
        }
        for word in line.split_whitespace() {
            if known(word) {
                out.push(word.to_string());
                continue;
            }
            let core = word.trim_end_matches(PUNCT);
            if !core.is_empty() {
                out.push(core.to_string());
            }
            for c in word[core.len()..].chars() {
                out.push(c.to_string());
            }
        }
    }
    out
}

fn is_punct(tok: &str) -> bool {
    let mut cs = tok.chars();
    matches!((cs.next(), cs.next()), (Some(c), None) if PUNCT.contains(&c))
}

impl Tokenizer {
    /// Builds the vocabulary from reserved tokens plus every word in `texts`.
    /// Corpus words are sorted so the id assignment is independent of order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let reserved: BTreeSet<&str> = RESERVED.iter().copied().collect();
        let mut extra = BTreeSet::new();
        for t in texts {
            for p in pieces(t, |w| reserved.contains(w)) {
                if !reserved.contains(p.as_str()) {
                    extra.insert(p);
                }
            }
        }
        let words = RESERVED.iter().map(|s| s.to_string()).chain(extra).collect();
        Self::from_words(words).expect("reserved tokens are unique")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        for r in RESERVED {
            if !index.contains_key(*r) {
                return Err(Error::Input(format!("vocabulary lacks reserved token {r:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    pub fn answer_ids(&self) -> AnswerIds {
        AnswerIds { true_id: self.index["True"], false_id: self.index["False"] }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        pieces(text, |w| self.index.contains_key(w))
            .iter()
            .map(|p| self.id(p).unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    /// Words of `text` as the tokenizer splits them, without id lookup.
    pub fn split(&self, text: &str) -> Vec<String> {
        pieces(text, |w| self.index.contains_key(w))
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id);
            if w == NEWLINE || is_punct(w) || out.is_empty() || out.ends_with('\n') {
                out.push_str(w);
            } else {
                out.push(' ');
                out.push_str(w);
            }
        }
        out
    }

    /// True when every piece of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        self.split(text).iter().all(|p| self.index.contains_key(p))
    }

    /// One token per line; the newline token is written as `\n`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self
            .words
            .iter()
            .map(|w| if w == NEWLINE { "\\n".to_string() } else { w.clone() } + "\n")
            .collect();
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words = body
            .lines()
            .map(|l| if l == "\\n" { NEWLINE.to_string() } else { l.to_string() })
            .collect();
        Self::from_words(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["France is in Europe", "The currency of Japan is the yen"])
    }

    #[test]
    fn reserved_answers_are_single_tokens() {
        let t = tok();
        assert_eq!(t.tokenize("True"), vec![t.answer_ids().true_id]);
        assert_eq!(t.tokenize("False"), vec![t.answer_ids().false_id]);
        assert!(t.tokenize("").is_empty());
    }

    #[test]
    fn round_trip_sentence() {
        let t = tok();
        let ids = t.tokenize("France is in Europe");
        assert_eq!(ids.len(), 4);
        assert!(!ids.contains(&t.unk_id()));
        assert_eq!(t.detokenize(&ids), "France is in Europe");
    }

    #[test]
    fn wrapper_tokenization() {
        let t = tok();
        let s = "True or false: France is in Europe.\nAnswer:";
        let words = t.split(s);
        assert_eq!(words, ["True", "or", "false", ":", "France", "is", "in", "Europe", ".", "\n", "Answer:"]);
        assert_eq!(t.detokenize(&t.tokenize(s)), s);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = tok();
        assert_eq!(t.tokenize("Atlantis"), vec![t.unk_id()]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let t = tok();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vocab");
        t.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), t);
    }
}
