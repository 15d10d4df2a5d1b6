//! The True/False prompt wrapper shared by training, tracing and evaluation.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::Tokenizer;

pub const PREFIX: &str = "True or false:";
pub const SUFFIX: &str = ".\nAnswer:";

/// `"True or false: <proposition>.\nAnswer:"` as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedPrompt {
    pub ids: Vec<u32>,
    /// True for every wrapper token.
    pub formatting: Vec<bool>,
    pub content: Range<usize>,
    pub subject: Option<Range<usize>>,
}

impl WrappedPrompt {
    pub fn last_content(&self) -> usize {
        self.content.end - 1
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn content_positions(&self) -> Range<usize> {
        self.content.clone()
    }
}

pub fn render(proposition: &str) -> String {
    format!("{PREFIX} {proposition}{SUFFIX}")
}

/// Wraps `proposition`, mapping `subject` to its token span when given.
pub fn wrap(tok: &Tokenizer, proposition: &str, subject: Option<&str>) -> Result<WrappedPrompt> {
    let proposition = proposition.trim();
    if proposition.is_empty() {
        return Err(Error::Input("empty proposition".into()));
    }
    if proposition.ends_with('.') {
        return Err(Error::Input(format!("proposition {proposition:?} must not end with a period")));
    }
    if proposition.contains(PREFIX) || proposition.contains("Answer:") {
        log::warn!("proposition {proposition:?} contains wrapper text");
    }
    let prefix = tok.tokenize(PREFIX);
    let content = tok.tokenize(proposition);
    let suffix = tok.tokenize(SUFFIX);
    let start = prefix.len();
    let end = start + content.len();

    let subject = match subject {
        None => None,
        Some(s) => {
            let sid = tok.tokenize(s);
            let at = (!sid.is_empty())
                .then(|| content.windows(sid.len()).position(|w| w == sid.as_slice()))
                .flatten()
                .ok_or_else(|| Error::Input(format!("subject {s:?} is not a token span of {proposition:?}")))?;
            Some(start + at..start + at + sid.len())
        }
    };

    let mut ids = prefix;
    ids.extend(&content);
    ids.extend(suffix);
    let formatting = (0..ids.len()).map(|i| !(start..end).contains(&i)).collect();
    Ok(WrappedPrompt { ids, formatting, content: start..end, subject })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["France is located in Europe", "United Kingdom"])
    }

    #[test]
    fn france_example() {
        let t = tok();
        let w = wrap(&t, "France is located in Europe", Some("France")).unwrap();
        assert_eq!(t.detokenize(&w.ids), "True or false: France is located in Europe.\nAnswer:");
        assert_eq!(render("France is located in Europe"), "True or false: France is located in Europe.\nAnswer:");
        assert_eq!(w.formatting.iter().filter(|&&f| f).count(), 7);
        assert_eq!(&w.formatting[..4], &[true; 4]);
        assert_eq!(&w.formatting[w.len() - 3..], &[true; 3]);
        assert_eq!(w.content, 4..9);
        assert_eq!(w.subject, Some(4..5));
        assert_eq!(w.last_content(), 8);
    }

    #[test]
    fn multi_word_subject() {
        let t = tok();
        let w = wrap(&t, "United Kingdom is located in Europe", Some("United Kingdom")).unwrap();
        assert_eq!(w.subject, Some(4..6));
    }

    #[test]
    fn rejects_bad_input() {
        let t = tok();
        assert!(wrap(&t, "  ", None).is_err());
        assert!(wrap(&t, "France is in Europe.", None).is_err());
        assert!(wrap(&t, "France is in Europe", Some("Spain")).is_err());
    }

    #[test]
    fn wrapper_text_in_proposition_keeps_template_mask() {
        let t = tok();
        let w = wrap(&t, "True or false: France", None).unwrap();
        assert_eq!(w.formatting.iter().filter(|&&f| f).count(), 7);
        assert_eq!(w.content.len(), 5);
    }
}
