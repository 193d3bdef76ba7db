//! Word-level segmentation with byte offsets back into the source text.

use serde::{Deserialize, Serialize};

/// A token and the byte range it covers in the original sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token>;
}

/// Built-in segmenters, selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    /// Split on Unicode whitespace only.
    Whitespace,
    /// Split on whitespace and emit each punctuation character as its own token.
    #[default]
    Basic,
}

impl Tokenizer for TokenizerKind {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        match self {
            TokenizerKind::Whitespace => split(text, false),
            TokenizerKind::Basic => split(text, true),
        }
    }
}

fn split(text: &str, isolate_punct: bool) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    let flush = |out: &mut Vec<Token>, start: usize, end: usize| {
        out.push(Token {
            text: text[start..end].to_string(),
            start,
            end,
        });
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = current.take() {
                flush(&mut out, s, i);
            }
        } else if isolate_punct && c.is_ascii_punctuation() {
            if let Some(s) = current.take() {
                flush(&mut out, s, i);
            }
            flush(&mut out, i, i + c.len_utf8());
        } else if current.is_none() {
            current = Some(i);
        }
    }
    if let Some(s) = current {
        flush(&mut out, s, text.len());
    }
    out
}
