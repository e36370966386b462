use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const CONTINUATION: &str = "##";

/// WordPiece vocabulary. Continuation pieces carry the `##` prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
    unk: usize,
    cls: usize,
    sep: usize,
    pad: usize,
}

impl Vocab {
    /// Builds a vocabulary; the four special tokens must all be present.
    pub fn new(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p == CONTINUATION {
                return Err(Error::Input(format!("invalid vocabulary entry on line {}", i + 1)));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry `{p}`")));
            }
        }
        let special = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Input(format!("vocabulary lacks `{s}`")))
        };
        let (unk, cls, sep, pad) = (special(UNK)?, special(CLS)?, special(SEP)?, special(PAD)?);
        let max_piece_chars = pieces
            .iter()
            .map(|p| p.strip_prefix(CONTINUATION).unwrap_or(p).chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            pieces,
            index,
            max_piece_chars,
            unk,
            cls,
            sep,
            pad,
        })
    }

    /// Specials first, then the given pieces in order, skipping duplicates.
    pub fn with_specials<S: AsRef<str>>(pieces: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        for p in pieces {
            let p = p.as_ref();
            if !all.iter().any(|q| q == p) {
                all.push(p.to_string());
            }
        }
        Self::new(all)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.pieces.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.unk || id == self.cls || id == self.sep || id == self.pad
    }
}

/// One subword with its half-open character span in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    pub continuation: bool,
    /// Index of the whitespace-delimited word this piece belongs to.
    pub word: usize,
}

/// Whitespace pre-split followed by greedy longest-match segmentation.
///
/// A position where no piece matches emits a one-character unknown token and
/// segmentation resumes after it.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut word = 0;
    let mut i = 0;
    let mut buf = String::new();
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let word_start = i;
        let mut word_end = i;
        while word_end < chars.len() && !chars[word_end].is_whitespace() {
            word_end += 1;
        }
        let mut pos = word_start;
        while pos < word_end {
            let continuation = pos > word_start;
            let longest = (pos + vocab.max_piece_chars).min(word_end);
            let mut matched = None;
            for end in (pos + 1..=longest).rev() {
                buf.clear();
                if continuation {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[pos..end]);
                if let Some(id) = vocab.id(&buf) {
                    matched = Some((id, end));
                    break;
                }
            }
            let (id, end) = matched.unwrap_or((vocab.unk_id(), pos + 1));
            tokens.push(Token {
                id,
                start: pos,
                end,
                continuation,
                word,
            });
            pos = end;
        }
        word += 1;
        i = word_end;
    }
    tokens
}
