use serde::{Deserialize, Serialize};

use super::{tokenize, AnnotatedSentence, LabelScheme, Token, Vocab, IGNORE_INDEX};
use crate::error::{Error, Result};

/// Token that straddles an entity boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignWarning {
    pub token: usize,
    pub token_span: (usize, usize),
    pub entity_span: (usize, usize),
}

/// Entity span with a resolved class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClassSpan {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

/// Per-token BIO tags from character spans.
///
/// A token starting at an entity's first character is `B`, one starting
/// strictly inside it is `I`, anything else `O`. A token that starts before an
/// entity but reaches into it is tagged `B` and reported, as is a token that
/// starts inside an entity and runs past its end.
pub fn bio_encode(
    spans: &[ClassSpan],
    token_spans: &[(usize, usize)],
    scheme: &LabelScheme,
) -> Result<(Vec<usize>, Vec<AlignWarning>)> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for s in &sorted {
        if s.start >= s.end {
            return Err(Error::Validation(format!("empty entity span [{}, {})", s.start, s.end)));
        }
        if s.class >= scheme.num_classes() {
            return Err(Error::Validation(format!(
                "entity class {} outside the scheme",
                s.class
            )));
        }
    }
    if let Some(w) = sorted.windows(2).find(|w| w[1].start < w[0].end) {
        return Err(Error::Validation(format!(
            "overlapping entities [{}, {}) and [{}, {})",
            w[0].start, w[0].end, w[1].start, w[1].end
        )));
    }
    if token_spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Validation("token spans are not ordered".into()));
    }

    let mut tags = vec![0; token_spans.len()];
    let mut warnings = Vec::new();
    let mut e = 0;
    for (t, &(ts, te)) in token_spans.iter().enumerate() {
        while e < sorted.len() && sorted[e].end <= ts {
            e += 1;
        }
        let Some(ent) = sorted.get(e) else { break };
        let warn = || AlignWarning {
            token: t,
            token_span: (ts, te),
            entity_span: (ent.start, ent.end),
        };
        if ts == ent.start {
            tags[t] = scheme.begin(ent.class);
            if te > ent.end {
                warnings.push(warn());
            }
        } else if ts > ent.start {
            tags[t] = scheme.inside(ent.class);
            if te > ent.end {
                warnings.push(warn());
            }
        } else if te > ent.start {
            tags[t] = scheme.begin(ent.class);
            warnings.push(warn());
        }
    }
    Ok((tags, warnings))
}

/// Model-ready example: specials added, labels aligned to subwords.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub token_ids: Vec<usize>,
    pub char_spans: Vec<Option<(usize, usize)>>,
    pub tag_ids: Vec<i64>,
    pub attention_mask: Vec<u8>,
    /// Word index of each subword, `None` for specials and padding.
    pub word_ids: Vec<Option<usize>>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.word_ids.iter().flatten().max().map_or(0, |w| w + 1)
    }

    /// Position of the first subword of every word, in word order.
    pub fn first_subwords(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut last = None;
        for (i, w) in self.word_ids.iter().enumerate() {
            if let Some(w) = *w {
                if last != Some(w) {
                    out.push(i);
                    last = Some(w);
                }
            }
        }
        out
    }

    /// Gold tags at word level (first subword), ignoring specials.
    pub fn word_tags(&self) -> Vec<usize> {
        self.first_subwords()
            .into_iter()
            .map(|i| self.tag_ids[i].max(0) as usize)
            .collect()
    }

    /// Appends padding up to `len` positions.
    pub fn pad_to(&mut self, len: usize, pad_id: usize) {
        while self.token_ids.len() < len {
            self.token_ids.push(pad_id);
            self.char_spans.push(None);
            self.tag_ids.push(IGNORE_INDEX);
            self.attention_mask.push(0);
            self.word_ids.push(None);
        }
    }

    /// Checks list lengths and that every live label is in the tagset.
    pub fn validate(&self, scheme: &LabelScheme) -> Result<()> {
        let n = self.token_ids.len();
        if [
            self.char_spans.len(),
            self.tag_ids.len(),
            self.attention_mask.len(),
            self.word_ids.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Validation("tokenized example lists differ in length".into()));
        }
        for (i, &t) in self.tag_ids.iter().enumerate() {
            let label = scheme.decode_label(t)?;
            if label.is_some() && (self.char_spans[i].is_none() || self.attention_mask[i] == 0) {
                return Err(Error::Validation(format!("special position {i} carries a label")));
            }
        }
        Ok(())
    }
}

/// Wraps subword tokens in `[CLS] ... [SEP]`; specials get the ignore label.
pub fn align_labels(tokens: &[Token], tags: &[usize], vocab: &Vocab) -> TokenizedExample {
    assert_eq!(tokens.len(), tags.len(), "one tag per token");
    let n = tokens.len() + 2;
    let mut ex = TokenizedExample {
        token_ids: Vec::with_capacity(n),
        char_spans: Vec::with_capacity(n),
        tag_ids: Vec::with_capacity(n),
        attention_mask: vec![1; n],
        word_ids: Vec::with_capacity(n),
    };
    ex.token_ids.push(vocab.cls_id());
    ex.char_spans.push(None);
    ex.tag_ids.push(IGNORE_INDEX);
    ex.word_ids.push(None);
    for (t, &tag) in tokens.iter().zip(tags) {
        ex.token_ids.push(t.id);
        ex.char_spans.push(Some((t.start, t.end)));
        ex.tag_ids.push(tag as i64);
        ex.word_ids.push(Some(t.word));
    }
    ex.token_ids.push(vocab.sep_id());
    ex.char_spans.push(None);
    ex.tag_ids.push(IGNORE_INDEX);
    ex.word_ids.push(None);
    ex
}

/// Validated sentence plus its encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub example: TokenizedExample,
    pub warnings: Vec<AlignWarning>,
}

/// Tokenize, tag and align one sentence; tokens past `max_len - 2` are cut.
pub fn encode_sentence(
    sentence: &AnnotatedSentence,
    vocab: &Vocab,
    scheme: &LabelScheme,
    max_len: usize,
) -> Result<Encoded> {
    sentence.validate(scheme)?;
    let mut tokens = tokenize(&sentence.text, vocab);
    tokens.truncate(max_len.saturating_sub(2));
    let spans: Vec<ClassSpan> = sentence
        .entities
        .iter()
        .map(|e| ClassSpan {
            start: e.start,
            end: e.end,
            class: scheme.class_index(&e.class).expect("validated"),
        })
        .collect();
    let token_spans: Vec<(usize, usize)> = tokens.iter().map(|t| (t.start, t.end)).collect();
    let (tags, warnings) = bio_encode(&spans, &token_spans, scheme)?;
    Ok(Encoded {
        example: align_labels(&tokens, &tags, vocab),
        warnings,
    })
}
