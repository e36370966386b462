use serde::{Deserialize, Serialize};

use super::LabelScheme;
use crate::error::{Error, Result};

/// Entity annotation with half-open character offsets `[start, end)`.
///
/// Offsets count Unicode scalar values, not bytes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub start: usize,
    pub end: usize,
    pub class: String,
}

/// Raw text with its entity spans; the ingestion unit of the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub text: String,
    #[serde(default)]
    pub entities: Vec<EntityAnnotation>,
}

impl AnnotatedSentence {
    pub fn new(text: impl Into<String>, mut entities: Vec<EntityAnnotation>) -> Self {
        entities.sort();
        Self {
            text: text.into(),
            entities,
        }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Checks bounds, class membership and non-overlap.
    pub fn validate(&self, scheme: &LabelScheme) -> Result<()> {
        let len = self.char_len();
        let mut sorted: Vec<&EntityAnnotation> = self.entities.iter().collect();
        sorted.sort();
        for e in &sorted {
            if e.start >= e.end || e.end > len {
                return Err(Error::Validation(format!(
                    "entity [{}, {}) out of bounds for text of {len} chars",
                    e.start, e.end
                )));
            }
            if scheme.class_index(&e.class).is_none() {
                return Err(Error::Validation(format!("unknown entity class `{}`", e.class)));
            }
        }
        for w in sorted.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::Validation(format!(
                    "overlapping entities [{}, {}) and [{}, {})",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        Ok(())
    }

    /// Text covered by an entity.
    pub fn surface(&self, e: &EntityAnnotation) -> String {
        self.text.chars().skip(e.start).take(e.end - e.start).collect()
    }
}

/// An entity given only by its surface string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityString {
    pub string: String,
    pub class: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Resolution {
    pub spans: Vec<EntityAnnotation>,
    pub unresolved: Vec<EntityString>,
}

/// Maps entity strings to character offsets.
///
/// Longer strings are placed first so a short string never claims part of a
/// longer one. Each string takes its first occurrence that does not touch an
/// already claimed character; among equal-length strings, the one whose
/// candidate occurrence comes earlier in the text is placed first. Strings
/// with no free occurrence are returned as unresolved.
pub fn resolve_entities(text: &str, entities: &[EntityString]) -> Result<Resolution> {
    if let Some(e) = entities.iter().find(|e| e.string.is_empty()) {
        return Err(Error::Input(format!("empty entity string for class `{}`", e.class)));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut claimed = vec![false; chars.len()];
    let mut order: Vec<(usize, Vec<char>)> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e.string.chars().collect()))
        .collect();
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut res = Resolution::default();
    let mut idx = 0;
    while idx < order.len() {
        let len = order[idx].1.len();
        let group_end = order[idx..]
            .iter()
            .position(|(_, s)| s.len() != len)
            .map_or(order.len(), |p| idx + p);
        let mut group: Vec<(Option<usize>, usize, &Vec<char>)> = order[idx..group_end]
            .iter()
            .map(|(i, s)| (first_free(&chars, &claimed, s), *i, s))
            .collect();
        group.sort_by_key(|&(pos, i, _)| (pos.unwrap_or(usize::MAX), i));
        for (_, i, s) in group {
            match first_free(&chars, &claimed, s) {
                Some(start) => {
                    claimed[start..start + s.len()].iter_mut().for_each(|c| *c = true);
                    res.spans.push(EntityAnnotation {
                        start,
                        end: start + s.len(),
                        class: entities[i].class.clone(),
                    });
                }
                None => res.unresolved.push(entities[i].clone()),
            }
        }
        idx = group_end;
    }
    res.spans.sort();
    Ok(res)
}

fn first_free(text: &[char], claimed: &[bool], pat: &[char]) -> Option<usize> {
    if pat.len() > text.len() {
        return None;
    }
    (0..=text.len() - pat.len()).find(|&s| text[s..s + pat.len()] == *pat && !claimed[s..s + pat.len()].contains(&true))
}
