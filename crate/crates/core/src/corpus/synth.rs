use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSentence, EntityAnnotation, LabelScheme, Vocab};
use crate::error::{Error, Result};

const ONSETS: &[&str] = &[
    "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch", "dh", "kh", "ph", "th", "j",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Knobs for the synthetic tagging corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    /// Relative frequency of each class among planted entities.
    pub class_weights: Vec<f64>,
    pub num_sentences: usize,
    /// Distinct words in each class vocabulary.
    pub class_vocab_size: usize,
    pub filler_vocab_size: usize,
    /// Multi-word entity surface forms per class.
    pub phrases_per_class: usize,
    pub min_entity_words: usize,
    pub max_entity_words: usize,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    /// Probability that an entity starts at a free word slot.
    pub entity_rate: f64,
    /// Probability that an entity is placed directly after another one.
    pub adjacency_rate: f64,
    /// Fraction of words stored in the vocabulary only as syllable pieces.
    pub subword_fraction: f64,
    /// Words shared by every class and by filler text.
    pub shared_vocab_size: usize,
    /// Probability that a phrase word is drawn from the shared pool.
    pub ambiguity: f64,
    /// Probability that an entity is preceded by its class cue word.
    pub cue_rate: f64,
    /// Probability that an entity repeats an earlier one of the same sentence,
    /// without a cue.
    pub coref_rate: f64,
    /// Number of domain words; with `d > 0` every sentence opens with one and
    /// the cue for class `c` under domain `i` is cue word `(c + i) mod C`.
    pub cue_domains: usize,
    /// Whether filler text also draws from the shared pool.
    pub shared_in_filler: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: LabelScheme::medical().classes().to_vec(),
            class_weights: vec![0.5, 0.15, 0.15, 0.02, 0.08, 0.1],
            num_sentences: 1000,
            class_vocab_size: 40,
            filler_vocab_size: 200,
            phrases_per_class: 30,
            min_entity_words: 1,
            max_entity_words: 3,
            min_sentence_words: 6,
            max_sentence_words: 14,
            entity_rate: 0.15,
            adjacency_rate: 0.0,
            subword_fraction: 0.3,
            shared_vocab_size: 0,
            ambiguity: 0.0,
            cue_rate: 0.0,
            coref_rate: 0.0,
            cue_domains: 0,
            shared_in_filler: true,
            seed: 0,
        }
    }
}

/// Generated sentences together with the vocabulary that covers them.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub scheme: LabelScheme,
    pub vocab: Vocab,
    pub sentences: Vec<AnnotatedSentence>,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.classes.is_empty() {
            return bad("at least one class required");
        }
        if self.class_weights.len() != self.classes.len() {
            return bad("one weight per class required");
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("class weights must be non-negative with positive sum");
        }
        if self.min_entity_words == 0 || self.min_entity_words > self.max_entity_words {
            return bad("entity length range is empty");
        }
        if self.min_sentence_words > self.max_sentence_words {
            return bad("sentence length range is empty");
        }
        if self.class_vocab_size == 0 || self.filler_vocab_size == 0 || self.phrases_per_class == 0 {
            return bad("vocabulary sizes must be positive");
        }
        for (name, p) in [
            ("entity_rate", self.entity_rate),
            ("adjacency_rate", self.adjacency_rate),
            ("subword_fraction", self.subword_fraction),
            ("ambiguity", self.ambiguity),
            ("cue_rate", self.cue_rate),
            ("coref_rate", self.coref_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.ambiguity > 0.0 && self.shared_vocab_size == 0 {
            return bad("ambiguity needs a shared vocabulary");
        }
        Ok(())
    }
}

struct WordMaker {
    seen: HashSet<String>,
}

impl WordMaker {
    fn make(&mut self, rng: &mut ChaCha8Rng) -> Vec<String> {
        loop {
            let n = rng.random_range(2..=3);
            let syl: Vec<String> = (0..n)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS[rng.random_range(0..ONSETS.len())],
                        NUCLEI[rng.random_range(0..NUCLEI.len())]
                    )
                })
                .collect();
            if self.seen.insert(syl.concat()) {
                return syl;
            }
        }
    }
}

/// Builds a corpus of filler text with planted entities.
///
/// Class vocabularies, filler words and cue words are pairwise disjoint; only
/// the optional shared pool crosses class lines.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let scheme = LabelScheme::new(cfg.classes.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut maker = WordMaker { seen: HashSet::new() };
    let mut syllabified: Vec<Vec<String>> = Vec::new();
    let mut pool = |rng: &mut ChaCha8Rng, n: usize, all: &mut Vec<Vec<String>>| -> Vec<String> {
        (0..n)
            .map(|_| {
                let s = maker.make(rng);
                let w = s.concat();
                all.push(s);
                w
            })
            .collect()
    };

    let filler = pool(&mut rng, cfg.filler_vocab_size, &mut syllabified);
    let shared = pool(&mut rng, cfg.shared_vocab_size, &mut syllabified);
    let cues = pool(&mut rng, cfg.classes.len(), &mut syllabified);
    let domains = pool(&mut rng, cfg.cue_domains, &mut syllabified);
    let class_words: Vec<Vec<String>> = (0..cfg.classes.len())
        .map(|_| pool(&mut rng, cfg.class_vocab_size, &mut syllabified))
        .collect();
    let phrases: Vec<Vec<Vec<String>>> = class_words
        .iter()
        .map(|words| {
            (0..cfg.phrases_per_class)
                .map(|_| {
                    let len = rng.random_range(cfg.min_entity_words..=cfg.max_entity_words);
                    (0..len)
                        .map(|_| {
                            if !shared.is_empty() && rng.random_bool(cfg.ambiguity) {
                                shared[rng.random_range(0..shared.len())].clone()
                            } else {
                                words[rng.random_range(0..words.len())].clone()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut pieces: Vec<String> = Vec::new();
    let mut alphabet: Vec<char> = syllabified.iter().flatten().flat_map(|s| s.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    for c in &alphabet {
        pieces.push(c.to_string());
        pieces.push(format!("##{c}"));
    }
    for syl in &syllabified {
        if rng.random_bool(cfg.subword_fraction) {
            pieces.push(syl[0].clone());
            pieces.extend(syl[1..].iter().map(|s| format!("##{s}")));
        } else {
            pieces.push(syl.concat());
        }
    }
    let vocab = Vocab::with_specials(pieces)?;

    let class_dist = WeightedIndex::new(&cfg.class_weights).map_err(|e| Error::Config(e.to_string()))?;
    let background: Vec<&String> = if cfg.shared_in_filler {
        filler.iter().chain(&shared).collect()
    } else {
        filler.iter().collect()
    };
    let mut sentences = Vec::with_capacity(cfg.num_sentences);
    for _ in 0..cfg.num_sentences {
        let target = rng.random_range(cfg.min_sentence_words..=cfg.max_sentence_words);
        let mut words: Vec<String> = Vec::new();
        let mut spans: Vec<(usize, usize, usize)> = Vec::new();
        let mut prev_entity = false;
        let shift = if domains.is_empty() {
            0
        } else {
            let d = rng.random_range(0..domains.len());
            words.push(domains[d].clone());
            d
        };
        while words.len() < target {
            let start_entity = if prev_entity {
                rng.random_bool(cfg.adjacency_rate)
            } else {
                rng.random_bool(cfg.entity_rate)
            };
            if start_entity {
                let (class, phrase) = match spans.len() {
                    n if n > 0 && !prev_entity && rng.random_bool(cfg.coref_rate) => {
                        let (a, b, c) = spans[rng.random_range(0..n)];
                        (c, words[a..b].to_vec())
                    }
                    _ => {
                        let class = class_dist.sample(&mut rng);
                        if !prev_entity && rng.random_bool(cfg.cue_rate) {
                            words.push(cues[(class + shift) % cues.len()].clone());
                        }
                        (class, phrases[class][rng.random_range(0..phrases[class].len())].clone())
                    }
                };
                let first = words.len();
                words.extend(phrase);
                spans.push((first, words.len(), class));
                prev_entity = true;
            } else {
                words.push(background[rng.random_range(0..background.len())].clone());
                prev_entity = false;
            }
        }
        sentences.push(render(&words, &spans, &scheme));
    }
    Ok(SynthCorpus {
        scheme,
        vocab,
        sentences,
    })
}

fn render(words: &[String], spans: &[(usize, usize, usize)], scheme: &LabelScheme) -> AnnotatedSentence {
    let mut offsets = Vec::with_capacity(words.len() + 1);
    let mut pos = 0;
    for w in words {
        offsets.push(pos);
        pos += w.chars().count() + 1;
    }
    let entities = spans
        .iter()
        .map(|&(a, b, c)| EntityAnnotation {
            start: offsets[a],
            end: offsets[b - 1] + words[b - 1].chars().count(),
            class: scheme.classes()[c].clone(),
        })
        .collect();
    AnnotatedSentence::new(words.join(" "), entities)
}
