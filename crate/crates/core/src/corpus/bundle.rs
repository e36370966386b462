use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{encode_sentence, split_dataset, AnnotatedSentence, LabelScheme, SplitSpec, TokenizedExample, Vocab};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Encoded train / valid / test examples with the vocabulary and tagset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scheme: LabelScheme,
    pub vocab: Vocab,
    pub max_len: usize,
    pub train: Vec<TokenizedExample>,
    pub valid: Vec<TokenizedExample>,
    pub test: Vec<TokenizedExample>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub tokens: usize,
    pub words: usize,
    /// Gold entity count per class name.
    pub entities: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepStats {
    pub tags: Vec<String>,
    pub splits: BTreeMap<String, SplitStats>,
    /// Tokens that straddled an entity boundary.
    pub alignment_warnings: usize,
    /// Sentences cut at `max_len`.
    pub truncated: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    scheme: LabelScheme,
    max_len: usize,
}

fn split_stats(data: &[TokenizedExample], scheme: &LabelScheme) -> SplitStats {
    let mut s = SplitStats {
        sentences: data.len(),
        entities: scheme.classes().iter().map(|c| (c.clone(), 0)).collect(),
        ..Default::default()
    };
    for ex in data {
        s.tokens += ex.attention_mask.iter().filter(|&&m| m != 0).count();
        let tags = ex.word_tags();
        s.words += tags.len();
        for span in crate::evalmetrics::extract_spans(&tags, scheme) {
            *s.entities.get_mut(&scheme.classes()[span.class]).expect("class") += 1;
        }
    }
    s
}

impl Dataset {
    /// Splits `sentences` with a seeded shuffle, then encodes every split.
    pub fn prepare(
        sentences: &[AnnotatedSentence],
        vocab: &Vocab,
        scheme: &LabelScheme,
        max_len: usize,
        split: &SplitSpec,
        seed: u64,
    ) -> Result<(Self, PrepStats)> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len {max_len} leaves no room for text")));
        }
        let parts = split_dataset(sentences, split, seed)?;
        let mut warnings = 0;
        let mut truncated = 0;
        let mut encode = |part: &[AnnotatedSentence]| -> Result<Vec<TokenizedExample>> {
            part.iter()
                .map(|s| {
                    let enc = encode_sentence(s, vocab, scheme, max_len)?;
                    warnings += enc.warnings.len();
                    if enc.example.num_words() < s.text.split_whitespace().count() {
                        truncated += 1;
                    }
                    Ok(enc.example)
                })
                .collect()
        };
        let ds = Dataset {
            scheme: scheme.clone(),
            vocab: vocab.clone(),
            max_len,
            train: encode(&parts.train)?,
            valid: encode(&parts.valid)?,
            test: encode(&parts.test)?,
        };
        let stats = ds.stats(warnings, truncated);
        Ok((ds, stats))
    }

    fn stats(&self, alignment_warnings: usize, truncated: usize) -> PrepStats {
        PrepStats {
            tags: self.scheme.tags(),
            splits: SPLITS
                .iter()
                .map(|&n| {
                    (
                        n.to_string(),
                        split_stats(self.split(n).expect("split name"), &self.scheme),
                    )
                })
                .collect(),
            alignment_warnings,
            truncated,
        }
    }

    pub fn split(&self, name: &str) -> Option<&[TokenizedExample]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `meta.json`, `vocab.txt` and one JSONL file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Meta {
            scheme: self.scheme.clone(),
            max_len: self.max_len,
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        for name in SPLITS {
            let path = dir.join(format!("{name}.jsonl"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for ex in self.split(name).expect("split name") {
                serde_json::to_writer(&mut w, ex)?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let read = |name: &str| -> Result<Vec<TokenizedExample>> {
            let path = dir.join(format!("{name}.jsonl"));
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut out = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let ex: TokenizedExample = serde_json::from_str(&line)
                    .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
                ex.validate(&meta.scheme)?;
                if let Some(&bad) = ex.token_ids.iter().find(|&&t| t >= vocab.len()) {
                    return Err(Error::Validation(format!(
                        "{}:{}: token id {bad} outside vocabulary",
                        path.display(),
                        i + 1
                    )));
                }
                out.push(ex);
            }
            Ok(out)
        };
        Ok(Dataset {
            train: read("train")?,
            valid: read("valid")?,
            test: read("test")?,
            scheme: meta.scheme,
            vocab,
            max_len: meta.max_len,
        })
    }
}

/// Hex SHA-256 over the files of a saved bundle, in a fixed order.
pub fn bundle_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut names = vec!["meta.json".to_string(), "vocab.txt".to_string()];
    names.extend(SPLITS.iter().map(|s| format!("{s}.jsonl")));
    for name in names {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthConfig};

    #[test]
    fn prepare_save_load() {
        let corpus = synth_generate(&SynthConfig {
            num_sentences: 50,
            ..Default::default()
        })
        .unwrap();
        let (ds, stats) = Dataset::prepare(
            &corpus.sentences,
            &corpus.vocab,
            &corpus.scheme,
            48,
            &SplitSpec::default(),
            4,
        )
        .unwrap();
        assert_eq!((ds.train.len(), ds.valid.len(), ds.test.len()), (40, 5, 5));
        assert_eq!(stats.tags.len(), 13);
        let total: usize = stats.splits.values().flat_map(|s| s.entities.values()).sum();
        let planted: usize = corpus.sentences.iter().map(|s| s.entities.len()).sum();
        assert_eq!(total, planted);

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        ds.save(&a).unwrap();
        assert_eq!(Dataset::load(&a).unwrap(), ds);
        let (again, _) = Dataset::prepare(
            &corpus.sentences,
            &corpus.vocab,
            &corpus.scheme,
            48,
            &SplitSpec::default(),
            4,
        )
        .unwrap();
        again.save(&b).unwrap();
        assert_eq!(bundle_digest(&a).unwrap(), bundle_digest(&b).unwrap());
    }

    #[test]
    fn truncation_is_counted() {
        let scheme = LabelScheme::new(["X"]).unwrap();
        let vocab = Vocab::with_specials(["a", "b"]).unwrap();
        let s = AnnotatedSentence::new("a b a b a", vec![]);
        let (_, stats) = Dataset::prepare(
            std::slice::from_ref(&s),
            &vocab,
            &scheme,
            4,
            &SplitSpec::Sizes([1, 0, 0]),
            0,
        )
        .unwrap();
        assert_eq!(stats.truncated, 1);
        assert!(Dataset::prepare(&[s], &vocab, &scheme, 2, &SplitSpec::default(), 0).is_err());
    }
}
