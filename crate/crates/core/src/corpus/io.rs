use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::Deserialize;

use super::{
    resolve_entities, AnnotatedSentence, EntityAnnotation, EntityString, LabelScheme, TokenizedExample, Vocab,
};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    text: String,
    #[serde(default)]
    entities: Option<Vec<EntityAnnotation>>,
    #[serde(default)]
    entity_strings: Option<Vec<EntityString>>,
}

/// Counts gathered while loading; unresolved strings are dropped, not fatal.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub sentences: usize,
    pub resolved: usize,
    pub unresolved: Vec<(usize, EntityString)>,
}

/// Reads JSONL with either explicit spans or entity strings per line.
pub fn read_corpus(path: &Path, scheme: &LabelScheme) -> Result<(Vec<AnnotatedSentence>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let sentence = match (rec.entities, rec.entity_strings) {
            (Some(_), Some(_)) => {
                return Err(Error::Input(format!(
                    "{}:{}: give either `entities` or `entity_strings`, not both",
                    path.display(),
                    lineno + 1
                )))
            }
            (Some(ents), None) => AnnotatedSentence::new(rec.text, ents),
            (None, strings) => {
                let strings = strings.unwrap_or_default();
                let res = resolve_entities(&rec.text, &strings)?;
                report.resolved += res.spans.len();
                for u in res.unresolved {
                    warn!(
                        "{}:{}: entity `{}` not found in text",
                        path.display(),
                        lineno + 1,
                        u.string
                    );
                    report.unresolved.push((lineno + 1, u));
                }
                AnnotatedSentence::new(rec.text, res.spans)
            }
        };
        sentence
            .validate(scheme)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(sentence);
    }
    report.sentences = out.len();
    Ok((out, report))
}

pub fn write_corpus(path: &Path, sentences: &[AnnotatedSentence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `piece<TAB>tag` lines with a blank line after each sentence.
pub fn write_conll(path: &Path, examples: &[TokenizedExample], vocab: &Vocab, scheme: &LabelScheme) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for ex in examples {
        for (&id, &tag) in ex.token_ids.iter().zip(&ex.tag_ids) {
            let Some(tag) = scheme.decode_label(tag)? else { continue };
            let piece = vocab.piece(id).unwrap_or(super::tokenizer::UNK);
            writeln!(w, "{piece}\t{}", scheme.tag_name(tag).expect("valid tag")).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::encode_sentence;

    #[test]
    fn reads_both_record_forms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"text": "ab cd", "entities": [{"start": 0, "end": 2, "class": "MED"}]}"#,
                "\n\n",
                r#"{"text": "ab abc", "entity_strings": [{"string": "ab", "class": "DIS"}, {"string": "zz", "class": "DIS"}]}"#,
                "\n"
            ),
        )
        .unwrap();
        let scheme = LabelScheme::medical();
        let (s, rep) = read_corpus(&path, &scheme).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].entities[0].start, 0);
        assert_eq!(rep.unresolved.len(), 1);
        assert_eq!(rep.unresolved[0].0, 3);

        let out = dir.path().join("out.jsonl");
        write_corpus(&out, &s).unwrap();
        assert_eq!(read_corpus(&out, &scheme).unwrap().0, s);
    }

    #[test]
    fn invalid_spans_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            r#"{"text": "ab", "entities": [{"start": 0, "end": 5, "class": "MED"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            read_corpus(&path, &LabelScheme::medical()),
            Err(Error::Validation(_))
        ));
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(
            read_corpus(&path, &LabelScheme::medical()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn conll_skips_specials() {
        let dir = tempfile::tempdir().unwrap();
        let scheme = LabelScheme::medical();
        let vocab = Vocab::with_specials(["ab", "cd"]).unwrap();
        let s = AnnotatedSentence::new(
            "ab cd",
            vec![EntityAnnotation {
                start: 3,
                end: 5,
                class: "HOR".into(),
            }],
        );
        let ex = encode_sentence(&s, &vocab, &scheme, 16).unwrap().example;
        let path = dir.path().join("x.conll");
        write_conll(&path, &[ex.clone(), ex], &vocab, &scheme).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "ab\tO\ncd\tB-HOR\n\nab\tO\ncd\tB-HOR\n\n");
    }
}
