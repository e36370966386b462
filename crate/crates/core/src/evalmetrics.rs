//! Strict span-level scoring, token accuracy and confusion matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelScheme, IGNORE_INDEX};
use crate::error::{Error, Result};

/// Entity over word positions `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

/// Decodes BIO tags into spans.
///
/// `I-c` continues an open span of class `c`; after `O` or a different class
/// it opens a new span instead of being dropped.
pub fn extract_spans(tags: &[usize], scheme: &LabelScheme) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        let class = scheme.class_of(t);
        let continues = scheme.is_inside(t) && open.is_some_and(|(_, c)| Some(c) == class);
        if continues {
            continue;
        }
        if let Some((s, c)) = open.take() {
            spans.push(EntitySpan {
                start: s,
                end: i,
                class: c,
            });
        }
        if let Some(c) = class {
            open = Some((i, c));
        }
    }
    if let Some((s, c)) = open {
        spans.push(EntitySpan {
            start: s,
            end: tags.len(),
            class: c,
        });
    }
    spans
}

/// Per-class true positive, false positive and false negative counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl SpanCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    /// Exact `(start, end, class)` matching between two span sets.
    pub fn add(&mut self, gold: &[EntitySpan], pred: &[EntitySpan]) {
        for p in pred {
            if gold.contains(p) {
                self.tp[p.class] += 1;
            } else {
                self.fp[p.class] += 1;
            }
        }
        for g in gold {
            if !pred.contains(g) {
                self.fn_[g.class] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &SpanCounts) {
        for (a, b) in [
            (&mut self.tp, &other.tp),
            (&mut self.fp, &other.fp),
            (&mut self.fn_, &other.fn_),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn support(&self, class: usize) -> u64 {
        self.tp[class] + self.fn_[class]
    }

    pub fn scores(&self, scheme: &LabelScheme) -> SpanScores {
        let per_class: Vec<ClassScore> = (0..self.tp.len())
            .map(|c| {
                let (p, r, f) = prf(self.tp[c], self.fp[c], self.fn_[c]);
                ClassScore {
                    class: scheme.classes()[c].clone(),
                    precision: p,
                    recall: r,
                    f1: f,
                    support: self.support(c),
                }
            })
            .collect();
        let supported: Vec<&ClassScore> = per_class.iter().filter(|s| s.support > 0).collect();
        let mean = |f: fn(&ClassScore) -> f64| {
            if supported.is_empty() {
                0.0
            } else {
                supported.iter().map(|s| f(s)).sum::<f64>() / supported.len() as f64
            }
        };
        let (tp, fp, fn_) = (self.tp.iter().sum(), self.fp.iter().sum(), self.fn_.iter().sum());
        let (mp, mr, mf) = prf(tp, fp, fn_);
        SpanScores {
            macro_precision: mean(|s| s.precision),
            macro_recall: mean(|s| s.recall),
            macro_f1: mean(|s| s.f1),
            micro_precision: mp,
            micro_recall: mr,
            micro_f1: mf,
            per_class,
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class scores with macro (over classes with gold support) and micro averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

pub fn span_prf(gold: &[EntitySpan], pred: &[EntitySpan], scheme: &LabelScheme) -> SpanScores {
    let mut c = SpanCounts::new(scheme.num_classes());
    c.add(gold, pred);
    c.scores(scheme)
}

/// Exact tag match rate over positions whose gold label is not ignored.
pub fn token_accuracy(gold: &[i64], pred: &[i64]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "token_accuracy: {} gold vs {} predicted tags",
            gold.len(),
            pred.len()
        )));
    }
    let (mut hit, mut total) = (0u64, 0u64);
    for (g, p) in gold.iter().zip(pred) {
        if *g != IGNORE_INDEX {
            total += 1;
            hit += u64::from(g == p);
        }
    }
    Ok(ratio(hit, total))
}

/// Token counts over `O` plus entity classes, with B and I merged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(scheme: &LabelScheme) -> Self {
        let labels: Vec<String> = std::iter::once("O".to_string())
            .chain(scheme.classes().iter().cloned())
            .collect();
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn add(&mut self, gold: &[usize], pred: &[usize], scheme: &LabelScheme) -> Result<()> {
        if gold.len() != pred.len() {
            return Err(Error::Shape(format!(
                "confusion: {} gold vs {} predicted tags",
                gold.len(),
                pred.len()
            )));
        }
        let bucket = |t: usize| scheme.class_of(t).map_or(0, |c| c + 1);
        for (&g, &p) in gold.iter().zip(pred) {
            self.counts[bucket(g)][bucket(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Rows scaled to fractions of the true label; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter().map(|&c| ratio(c, total)).collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(self.normalized()) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(gold: &[usize], pred: &[usize], scheme: &LabelScheme) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(scheme);
    m.add(gold, pred, scheme)?;
    Ok(m)
}

/// Accumulates word-level predictions sentence by sentence.
#[derive(Clone, Debug)]
pub struct Evaluator {
    scheme: LabelScheme,
    counts: SpanCounts,
    confusion: ConfusionMatrix,
    correct: u64,
    total: u64,
}

impl Evaluator {
    pub fn new(scheme: &LabelScheme) -> Self {
        Self {
            scheme: scheme.clone(),
            counts: SpanCounts::new(scheme.num_classes()),
            confusion: ConfusionMatrix::new(scheme),
            correct: 0,
            total: 0,
        }
    }

    pub fn add(&mut self, gold: &[usize], pred: &[usize]) -> Result<()> {
        self.confusion.add(gold, pred, &self.scheme)?;
        self.counts
            .add(&extract_spans(gold, &self.scheme), &extract_spans(pred, &self.scheme));
        self.total += gold.len() as u64;
        self.correct += gold.iter().zip(pred).filter(|(g, p)| g == p).count() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &Evaluator) {
        self.counts.merge(&other.counts);
        self.confusion.merge(&other.confusion);
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn finish(&self) -> EvalReport {
        EvalReport {
            scores: self.counts.scores(&self.scheme),
            token_accuracy: ratio(self.correct, self.total),
            tokens: self.total,
            confusion: self.confusion.clone(),
        }
    }
}

/// Serialized with a fixed field order so reports diff cleanly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub scores: SpanScores,
    pub token_accuracy: f64,
    pub tokens: u64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn macro_f1(&self) -> f64 {
        self.scores.macro_f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>9} {:>9} {:>8}",
            "class", "precision", "recall", "f1", "support"
        );
        for c in &self.scores.per_class {
            let _ = writeln!(
                out,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                c.class, c.precision, c.recall, c.f1, c.support
            );
        }
        let s = &self.scores;
        let _ = writeln!(
            out,
            "{:<10} {:>9.4} {:>9.4} {:>9.4}",
            "macro", s.macro_precision, s.macro_recall, s.macro_f1
        );
        let _ = writeln!(
            out,
            "{:<10} {:>9.4} {:>9.4} {:>9.4}",
            "micro", s.micro_precision, s.micro_recall, s.micro_f1
        );
        let _ = writeln!(
            out,
            "token accuracy {:.4} over {} tokens",
            self.token_accuracy, self.tokens
        );
        out
    }
}
