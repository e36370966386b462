//! Strict span scoring against hand-worked fixtures and structural properties.

mod common;

use common::*;
use crfkd::corpus::{bio_encode, ClassSpan, LabelScheme};
use crfkd::evalmetrics::{extract_spans, EntitySpan, Evaluator};
use proptest::prelude::*;

#[test]
fn hand_scored_fixtures() {
    let scheme = two_class_scheme();
    for case in eval_fixtures() {
        let mut ev = Evaluator::new(&scheme);
        for (g, p) in case.gold.iter().zip(&case.pred) {
            ev.add(&tags(&scheme, g), &tags(&scheme, p)).unwrap();
        }
        let s = ev.finish().scores;
        let (p, r, f) = case.micro;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        assert!(
            close(s.micro_precision, p),
            "{}: precision {}",
            case.name,
            s.micro_precision
        );
        assert!(close(s.micro_recall, r), "{}: recall {}", case.name, s.micro_recall);
        assert!(close(s.micro_f1, f), "{}: f1 {}", case.name, s.micro_f1);
        assert!(close(s.macro_f1, case.macro_f1), "{}: macro {}", case.name, s.macro_f1);
    }
}

const K: usize = 3;

fn scheme() -> LabelScheme {
    LabelScheme::new(["X", "Y", "Z"]).unwrap()
}

fn tag_seq() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..1 + 2 * K, 0..12)
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
    prop::collection::vec(
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(0..1 + 2 * K, n),
                prop::collection::vec(0..1 + 2 * K, n),
            )
        }),
        1..8,
    )
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro P/R where a span counts if it overlaps any same-class span on the other side.
fn relaxed(gold: &[EntitySpan], pred: &[EntitySpan]) -> (f64, f64) {
    let hit = |a: &EntitySpan, others: &[EntitySpan]| {
        others
            .iter()
            .any(|b| a.class == b.class && a.start < b.end && b.start < a.end)
    };
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (
        ratio(pred.iter().filter(|p| hit(p, gold)).count(), pred.len()),
        ratio(gold.iter().filter(|g| hit(g, pred)).count(), gold.len()),
    )
}

fn evaluate(pairs: &[(Vec<usize>, Vec<usize>)], scheme: &LabelScheme) -> Evaluator {
    let mut ev = Evaluator::new(scheme);
    for (g, p) in pairs {
        ev.add(g, p).unwrap();
    }
    ev
}

proptest! {
    #[test]
    fn spans_survive_bio_round_trip(marks in prop::collection::vec(prop::option::of((0..K, 1usize..4)), 0..8)) {
        let mut spans = Vec::new();
        let mut pos = 0;
        for m in marks {
            match m {
                Some((class, len)) => {
                    spans.push(ClassSpan { start: pos, end: pos + len, class });
                    pos += len;
                }
                None => pos += 1,
            }
        }
        let tokens: Vec<(usize, usize)> = (0..pos).map(|i| (i, i + 1)).collect();
        let (t, warnings) = bio_encode(&spans, &tokens, &scheme()).unwrap();
        prop_assert!(warnings.is_empty());
        let back: Vec<ClassSpan> = extract_spans(&t, &scheme())
            .into_iter()
            .map(|s| ClassSpan { start: s.start, end: s.end, class: s.class })
            .collect();
        prop_assert_eq!(back, spans);
    }

    #[test]
    fn strict_scores_never_exceed_overlap_scores(data in corpus()) {
        let s = scheme();
        let strict = evaluate(&data, &s).finish().scores;
        let (mut gold, mut pred) = (Vec::new(), Vec::new());
        let mut offset = 0;
        for (g, p) in &data {
            let shift = |v: Vec<EntitySpan>| v.into_iter().map(|x| EntitySpan { start: x.start + offset, end: x.end + offset, class: x.class });
            gold.extend(shift(extract_spans(g, &s)));
            pred.extend(shift(extract_spans(p, &s)));
            offset += g.len() + 1;
        }
        let (rp, rr) = relaxed(&gold, &pred);
        prop_assert!(strict.micro_precision <= rp + 1e-12);
        prop_assert!(strict.micro_recall <= rr + 1e-12);
        prop_assert!(strict.micro_f1 <= f1(rp, rr) + 1e-12);
    }

    #[test]
    fn pooling_ignores_order_and_batching(data in corpus(), cut in 0usize..8) {
        let s = scheme();
        let whole = evaluate(&data, &s).finish();
        let mut reversed = data.clone();
        reversed.reverse();
        prop_assert_eq!(&evaluate(&reversed, &s).finish().scores, &whole.scores);
        let cut = cut.min(data.len());
        let mut merged = evaluate(&data[..cut], &s);
        merged.merge(&evaluate(&data[cut..], &s));
        prop_assert_eq!(merged.finish(), whole);
    }

    #[test]
    fn macro_f1_ignores_class_order(data in corpus(), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        let names = ["X", "Y", "Z"];
        let permuted = LabelScheme::new(perm.iter().map(|&c| names[c])).unwrap();
        // Class `c` of the original scheme sits at position `inv[c]` in the permuted one.
        let mut inv = [0; K];
        for (i, &c) in perm.iter().enumerate() {
            inv[c] = i;
        }
        let map = |t: &Vec<usize>| -> Vec<usize> {
            t.iter().map(|&x| if x == 0 { 0 } else { let c = (x - 1) / 2; x - 2 * c + 2 * inv[c] }).collect()
        };
        let relabelled: Vec<_> = data.iter().map(|(g, p)| (map(g), map(p))).collect();
        let a = evaluate(&data, &scheme()).finish().scores;
        let b = evaluate(&relabelled, &permuted).finish().scores;
        prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-12);
        prop_assert!((a.micro_f1 - b.micro_f1).abs() <= 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one(g in tag_seq()) {
        let s = scheme();
        let r = evaluate(&[(g.clone(), g.clone())], &s).finish();
        let any = !extract_spans(&g, &s).is_empty();
        prop_assert_eq!(r.scores.micro_f1, if any { 1.0 } else { 0.0 });
        prop_assert_eq!(r.scores.macro_f1, if any { 1.0 } else { 0.0 });
    }
}
