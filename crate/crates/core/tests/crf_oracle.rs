//! CRF scoring, decoding and loss against exhaustive enumeration.

mod common;

use common::*;
use crfkd::crf::{self, strict_bio_allowed, EmissionView, TransitionMatrix};
use crfkd::numerics::Tensor;
use rand::Rng;

#[test]
fn path_scores_match_enumeration_exactly() {
    let mut r = rng(10);
    for _ in 0..100 {
        let inst = Instance::random(&mut r, 6, 4, 3.0);
        let em = EmissionView::new(&inst.emissions, inst.k, &inst.mask).unwrap();
        let trans = inst.trans();
        for p in inst.paths().iter().take(50) {
            assert_eq!(crf::path_score(&em, &trans, p).unwrap(), inst.score(p));
        }
    }
}

#[test]
fn decoded_score_is_the_score_of_the_decoded_path() {
    let mut r = rng(11);
    for _ in 0..200 {
        let inst = Instance::random(&mut r, 8, 5, 3.0);
        let em = EmissionView::new(&inst.emissions, inst.k, &inst.mask).unwrap();
        let trans = inst.trans();
        let dec = crf::viterbi(&em, &trans).unwrap();
        assert_eq!(crf::path_score(&em, &trans, &dec.tags).unwrap(), dec.score);
        for (i, &ok) in inst.mask.iter().enumerate() {
            if !ok {
                assert_eq!(dec.tags[i], 0);
            }
        }
    }
}

#[test]
fn nll_is_log_partition_minus_gold_score() {
    let mut r = rng(12);
    for _ in 0..100 {
        let inst = Instance::random(&mut r, 6, 4, 2.0);
        let em = EmissionView::new(&inst.emissions, inst.k, &inst.mask).unwrap();
        let out = crf::nll(&em, &inst.trans(), &inst.gold).unwrap();
        let want = inst.brute_log_partition() - inst.score(&inst.gold);
        assert!((out.loss - want).abs() < 1e-9, "{} vs {want}", out.loss);
        assert!(out.loss >= -1e-12);
    }
}

#[test]
fn single_precision_tracks_double() {
    let mut r = rng(13);
    for _ in 0..100 {
        let inst = Instance::random(&mut r, 12, 7, 4.0);
        let e32: Vec<f32> = inst.emissions.iter().map(|&v| v as f32).collect();
        let t32: Vec<f32> = inst.transitions.iter().map(|&v| v as f32).collect();
        let trans32 = TransitionMatrix::from_tensor(Tensor::new(vec![inst.k + 2, inst.k + 2], t32).unwrap()).unwrap();
        let z32 = crf::log_partition(&EmissionView::new(&e32, inst.k, &inst.mask).unwrap(), &trans32).unwrap();
        let z64 = crf::log_partition(
            &EmissionView::new(&inst.emissions, inst.k, &inst.mask).unwrap(),
            &inst.trans(),
        )
        .unwrap();
        assert!(((z32 as f64) - z64).abs() <= 1e-4 * z64.abs().max(1.0));
    }
}

#[test]
fn large_scores_stay_finite() {
    let mut r = rng(14);
    let inst = Instance::random(&mut r, 6, 4, 1.0);
    let big: Vec<f64> = inst.emissions.iter().map(|v| v * 1e4).collect();
    let em = EmissionView::new(&big, inst.k, &inst.mask).unwrap();
    let z = crf::log_partition(&em, &inst.trans()).unwrap();
    assert!(z.is_finite());
    let best = crf::viterbi(&em, &inst.trans()).unwrap().score;
    assert!(z >= best && z - best <= (inst.k as f64).ln() * inst.n as f64 + 1e-6);
}

/// Strict BIO: `I-c` only after `B-c` or `I-c`, never first.
fn is_valid_bio(tags: &[usize]) -> bool {
    let mut prev: Option<usize> = None;
    for &t in tags {
        if t > 0 && t % 2 == 0 {
            let class = (t - 1) / 2;
            match prev {
                Some(p) if p > 0 && (p - 1) / 2 == class => {}
                _ => return false,
            }
        }
        prev = Some(t);
    }
    true
}

#[test]
fn constrained_decoding_never_emits_invalid_bio() {
    let mut r = rng(15);
    for _ in 0..200 {
        let classes = r.random_range(1..=3);
        let k = 2 * classes + 1;
        let n = r.random_range(1..=10);
        let emissions: Vec<f64> = (0..n * k).map(|_| r.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..(k + 2) * (k + 2)).map(|_| r.random_range(-3.0..3.0)).collect();
        let mask = vec![true; n];
        let trans = TransitionMatrix::from_tensor(Tensor::new(vec![k + 2, k + 2], t).unwrap())
            .unwrap()
            .with_allowed(strict_bio_allowed(classes))
            .unwrap();
        let em = EmissionView::new(&emissions, k, &mask).unwrap();
        let dec = crf::viterbi(&em, &trans).unwrap();
        assert!(is_valid_bio(&dec.tags), "{:?}", dec.tags);
        let free = TransitionMatrix::from_tensor(trans.tensor().clone()).unwrap();
        assert!(crf::log_partition(&em, &trans).unwrap() <= crf::log_partition(&em, &free).unwrap() + 1e-12);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let e = vec![0.0f64; 6];
    let mask = vec![true; 2];
    let em = EmissionView::new(&e, 3, &mask).unwrap();
    assert!(crf::viterbi(&em, &TransitionMatrix::<f64>::zeros(4)).is_err());
    assert!(EmissionView::new(&e, 4, &mask).is_err());
    assert!(crf::path_score(&em, &TransitionMatrix::<f64>::zeros(3), &[0, 3]).is_err());
}
