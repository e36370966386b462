//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use crfkd::corpus::LabelScheme;
use crfkd::crf::TransitionMatrix;
use crfkd::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One CRF problem: `n × k` emissions, `(k+2)²` transitions, a mask and a gold path.
#[derive(Clone, Debug)]
pub struct Instance {
    pub n: usize,
    pub k: usize,
    pub emissions: Vec<f64>,
    pub transitions: Vec<f64>,
    pub mask: Vec<bool>,
    pub gold: Vec<usize>,
}

impl Instance {
    /// Real-valued scores in `[-scale, scale]`; about one instance in four has
    /// a masked-out position.
    pub fn random(r: &mut ChaCha8Rng, max_n: usize, max_k: usize, scale: f64) -> Self {
        let n = r.random_range(1..=max_n);
        let k = r.random_range(1..=max_k);
        let dim = k + 2;
        let emissions = (0..n * k).map(|_| r.random_range(-scale..scale)).collect();
        let transitions = (0..dim * dim).map(|_| r.random_range(-scale..scale)).collect();
        let mut mask = vec![true; n];
        if n > 1 && r.random_bool(0.25) {
            mask[r.random_range(0..n)] = false;
        }
        let gold = (0..n).map(|_| r.random_range(0..k)).collect();
        Self {
            n,
            k,
            emissions,
            transitions,
            mask,
            gold,
        }
    }

    /// Scores drawn from `{-2, …, 2}` so that many paths tie.
    pub fn integer(r: &mut ChaCha8Rng, max_n: usize, max_k: usize) -> Self {
        let mut inst = Self::random(r, max_n, max_k, 1.0);
        for v in inst.emissions.iter_mut().chain(inst.transitions.iter_mut()) {
            *v = r.random_range(-2i32..=2) as f64;
        }
        inst
    }

    pub fn em_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.n, self.k], self.emissions.clone()).unwrap()
    }

    pub fn trans(&self) -> TransitionMatrix<f64> {
        TransitionMatrix::from_tensor(Tensor::new(vec![self.k + 2, self.k + 2], self.transitions.clone()).unwrap())
            .unwrap()
    }

    fn t(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * (self.k + 2) + to]
    }

    /// Score of a full assignment, accumulated one term at a time from the
    /// left; masked positions are skipped.
    pub fn score(&self, path: &[usize]) -> f64 {
        let (start, end) = (self.k, self.k + 1);
        let mut prev = start;
        let mut s = 0.0;
        for (i, &y) in path.iter().enumerate().take(self.n) {
            if !self.mask[i] {
                continue;
            }
            s += self.t(prev, y);
            s += self.emissions[i * self.k + y];
            prev = y;
        }
        s + self.t(prev, end)
    }

    /// Every assignment of the valid positions; masked positions hold tag 0.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        let valid: Vec<usize> = (0..self.n).filter(|&i| self.mask[i]).collect();
        let total = self.k.pow(valid.len() as u32);
        (0..total)
            .map(|mut code| {
                let mut p = vec![0; self.n];
                for &i in valid.iter().rev() {
                    p[i] = code % self.k;
                    code /= self.k;
                }
                p
            })
            .collect()
    }

    pub fn brute_log_partition(&self) -> f64 {
        let scores: Vec<f64> = self.paths().iter().map(|p| self.score(p)).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
    }

    /// Maximum score and the winning path under the tie rule: among optimal
    /// paths prefer the lowest tag at the last position, then the one before, …
    pub fn brute_best(&self) -> (f64, Vec<usize>) {
        let valid: Vec<usize> = (0..self.n).filter(|&i| self.mask[i]).collect();
        let key = |p: &Vec<usize>| valid.iter().rev().map(|&i| p[i]).collect::<Vec<_>>();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in self.paths() {
            let s = self.score(&p);
            best = match best {
                None => Some((s, p)),
                Some((bs, bp)) => {
                    if s > bs || (s == bs && key(&p) < key(&bp)) {
                        Some((s, p))
                    } else {
                        Some((bs, bp))
                    }
                }
            };
        }
        best.unwrap()
    }

    /// `P(y_i = y)` by enumeration; masked rows are zero.
    pub fn brute_marginals(&self) -> Vec<f64> {
        let log_z = self.brute_log_partition();
        let mut m = vec![0.0; self.n * self.k];
        for p in self.paths() {
            let w = (self.score(&p) - log_z).exp();
            for i in 0..self.n {
                if self.mask[i] {
                    m[i * self.k + p[i]] += w;
                }
            }
        }
        m
    }
}

/// Central difference of `f` at `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// `|a − b| / max(|a|, |b|)`, or the absolute gap when both are tiny.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// A hand-scored strict-evaluation case over the two-class scheme `A`, `B`.
pub struct EvalCase {
    pub name: &'static str,
    pub gold: Vec<Vec<&'static str>>,
    pub pred: Vec<Vec<&'static str>>,
    /// Micro precision, recall and F1 worked out by hand.
    pub micro: (f64, f64, f64),
    /// Macro F1 over classes with gold support.
    pub macro_f1: f64,
}

pub fn two_class_scheme() -> LabelScheme {
    LabelScheme::new(["A", "B"]).unwrap()
}

pub fn tags(scheme: &LabelScheme, seq: &[&str]) -> Vec<usize> {
    seq.iter().map(|t| scheme.tag_index(t).unwrap()).collect()
}

fn case(
    name: &'static str,
    gold: &[&[&'static str]],
    pred: &[&[&'static str]],
    micro: (f64, f64, f64),
    macro_f1: f64,
) -> EvalCase {
    EvalCase {
        name,
        gold: gold.iter().map(|s| s.to_vec()).collect(),
        pred: pred.iter().map(|s| s.to_vec()).collect(),
        micro,
        macro_f1,
    }
}

const T: f64 = 2.0 / 3.0;

/// Every expected value below was computed by hand from span lists.
pub fn eval_fixtures() -> Vec<EvalCase> {
    vec![
        case(
            "exact single",
            &[&["B-A", "I-A", "O"]],
            &[&["B-A", "I-A", "O"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "boundary miss short",
            &[&["B-A", "I-A", "O"]],
            &[&["B-A", "O", "O"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "boundary miss long",
            &[&["B-A", "O", "O"]],
            &[&["B-A", "I-A", "O"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "boundary miss shifted",
            &[&["O", "B-A", "I-A"]],
            &[&["B-A", "I-A", "O"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "class miss",
            &[&["B-A", "I-A"]],
            &[&["B-B", "I-B"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "missed entity",
            &[&["O", "B-A", "O"]],
            &[&["O", "O", "O"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "spurious entity",
            &[&["O", "O", "O"]],
            &[&["O", "B-A", "O"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case("all outside", &[&["O", "O"]], &[&["O", "O"]], (0.0, 0.0, 0.0), 0.0),
        case(
            "adjacent B gold split",
            &[&["B-A", "B-A"]],
            &[&["B-A", "I-A"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "adjacent B both",
            &[&["B-A", "B-A"]],
            &[&["B-A", "B-A"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "adjacent B one right",
            &[&["B-A", "I-A", "B-A"]],
            &[&["B-A", "B-A", "B-A"]],
            (1.0 / 3.0, 0.5, 0.4),
            0.4,
        ),
        case(
            "I after O opens span",
            &[&["O", "B-A", "O"]],
            &[&["O", "I-A", "O"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "I after O continues",
            &[&["B-A", "I-A"]],
            &[&["I-A", "I-A"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "I of other class",
            &[&["B-A", "I-A"]],
            &[&["B-A", "I-B"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "I-B after B-A two spans",
            &[&["B-A", "B-B"]],
            &[&["B-A", "I-B"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "two classes one each",
            &[&["B-A", "O", "B-B"]],
            &[&["B-A", "O", "B-B"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "two classes one wrong",
            &[&["B-A", "O", "B-B"]],
            &[&["B-A", "O", "O"]],
            (1.0, 0.5, T),
            0.5,
        ),
        case(
            "half precision",
            &[&["B-A", "O", "O"]],
            &[&["B-A", "O", "B-A"]],
            (0.5, 1.0, T),
            T,
        ),
        case(
            "class swap both",
            &[&["B-A", "O", "B-B"]],
            &[&["B-B", "O", "B-A"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "multi sentence counts pool",
            &[&["B-A", "I-A"], &["B-A"], &["O", "B-B"]],
            &[&["B-A", "I-A"], &["O"], &["O", "B-B"]],
            (1.0, T, 0.8),
            (T + 1.0) / 2.0,
        ),
        case(
            "empty sentence",
            &[&[], &["B-A"]],
            &[&[], &["B-A"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "long span exact",
            &[&["B-B", "I-B", "I-B", "I-B"]],
            &[&["B-B", "I-B", "I-B", "I-B"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "long span cut",
            &[&["B-B", "I-B", "I-B", "I-B"]],
            &[&["B-B", "I-B", "O", "B-B"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
        case(
            "end of sequence span",
            &[&["O", "O", "B-A", "I-A"]],
            &[&["O", "O", "B-A", "I-A"]],
            (1.0, 1.0, 1.0),
            1.0,
        ),
        case(
            "predictions only for unsupported class",
            &[&["B-A", "O"]],
            &[&["B-A", "B-B"]],
            (0.5, 1.0, T),
            1.0,
        ),
        case(
            "three of four",
            &[&["B-A", "O", "B-A"], &["B-B", "O", "B-B"]],
            &[&["B-A", "O", "B-A"], &["B-B", "O", "O"]],
            (1.0, 0.75, 6.0 / 7.0),
            (1.0 + T) / 2.0,
        ),
        case(
            "merged across classes",
            &[&["B-A", "B-B", "O"]],
            &[&["B-A", "I-A", "O"]],
            (0.0, 0.0, 0.0),
            0.0,
        ),
    ]
}
