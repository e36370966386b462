use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a corpus is divided into train / valid / test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Fractions summing to one; sizes are floor, floor, remainder.
    Ratios([f64; 3]),
    /// Exact sizes; must not exceed the corpus.
    Sizes([usize; 3]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios([0.8, 0.1, 0.1])
    }
}

impl SplitSpec {
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitSpec::Ratios(r) => {
                if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "split ratios {r:?} must be in [0, 1] and sum to 1"
                    )));
                }
                let a = (n as f64 * r[0] + 1e-9).floor() as usize;
                let b = ((n as f64 * r[1] + 1e-9).floor() as usize).min(n - a);
                Ok([a, b, n - a - b])
            }
            SplitSpec::Sizes(s) => {
                if s.iter().sum::<usize>() > n {
                    return Err(Error::Config(format!("split sizes {s:?} exceed corpus of {n}")));
                }
                Ok(s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then consecutive slices of the computed sizes.
pub fn split_dataset<T: Clone>(corpus: &[T], spec: &SplitSpec, seed: u64) -> Result<Splits<T>> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot split an empty corpus".into()));
    }
    let [a, b, c] = spec.sizes(corpus.len())?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|&i| corpus[i].clone()).collect();
    Ok(Splits {
        train: take(0..a),
        valid: take(a..a + b),
        test: take(a + b..a + b + c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_floor_remainder() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(6895).unwrap(), [5516, 689, 690]);
        assert_eq!(spec.sizes(10).unwrap(), [8, 1, 1]);
        assert_eq!(spec.sizes(1).unwrap(), [0, 0, 1]);
    }

    #[test]
    fn deterministic_and_partitioning() {
        let corpus: Vec<u32> = (0..100).collect();
        let a = split_dataset(&corpus, &SplitSpec::default(), 7).unwrap();
        let b = split_dataset(&corpus, &SplitSpec::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&corpus, &SplitSpec::default(), 8).unwrap();
        assert_ne!(a.train, c.train);
        let mut all: Vec<u32> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, corpus);
    }

    #[test]
    fn bad_inputs() {
        assert!(split_dataset::<u8>(&[], &SplitSpec::default(), 0).is_err());
        assert!(SplitSpec::Ratios([0.5, 0.5, 0.5]).sizes(10).is_err());
        assert!(SplitSpec::Sizes([5, 5, 5]).sizes(10).is_err());
        assert_eq!(SplitSpec::Sizes([5, 2, 3]).sizes(10).unwrap(), [5, 2, 3]);
    }
}
