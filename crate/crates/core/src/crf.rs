//! Linear-chain CRF over per-token emission scores.
//!
//! Transition scores live in a `(K+2)×(K+2)` matrix whose last two indices are
//! the virtual START and END tags. Only `START→y`, `y→y'` and `y→END` entries
//! are ever read; transitions into START and out of END hold a large negative
//! sentinel. Positions excluded by the emission mask contribute neither
//! emission nor transition terms: the chain connects the nearest valid
//! neighbours.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Graph, Real, Tensor, Var};

/// Stand-in for negative infinity that keeps log-space sums finite.
pub const NEG_SENTINEL: f64 = -1e9;

/// Transition scores including the virtual START and END tags.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix<T = f32> {
    num_tags: usize,
    scores: Tensor<T>,
    allowed: Option<Vec<bool>>,
}

impl<T: Real> TransitionMatrix<T> {
    /// All-zero transitions (sentinels excepted) for `num_tags` real tags.
    pub fn zeros(num_tags: usize) -> Self {
        let dim = num_tags + 2;
        let mut data = vec![T::zero(); dim * dim];
        enforce_sentinels(&mut data, num_tags);
        Self {
            num_tags,
            scores: Tensor::new(vec![dim, dim], data).expect("square"),
            allowed: None,
        }
    }

    /// Wraps a `(K+2)×(K+2)` tensor; sentinel entries are overwritten.
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if r != c || r < 3 {
            return Err(Error::Shape(format!(
                "transition matrix must be (K+2)x(K+2), got {:?}",
                t.shape()
            )));
        }
        let num_tags = r - 2;
        let mut data = t.into_data();
        enforce_sentinels(&mut data, num_tags);
        let scores = Tensor::new(vec![r, c], data)?;
        let m = Self {
            num_tags,
            scores,
            allowed: None,
        };
        for i in 0..r {
            for j in 0..r {
                if m.is_live(i, j) && !m.scores.at(i, j).is_finite() {
                    return Err(Error::NonFinite("transition matrix".into()));
                }
            }
        }
        Ok(m)
    }

    /// Restricts decoding and scoring to transitions marked `true` in a
    /// `(K+2)²` row-major table.
    pub fn with_allowed(mut self, allowed: Vec<bool>) -> Result<Self> {
        let dim = self.num_tags + 2;
        if allowed.len() != dim * dim {
            return Err(Error::Shape("allowed-transition table size".into()));
        }
        self.allowed = Some(allowed);
        Ok(self)
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn start(&self) -> usize {
        self.num_tags
    }

    pub fn end(&self) -> usize {
        self.num_tags + 1
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.scores
    }

    fn is_live(&self, from: usize, to: usize) -> bool {
        from != self.end() && to != self.start()
    }

    /// Effective score of `from → to`, honouring the allowed-transition table.
    #[inline]
    pub fn score(&self, from: usize, to: usize) -> T {
        let dim = self.num_tags + 2;
        if let Some(allowed) = &self.allowed {
            if !allowed[from * dim + to] {
                return T::of(NEG_SENTINEL);
            }
        }
        self.scores.data()[from * dim + to]
    }
}

/// Overwrites the entries that must never be selected.
pub fn enforce_sentinels<T: Real>(data: &mut [T], num_tags: usize) {
    let dim = num_tags + 2;
    let (start, end) = (num_tags, num_tags + 1);
    for i in 0..dim {
        data[i * dim + start] = T::of(NEG_SENTINEL);
        data[end * dim + i] = T::of(NEG_SENTINEL);
    }
}

/// Allowed-transition table forbidding BIO-invalid moves.
///
/// Tag layout is `O, B-c0, I-c0, B-c1, I-c1, ...`: `I-c` may only follow
/// `B-c` or `I-c`, and may not start a sequence.
pub fn strict_bio_allowed(num_classes: usize) -> Vec<bool> {
    let k = 2 * num_classes + 1;
    let dim = k + 2;
    let (start, end) = (k, k + 1);
    let mut allowed = vec![true; dim * dim];
    for from in 0..dim {
        for to in 0..dim {
            let ok = if to == start || from == end {
                false
            } else if to < k && to > 0 && to % 2 == 0 {
                let class = (to - 1) / 2;
                from < k && from > 0 && (from - 1) / 2 == class
            } else {
                true
            };
            allowed[from * dim + to] = ok;
        }
    }
    allowed
}

/// Emission scores `[n × K]` plus a validity flag per position.
#[derive(Clone, Copy, Debug)]
pub struct EmissionView<'a, T = f32> {
    logits: &'a [T],
    num_tags: usize,
    mask: &'a [bool],
}

impl<'a, T: Real> EmissionView<'a, T> {
    pub fn new(logits: &'a [T], num_tags: usize, mask: &'a [bool]) -> Result<Self> {
        if num_tags == 0 || logits.len() != mask.len() * num_tags {
            return Err(Error::Shape(format!(
                "emissions of length {} do not match {} positions x {num_tags} tags",
                logits.len(),
                mask.len()
            )));
        }
        Ok(Self { logits, num_tags, mask })
    }

    pub fn from_tensor(t: &'a Tensor<T>, mask: &'a [bool]) -> Result<Self> {
        let (_, k) = t.dims2()?;
        Self::new(t.data(), k, mask)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    fn valid_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    #[inline]
    fn at(&self, pos: usize, tag: usize) -> T {
        self.logits[pos * self.num_tags + tag]
    }
}

fn check_compat<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>) -> Result<Vec<usize>> {
    if em.num_tags != trans.num_tags {
        return Err(Error::Shape(format!(
            "{} emission tags vs {} transition tags",
            em.num_tags, trans.num_tags
        )));
    }
    let valid = em.valid_positions();
    if valid.is_empty() {
        return Err(Error::Input("emission view has no valid positions".into()));
    }
    Ok(valid)
}

/// Score of one tag sequence: emissions plus transitions, including the
/// START and END boundary terms. `tags` has one entry per position; entries at
/// masked-out positions are ignored.
pub fn path_score<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>, tags: &[usize]) -> Result<T> {
    let valid = check_compat(em, trans)?;
    if tags.len() != em.len() {
        return Err(Error::Shape("tag sequence length".into()));
    }
    let mut prev = trans.start();
    let mut s = T::zero();
    for &i in &valid {
        let y = tags[i];
        if y >= em.num_tags {
            return Err(Error::Input(format!("tag index {y} out of range")));
        }
        s += trans.score(prev, y);
        s += em.at(i, y);
        prev = y;
    }
    Ok(s + trans.score(prev, trans.end()))
}

/// Forward scores `alpha[t][y]` over the valid positions.
fn forward_pass<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>, valid: &[usize]) -> Vec<Vec<T>> {
    let k = em.num_tags;
    let mut alpha = Vec::with_capacity(valid.len());
    alpha.push(
        (0..k)
            .map(|y| trans.score(trans.start(), y) + em.at(valid[0], y))
            .collect::<Vec<_>>(),
    );
    let mut buf = vec![T::zero(); k];
    for &i in &valid[1..] {
        let prev: &Vec<T> = alpha.last().expect("non-empty");
        let mut next = vec![T::zero(); k];
        for (y, nv) in next.iter_mut().enumerate() {
            for (yp, b) in buf.iter_mut().enumerate() {
                *b = prev[yp] + trans.score(yp, y);
            }
            *nv = log_sum_exp(&buf) + em.at(i, y);
        }
        alpha.push(next);
    }
    alpha
}

/// Backward scores `beta[t][y]`: log-sum over all continuations after `t`,
/// END term included.
fn backward_pass<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>, valid: &[usize]) -> Vec<Vec<T>> {
    let k = em.num_tags;
    let n = valid.len();
    let mut beta = vec![vec![T::zero(); k]; n];
    for (y, b) in beta[n - 1].iter_mut().enumerate() {
        *b = trans.score(y, trans.end());
    }
    let mut buf = vec![T::zero(); k];
    for t in (0..n - 1).rev() {
        let i_next = valid[t + 1];
        for y in 0..k {
            for (yn, b) in buf.iter_mut().enumerate() {
                *b = trans.score(y, yn) + em.at(i_next, yn) + beta[t + 1][yn];
            }
            beta[t][y] = log_sum_exp(&buf);
        }
    }
    beta
}

fn final_lse<T: Real>(alpha_last: &[T], trans: &TransitionMatrix<T>) -> T {
    let terms: Vec<T> = alpha_last
        .iter()
        .enumerate()
        .map(|(y, &a)| a + trans.score(y, trans.end()))
        .collect();
    log_sum_exp(&terms)
}

/// `log Z(X)` by the forward recursion, `O(n·K²)`.
pub fn log_partition<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>) -> Result<T> {
    let valid = check_compat(em, trans)?;
    let alpha = forward_pass(em, trans, &valid);
    Ok(final_lse(alpha.last().expect("non-empty"), trans))
}

/// Posterior tag marginals `P(y_i = k | X)`; masked rows are all zero.
pub fn marginals<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>) -> Result<Tensor<T>> {
    let valid = check_compat(em, trans)?;
    let k = em.num_tags;
    let alpha = forward_pass(em, trans, &valid);
    let beta = backward_pass(em, trans, &valid);
    let log_z = final_lse(alpha.last().expect("non-empty"), trans);
    let mut out = vec![T::zero(); em.len() * k];
    for (t, &i) in valid.iter().enumerate() {
        for y in 0..k {
            out[i * k + y] = (alpha[t][y] + beta[t][y] - log_z).exp();
        }
    }
    Tensor::new(vec![em.len(), k], out)
}

/// Negative log-likelihood and its analytic gradients.
#[derive(Clone, Debug)]
pub struct NllOutput<T = f32> {
    pub loss: T,
    pub log_partition: T,
    pub gold_score: T,
    /// `[n × K]`: marginals minus the gold one-hot on valid rows.
    pub d_emissions: Tensor<T>,
    /// `(K+2)×(K+2)`: expected minus gold transition counts.
    pub d_transitions: Tensor<T>,
}

/// `log Z − S(gold)` with gradients from forward–backward.
pub fn nll<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>, gold: &[usize]) -> Result<NllOutput<T>> {
    let gold_score = path_score(em, trans, gold)?;
    let valid = check_compat(em, trans)?;
    let k = em.num_tags;
    let dim = k + 2;
    let alpha = forward_pass(em, trans, &valid);
    let beta = backward_pass(em, trans, &valid);
    let log_z = final_lse(alpha.last().expect("non-empty"), trans);

    let mut de = vec![T::zero(); em.len() * k];
    let mut dt = vec![T::zero(); dim * dim];
    let (start, end) = (trans.start(), trans.end());
    let n = valid.len();
    for (t, &i) in valid.iter().enumerate() {
        for y in 0..k {
            let p = (alpha[t][y] + beta[t][y] - log_z).exp();
            de[i * k + y] = p;
            if t == 0 {
                dt[start * dim + y] += p;
            }
            if t == n - 1 {
                dt[y * dim + end] += p;
            }
        }
        de[i * k + gold[i]] -= T::one();
    }
    for t in 0..n.saturating_sub(1) {
        let i_next = valid[t + 1];
        for y in 0..k {
            for yn in 0..k {
                let xi = (alpha[t][y] + trans.score(y, yn) + em.at(i_next, yn) + beta[t + 1][yn] - log_z).exp();
                dt[y * dim + yn] += xi;
            }
        }
    }
    let mut prev = start;
    for &i in &valid {
        dt[prev * dim + gold[i]] -= T::one();
        prev = gold[i];
    }
    dt[prev * dim + end] -= T::one();
    if let Some(allowed) = &trans.allowed {
        for (d, &ok) in dt.iter_mut().zip(allowed) {
            if !ok {
                *d = T::zero();
            }
        }
    }

    let loss = log_z - gold_score;
    Ok(NllOutput {
        loss: if loss < T::zero() { T::zero() } else { loss },
        log_partition: log_z,
        gold_score,
        d_emissions: Tensor::new(vec![em.len(), k], de)?,
        d_transitions: Tensor::new(vec![dim, dim], dt)?,
    })
}

/// Best path under the CRF.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T = f32> {
    /// One tag per position; masked-out positions hold tag 0.
    pub tags: Vec<usize>,
    pub score: T,
}

/// Max-score path; ties go to the lowest tag index at every backtrack step.
pub fn viterbi<T: Real>(em: &EmissionView<'_, T>, trans: &TransitionMatrix<T>) -> Result<Decoded<T>> {
    let valid = check_compat(em, trans)?;
    let k = em.num_tags;
    let n = valid.len();
    let mut delta: Vec<T> = (0..k)
        .map(|y| trans.score(trans.start(), y) + em.at(valid[0], y))
        .collect();
    let mut back = vec![0usize; n * k];
    let mut next = vec![T::zero(); k];
    for (t, &i) in valid.iter().enumerate().skip(1) {
        for y in 0..k {
            let mut best = delta[0] + trans.score(0, y);
            let mut arg = 0;
            for (yp, &d) in delta.iter().enumerate().skip(1) {
                let s = d + trans.score(yp, y);
                if s > best {
                    best = s;
                    arg = yp;
                }
            }
            next[y] = best + em.at(i, y);
            back[t * k + y] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = delta[0] + trans.score(0, trans.end());
    let mut last = 0;
    for (y, &d) in delta.iter().enumerate().skip(1) {
        let s = d + trans.score(y, trans.end());
        if s > best {
            best = s;
            last = y;
        }
    }
    let mut path = vec![0usize; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    let mut tags = vec![0usize; em.len()];
    for (t, &i) in valid.iter().enumerate() {
        tags[i] = path[t];
    }
    Ok(Decoded { tags, score: best })
}

/// Records the mean CRF NLL of a packed batch on the tape.
///
/// `emissions` is `[rows × K]`, `transitions` the `(K+2)²` parameter;
/// `gold[row]` is a tag index or `None` for ignored positions. Segments with
/// no scored position are skipped.
pub fn batch_nll<T: Real>(
    g: &mut Graph<'_, T>,
    emissions: Var,
    transitions: Var,
    segments: &[(usize, usize)],
    gold: &[Option<usize>],
    allowed: Option<&[bool]>,
) -> Result<Var> {
    let em_t = g.value(emissions).clone();
    let (rows, k) = em_t.dims2()?;
    if gold.len() != rows {
        return Err(Error::Shape("gold length".into()));
    }
    let mut trans = TransitionMatrix::from_tensor(g.value(transitions).clone())?;
    if let Some(a) = allowed {
        trans = trans.with_allowed(a.to_vec())?;
    }
    let dim = k + 2;
    let mut de = vec![T::zero(); rows * k];
    let mut dt = vec![T::zero(); dim * dim];
    let mut total = T::zero();
    let mut count = 0usize;
    for &(start, len) in segments {
        let mask: Vec<bool> = gold[start..start + len].iter().map(Option::is_some).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let tags: Vec<usize> = gold[start..start + len].iter().map(|t| t.unwrap_or(0)).collect();
        let view = EmissionView::new(&em_t.data()[start * k..(start + len) * k], k, &mask)?;
        let out = nll(&view, &trans, &tags)?;
        total += out.loss;
        count += 1;
        for (d, &v) in de[start * k..(start + len) * k].iter_mut().zip(out.d_emissions.data()) {
            *d += v;
        }
        for (d, &v) in dt.iter_mut().zip(out.d_transitions.data()) {
            *d += v;
        }
    }
    let scale = if count == 0 {
        T::zero()
    } else {
        T::one() / T::of(count as f64)
    };
    de.iter_mut().for_each(|v| *v *= scale);
    dt.iter_mut().for_each(|v| *v *= scale);
    g.fused_scalar(
        total * scale,
        vec![emissions, transitions],
        vec![Tensor::new(vec![rows, k], de)?, Tensor::new(vec![dim, dim], dt)?],
    )
}
