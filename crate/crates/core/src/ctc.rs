//! CTC negative log-likelihood (log-space forward-backward) and incremental
//! prefix scoring for joint decoding. Index 0 is the blank symbol.

use crate::error::{Error, Result};
use crate::tensor::kernels::log_add;
use crate::tensor::{Graph, Var};

pub const BLANK: usize = 0;

fn check_labels(labels: &[usize], v: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= v) {
        return Err(Error::Invalid(format!(
            "CTC label {bad} is blank or outside vocabulary of size {v}"
        )));
    }
    Ok(())
}

/// Minimum number of frames needed to emit `labels` (repeats need a blank between).
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward variables over the blank-augmented label sequence, one row of
/// `2|y|+1` log values per frame.
fn forward_table(logprobs: &[f64], t: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; t * s];
    alpha[0] = logprobs[ext[0]];
    if s > 1 {
        alpha[1] = logprobs[ext[1]];
    }
    for ti in 1..t {
        let (prev, cur) = alpha.split_at_mut(ti * s);
        let prev = &prev[(ti - 1) * s..];
        let frame = &logprobs[ti * v..(ti + 1) * v];
        for si in 0..s {
            let mut a = prev[si];
            if si >= 1 {
                a = log_add(a, prev[si - 1]);
            }
            if si >= 2 && ext[si] != BLANK && ext[si] != ext[si - 2] {
                a = log_add(a, prev[si - 2]);
            }
            cur[si] = if a == f64::NEG_INFINITY { a } else { a + frame[ext[si]] };
        }
    }
    alpha
}

/// Backward variables excluding the emission at the current frame, so that
/// `Σ_s α_t(s)·β_t(s) = P(y|x)` for every frame t.
fn backward_table(logprobs: &[f64], t: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; t * s];
    beta[(t - 1) * s + s - 1] = 0.0;
    if s > 1 {
        beta[(t - 1) * s + s - 2] = 0.0;
    }
    for ti in (0..t - 1).rev() {
        let (cur, next) = beta.split_at_mut((ti + 1) * s);
        let cur = &mut cur[ti * s..];
        let next = &next[..s];
        let frame = &logprobs[(ti + 1) * v..(ti + 2) * v];
        for si in 0..s {
            let mut b = next[si] + frame[ext[si]];
            if si + 1 < s {
                b = log_add(b, next[si + 1] + frame[ext[si + 1]]);
            }
            if si + 2 < s && ext[si + 2] != BLANK && ext[si + 2] != ext[si] {
                b = log_add(b, next[si + 2] + frame[ext[si + 2]]);
            }
            cur[si] = b;
        }
    }
    beta
}

fn extend_labels(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// ln P(labels | x) from a row-major `t × v` matrix of per-frame log-probabilities.
pub fn ctc_log_likelihood(logprobs: &[f64], t: usize, v: usize, labels: &[usize]) -> Result<f64> {
    check_input(logprobs, t, v)?;
    check_labels(labels, v)?;
    if min_frames(labels) > t {
        return Ok(f64::NEG_INFINITY);
    }
    let ext = extend_labels(labels);
    let s = ext.len();
    let alpha = forward_table(logprobs, t, v, &ext);
    let last = &alpha[(t - 1) * s..];
    Ok(if s > 1 { log_add(last[s - 1], last[s - 2]) } else { last[0] })
}

fn check_input(logprobs: &[f64], t: usize, v: usize) -> Result<()> {
    if t == 0 || logprobs.len() != t * v {
        return Err(Error::Invalid(format!(
            "CTC input of {} values for {t} frames x {v} symbols",
            logprobs.len()
        )));
    }
    Ok(())
}

/// Negative log-likelihood and its gradient with respect to the log-probability
/// inputs. Unrealizable label sequences give `+∞` with a zero gradient.
pub fn ctc_loss_and_grad(logprobs: &[f64], t: usize, v: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_input(logprobs, t, v)?;
    check_labels(labels, v)?;
    let mut grad = vec![0.0; t * v];
    if min_frames(labels) > t {
        return Ok((f64::INFINITY, grad));
    }
    let ext = extend_labels(labels);
    let s = ext.len();
    let alpha = forward_table(logprobs, t, v, &ext);
    let beta = backward_table(logprobs, t, v, &ext);
    let last = &alpha[(t - 1) * s..];
    let ll = if s > 1 { log_add(last[s - 1], last[s - 2]) } else { last[0] };
    if ll == f64::NEG_INFINITY {
        return Ok((f64::INFINITY, grad));
    }
    for ti in 0..t {
        for si in 0..s {
            let ab = alpha[ti * s + si] + beta[ti * s + si];
            if ab > f64::NEG_INFINITY {
                grad[ti * v + ext[si]] -= (ab - ll).exp();
            }
        }
    }
    Ok((-ll, grad))
}

/// CTC loss as a graph node over `logprobs` (`[T', V]`, already log-softmaxed).
/// Returns the loss node and whether the labels were realizable; an
/// unrealizable sequence yields `+∞` and contributes no gradient.
pub fn ctc_loss(g: &mut Graph, logprobs: Var, labels: &[usize]) -> Result<(Var, bool)> {
    let (t, v) = g.shape(logprobs);
    let (loss, grad) = ctc_loss_and_grad(g.value(logprobs), t, v, labels)?;
    let node = g.scalar_with_grad(logprobs, loss, grad)?;
    Ok((node, loss.is_finite()))
}

/// Prefix-probability state for one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    /// ln P(prefix so far, ending in a non-blank at frame t).
    pub r_nonblank: Vec<f64>,
    /// ln P(prefix so far, ending in blank at frame t).
    pub r_blank: Vec<f64>,
    /// Label prefix, excluding sos and language-ID tokens.
    pub prefix: Vec<usize>,
    /// ln of the probability that the label sequence starts with `prefix`.
    pub log_prefix_prob: f64,
}

/// Incremental CTC prefix scorer over one utterance's log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer<'a> {
    logprobs: &'a [f64],
    t: usize,
    v: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(logprobs: &'a [f64], t: usize, v: usize) -> Result<Self> {
        check_input(logprobs, t, v)?;
        Ok(CtcPrefixScorer { logprobs, t, v })
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.logprobs[t * self.v + k]
    }

    /// State of the empty prefix: all-blank paths.
    pub fn initial(&self) -> CtcPrefixState {
        let mut r_blank = Vec::with_capacity(self.t);
        let mut acc = 0.0;
        for t in 0..self.t {
            acc += self.lp(t, BLANK);
            r_blank.push(acc);
        }
        CtcPrefixState {
            r_nonblank: vec![f64::NEG_INFINITY; self.t],
            r_blank,
            prefix: Vec::new(),
            log_prefix_prob: 0.0,
        }
    }

    /// Extends the prefix by `token`, returning the new state and
    /// `ln P(prefix·token…) − ln P(prefix…)`.
    pub fn extend(&self, state: &CtcPrefixState, token: usize) -> Result<(CtcPrefixState, f64)> {
        if token == BLANK || token >= self.v {
            return Err(Error::Invalid(format!("cannot extend a CTC prefix with token {token}")));
        }
        let t = self.t;
        let last = state.prefix.last().copied();
        let mut rn = vec![f64::NEG_INFINITY; t];
        let mut rb = vec![f64::NEG_INFINITY; t];
        if state.prefix.is_empty() {
            rn[0] = self.lp(0, token);
        }
        let mut psi = rn[0];
        for ti in 1..t {
            let carry = if last == Some(token) {
                state.r_blank[ti - 1]
            } else {
                log_add(state.r_blank[ti - 1], state.r_nonblank[ti - 1])
            };
            rn[ti] = log_add(rn[ti - 1], carry) + self.lp(ti, token);
            rb[ti] = log_add(rb[ti - 1], rn[ti - 1]) + self.lp(ti, BLANK);
            psi = log_add(psi, carry + self.lp(ti, token));
        }
        let mut prefix = state.prefix.clone();
        prefix.push(token);
        let delta = increment(psi, state.log_prefix_prob);
        Ok((
            CtcPrefixState {
                r_nonblank: rn,
                r_blank: rb,
                prefix,
                log_prefix_prob: psi,
            },
            delta,
        ))
    }

    /// Score for ending the hypothesis: `ln P(y = prefix) − ln P(prefix…)`.
    pub fn finish(&self, state: &CtcPrefixState) -> f64 {
        let t = self.t - 1;
        let full = log_add(state.r_nonblank[t], state.r_blank[t]);
        increment(full, state.log_prefix_prob)
    }
}

fn increment(new: f64, old: f64) -> f64 {
    if new == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        new - old
    }
}

/// Best-path decoding (argmax per frame, collapse repeats, drop blanks).
pub fn greedy_decode(logprobs: &[f64], t: usize, v: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for frame in logprobs.chunks(v).take(t) {
        let best = frame
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
            .0;
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}
