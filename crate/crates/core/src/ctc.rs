//! Connectionist temporal classification: the loss (a log-space forward
//! recursion recorded on the tape), a brute-force path enumeration used to
//! check it, greedy decoding and token error rate.

use rand::Rng;

use crate::autodiff::Var;
use crate::nn::{linear, Ctx, LinearParams, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

pub const BLANK: usize = 0;

/// Stand-in for log 0 that keeps every intermediate finite.
const LOG_ZERO: f64 = -1e30;

/// Output projection to `V + 1` classes (blank at index 0).
#[derive(Debug, Clone)]
pub struct CtcHead {
    pub proj: LinearParams,
    pub vocab: usize,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, vocab: usize) -> Self {
        CtcHead {
            proj: LinearParams::new(store, rng, &format!("{name}.ctc_lo"), d, vocab + 1, true),
            vocab,
        }
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params()
    }
}

/// Per-frame log-probabilities `[B, T, V+1]`.
pub fn ctc_head_forward<'t>(ctx: &Ctx<'t>, x: Var<'t>, head: &CtcHead) -> Result<Var<'t>> {
    linear(ctx, x, &head.proj)?.log_softmax()
}

/// Fewest frames that can emit `labels`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels(labels: &[usize], classes: usize, frames: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(TensorError::Invalid(format!(
            "ctc: label {bad} outside 1..{}",
            classes.saturating_sub(1)
        )));
    }
    let required = min_frames(labels);
    if required > frames {
        return Err(TensorError::Inadmissible {
            labels: labels.len(),
            required,
            frames,
        });
    }
    Ok(())
}

/// Mean over the batch of `−log p(labels | log_probs)`.
///
/// `log_probs: [B, T, V+1]` must be normalised per frame; only the first
/// `in_lengths[b]` frames of item `b` take part.
pub fn ctc_loss<'t>(log_probs: Var<'t>, labels: &[Vec<usize>], in_lengths: &[usize]) -> Result<Var<'t>> {
    let s = log_probs.shape();
    if s.len() != 3 || labels.len() != s[0] || in_lengths.len() != s[0] {
        return Err(TensorError::Invalid(format!(
            "ctc: log_probs {s:?} with {} label sequences and {} lengths",
            labels.len(),
            in_lengths.len()
        )));
    }
    let (batch, t_max, classes) = (s[0], s[1], s[2]);
    if batch == 0 {
        return Err(TensorError::Invalid("ctc: empty batch".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for b in 0..batch {
        let len = in_lengths[b];
        if len == 0 || len > t_max {
            return Err(TensorError::Invalid(format!(
                "ctc: input length {len} outside 1..={t_max}"
            )));
        }
        check_labels(&labels[b], classes, len)?;
        let frames = log_probs
            .narrow(0, b, 1)?
            .reshape(&[t_max, classes])?
            .narrow(0, 0, len)?;
        let nll = utterance_nll(frames, &labels[b])?;
        total = Some(match total {
            None => nll,
            Some(acc) => acc.add(nll)?,
        });
    }
    total.expect("non-empty batch").scale(1.0 / batch as f64)
}

fn utterance_nll<'t>(frames: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let tape = frames.tape();
    let len = frames.shape()[0];
    let mut ext = vec![BLANK; 2 * labels.len() + 1];
    for (i, &l) in labels.iter().enumerate() {
        ext[2 * i + 1] = l;
    }
    let n = ext.len();
    let emit = frames.gather_last(&ext)?;

    let start: Vec<f64> = (0..n).map(|s| if s < 2 { 0.0 } else { LOG_ZERO }).collect();
    let skip: Vec<f64> = (0..n)
        .map(|s| {
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                0.0
            } else {
                LOG_ZERO
            }
        })
        .collect();
    let skip = tape.constant(Tensor::new(&[1, n], skip)?);
    let pad = tape.constant(Tensor::full(&[1, 2], LOG_ZERO));

    let mut alpha = emit
        .narrow(0, 0, 1)?
        .add(tape.constant(Tensor::new(&[1, n], start)?))?;
    for t in 1..len {
        let mut rows = vec![alpha];
        if n > 1 {
            let from_prev = tape.concat(&[pad.narrow(1, 0, 1)?, alpha.narrow(1, 0, n - 1)?], 1)?;
            rows.push(from_prev);
        }
        if n > 2 {
            let from_skip = tape.concat(&[pad, alpha.narrow(1, 0, n - 2)?], 1)?.add(skip)?;
            rows.push(from_skip);
        }
        let stacked = tape.concat(&rows, 0)?;
        alpha = stacked
            .logsumexp(0)?
            .reshape(&[1, n])?
            .add(emit.narrow(0, t, 1)?)?;
    }
    let tail = alpha.narrow(1, n.saturating_sub(2), n.min(2))?;
    tail.logsumexp(1)?.sum_all()?.neg()
}

/// Exhaustive `−log p(labels)` over all `(V+1)^T` frame labelings of
/// `log_probs: [T, V+1]`. Limited to `T ≤ 8`, `V ≤ 4`.
pub fn ctc_brute_force(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = log_probs.shape();
    if s.len() != 2 || s[0] == 0 || s[0] > 8 || s[1] < 2 || s[1] > 5 {
        return Err(TensorError::Invalid(format!(
            "ctc_brute_force: shape {s:?} outside T in 1..=8, V in 1..=4"
        )));
    }
    let (t, c) = (s[0], s[1]);
    check_labels(labels, c, t)?;
    let mut logs = Vec::new();
    let mut path = vec![0usize; t];
    loop {
        if collapse(&path) == labels {
            logs.push((0..t).map(|i| log_probs.data()[i * c + path[i]]).sum::<f64>());
        }
        // odometer increment
        let mut i = 0;
        while i < t {
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t {
            break;
        }
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(-(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()))
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Framewise argmax over the valid frames of each item, collapsed.
pub fn ctc_greedy_decode(log_probs: &Tensor, lengths: &[usize]) -> Vec<Vec<usize>> {
    let s = log_probs.shape();
    let (t, c) = (s[1], s[2]);
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let best: Vec<usize> = (0..len.min(t))
                .map(|i| {
                    let row = &log_probs.data()[(b * t + i) * c..(b * t + i + 1) * c];
                    // first index wins ties
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                        .0
                })
                .collect();
            collapse(&best)
        })
        .collect()
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Total edit distance over total reference length.
pub fn token_error_rate(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let errors: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(h, r)).sum();
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return if errors == 0 { 0.0 } else { 1.0 };
    }
    errors as f64 / words as f64
}
