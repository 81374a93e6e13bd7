//! Token-level edit distance and the expected word-error objective over an
//! n-best list.

use crate::autodiff::{softmax_in_place, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn word_errors(hyp: &[u32], reference: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Per-hypothesis quantities of the expected-error objective.
#[derive(Clone, Debug, PartialEq)]
pub struct MwerBatchStats {
    /// Sequence probabilities renormalised over the n-best list.
    pub probs: Vec<f64>,
    pub errors: Vec<usize>,
    /// Mean of `errors`.
    pub mean_error: f64,
}

fn deviations(errors: &[usize]) -> (f64, Vec<f64>) {
    let mean = errors.iter().sum::<usize>() as f64 / errors.len() as f64;
    (mean, errors.iter().map(|&w| w as f64 - mean).collect())
}

fn check(n_scores: usize, errors: &[usize]) -> Result<()> {
    if n_scores < 2 {
        return Err(Error::invalid("expected-error loss needs at least two hypotheses"));
    }
    if n_scores != errors.len() {
        return Err(Error::invalid("one error count per hypothesis required"));
    }
    Ok(())
}

/// `sum_i P_i (W_i - mean W)` with `P` the softmax of `log_probs`.
pub fn mwer_value(log_probs: &[f64], errors: &[usize]) -> Result<(f64, MwerBatchStats)> {
    check(log_probs.len(), errors)?;
    let mut probs = log_probs.to_vec();
    softmax_in_place(&mut probs);
    let (mean_error, dev) = deviations(errors);
    let value = probs.iter().zip(&dev).map(|(p, d)| p * d).sum();
    Ok((
        value,
        MwerBatchStats {
            probs,
            errors: errors.to_vec(),
            mean_error,
        },
    ))
}

/// Graph form of [`mwer_value`]; `seq_log_probs` are scalar nodes, error
/// counts are constants.
pub fn mwer_loss(g: &mut Graph, seq_log_probs: &[Var], errors: &[usize]) -> Result<(Var, MwerBatchStats)> {
    check(seq_log_probs.len(), errors)?;
    let scores = g.concat_cols(seq_log_probs)?;
    let probs = g.softmax(scores)?;
    let (mean_error, dev) = deviations(errors);
    let dev = g.input(Tensor::vector(dev)?);
    let weighted = g.mul(probs, dev)?;
    let loss = g.sum(weighted)?;
    let stats = MwerBatchStats {
        probs: g.value(probs).values().to_vec(),
        errors: errors.to_vec(),
        mean_error,
    };
    Ok((loss, stats))
}

/// `mwer + alpha · ce`.
pub fn combine_with_ce(g: &mut Graph, mwer: Var, ce: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    let scaled = g.scale(ce, alpha)?;
    g.add(mwer, scaled)
}
