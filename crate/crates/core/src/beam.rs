//! Scored token sequences shared by both decoding passes.

use std::cmp::Ordering;

/// A token sequence (no blanks, no terminator) with its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<u32>, log_prob: f64) -> Self {
        Self { tokens, log_prob }
    }
}

/// Ranking order: higher score first, then lexicographically smaller tokens.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    rank_parts(a.log_prob, &a.tokens, b.log_prob, &b.tokens)
}

pub(crate) fn rank_parts(sa: f64, ta: &[u32], sb: f64, tb: &[u32]) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ta.cmp(tb))
}

/// Hypotheses sorted by [`rank`] with unique token sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Beam {
    hyps: Vec<Hypothesis>,
}

impl Beam {
    /// Sorts the input. When a token sequence occurs more than once, only its
    /// best-ranked entry is kept.
    pub fn new(mut hyps: Vec<Hypothesis>) -> Self {
        hyps.sort_by(rank);
        Self::from_ranked(hyps)
    }

    /// Keeps the given order (for rankings other than raw log-probability),
    /// dropping later duplicates.
    pub(crate) fn from_ranked(hyps: Vec<Hypothesis>) -> Self {
        let mut out: Vec<Hypothesis> = Vec::with_capacity(hyps.len());
        for h in hyps {
            if !out.iter().any(|o| o.tokens == h.tokens) {
                out.push(h);
            }
        }
        Self { hyps: out }
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    pub fn top(&self) -> Option<&Hypothesis> {
        self.hyps.first()
    }

    pub fn hyps(&self) -> &[Hypothesis] {
        &self.hyps
    }

    pub fn iter(&self) -> impl Iterator<Item = &Hypothesis> {
        self.hyps.iter()
    }

    pub fn truncate(&mut self, n: usize) {
        self.hyps.truncate(n);
    }

    pub fn into_hyps(self) -> Vec<Hypothesis> {
        self.hyps
    }
}
