use crate::autodiff::{log_add_exp, Graph, Var};
use crate::beam::{rank_parts, Beam, Hypothesis};
use crate::data::{BLANK, FIRST_REGULAR};
use crate::error::{Error, Result};

use super::{PredState, RnntDecoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchConfig {
    pub beam: usize,
    /// Label emissions allowed per encoder frame before a blank is forced.
    pub max_symbols_per_frame: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam: 8,
            max_symbols_per_frame: 4,
        }
    }
}

struct Node {
    tokens: Vec<u32>,
    score: f64,
    pred: PredState,
}

#[derive(Clone, Copy)]
enum Candidate {
    Done(usize),
    Open(usize),
}

fn log_probs_rows(g: &mut Graph, dec: &RnntDecoder, enc_row: Var, frontier: &[Node]) -> Result<Vec<Vec<f64>>> {
    let preds: Vec<Var> = frontier.iter().map(|n| n.pred.joint).collect();
    let pred = if preds.len() == 1 { preds[0] } else { g.concat_rows(&preds)? };
    let lp = dec.joint(g, enc_row, pred)?;
    let t = g.value(lp);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Time-synchronous transducer beam search.
///
/// At each frame, hypotheses are expanded up to `max_symbols_per_frame`
/// times. Frame-final hypotheses (those taking blank) and label extensions
/// compete for `beam` slots; frame-final hypotheses with identical tokens are
/// merged by log-sum-exp. Ties are broken by lexicographic token order, and
/// a frame-final entry wins a tie against a label extension with the same
/// tokens.
pub fn beam_search(dec: &RnntDecoder, g: &mut Graph, e: Var, cfg: SearchConfig) -> Result<Beam> {
    if cfg.beam == 0 {
        return Err(Error::invalid("beam width must be positive"));
    }
    let frames = g.value(e).rows();
    let enc = dec.project_encoder(g, e)?;
    let init = dec.predict(g, &[BLANK], None)?;
    let mut beam = vec![Node {
        tokens: Vec::new(),
        score: 0.0,
        pred: init,
    }];
    let regular = FIRST_REGULAR..dec.vocab as u32;
    for t in 0..frames {
        let enc_row = g.gather_rows(enc, &[t])?;
        let mut done: Vec<Node> = Vec::new();
        let mut frontier = std::mem::take(&mut beam);
        for s in 0..=cfg.max_symbols_per_frame {
            if frontier.is_empty() {
                break;
            }
            let lp = log_probs_rows(g, dec, enc_row, &frontier)?;
            let mut open: Vec<(usize, u32, Vec<u32>, f64)> = Vec::new();
            for (i, node) in frontier.iter().enumerate() {
                if s < cfg.max_symbols_per_frame {
                    for k in regular.clone() {
                        let mut tokens = node.tokens.clone();
                        tokens.push(k);
                        open.push((i, k, tokens, node.score + lp[i][k as usize]));
                    }
                }
            }
            for (i, node) in frontier.iter().enumerate() {
                let score = node.score + lp[i][BLANK as usize];
                match done.iter_mut().find(|d| d.tokens == node.tokens) {
                    Some(d) => d.score = log_add_exp(d.score, score),
                    None => done.push(Node {
                        tokens: node.tokens.clone(),
                        score,
                        pred: node.pred.clone(),
                    }),
                }
            }
            let mut cands: Vec<Candidate> = (0..done.len()).map(Candidate::Done).collect();
            cands.extend((0..open.len()).map(Candidate::Open));
            let key = |c: &Candidate| -> (f64, &[u32], u8) {
                match *c {
                    Candidate::Done(i) => (done[i].score, &done[i].tokens, 0),
                    Candidate::Open(j) => (open[j].3, &open[j].2, 1),
                }
            };
            cands.sort_by(|a, b| {
                let (sa, ta, ka) = key(a);
                let (sb, tb, kb) = key(b);
                rank_parts(sa, ta, sb, tb).then(ka.cmp(&kb))
            });
            cands.truncate(cfg.beam);
            let mut keep_done = vec![false; done.len()];
            let mut kept_open = Vec::new();
            for c in &cands {
                match *c {
                    Candidate::Done(i) => keep_done[i] = true,
                    Candidate::Open(j) => kept_open.push(j),
                }
            }
            let mut idx = 0;
            done.retain(|_| {
                idx += 1;
                keep_done[idx - 1]
            });
            kept_open.sort_unstable();
            let mut next = Vec::with_capacity(kept_open.len());
            for j in kept_open {
                let (parent, token, ref tokens, score) = open[j];
                let pred = dec.predict(g, &[token], Some(&frontier[parent].pred))?;
                next.push(Node {
                    tokens: tokens.clone(),
                    score,
                    pred,
                });
            }
            frontier = next;
        }
        done.sort_by(|a, b| rank_parts(a.score, &a.tokens, b.score, &b.tokens));
        done.truncate(cfg.beam);
        beam = done;
    }
    Ok(Beam::new(
        beam.into_iter().map(|n| Hypothesis::new(n.tokens, n.score)).collect(),
    ))
}

/// Frame-by-frame argmax decoding over blank and the regular symbols.
pub fn greedy_decode(dec: &RnntDecoder, g: &mut Graph, e: Var, max_symbols_per_frame: usize) -> Result<Hypothesis> {
    let frames = g.value(e).rows();
    let enc = dec.project_encoder(g, e)?;
    let mut pred = dec.predict(g, &[BLANK], None)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for t in 0..frames {
        let enc_row = g.gather_rows(enc, &[t])?;
        for s in 0..=max_symbols_per_frame {
            let lp = dec.joint(g, enc_row, pred.joint)?;
            let row = g.value(lp).row(0);
            let mut best = BLANK;
            if s < max_symbols_per_frame {
                for k in FIRST_REGULAR..dec.vocab as u32 {
                    if row[k as usize] > row[best as usize] {
                        best = k;
                    }
                }
            }
            score += row[best as usize];
            if best == BLANK {
                break;
            }
            tokens.push(best);
            pred = dec.predict(g, &[best], Some(&pred))?;
        }
    }
    Ok(Hypothesis::new(tokens, score))
}
