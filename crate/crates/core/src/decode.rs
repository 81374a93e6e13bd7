//! Two-pass decoding: first-pass beam search followed by either a
//! label-synchronous second-pass beam search or rescoring of the first-pass
//! n-best list.

use std::fmt::Write as _;

use crate::autodiff::{log_softmax_in_place, Graph, Var};
use crate::beam::{rank, rank_parts, Beam, Hypothesis};
use crate::data::{Utterance, EOS, FIRST_REGULAR, SOS};
use crate::delib::{DelibContext, DelibDecoder};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Model};
use crate::rnnt::{beam_search, SearchConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub first_beam: usize,
    pub second_beam: usize,
    pub hyps: usize,
    pub mode: AttentionMode,
    pub use_ae: bool,
    pub max_symbols_per_frame: usize,
    pub length_norm: bool,
    /// Second-pass length cap including `EOS`; `None` means `2·l_pad`.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            first_beam: 8,
            second_beam: 8,
            hyps: 8,
            mode: AttentionMode::Both,
            use_ae: true,
            max_symbols_per_frame: 4,
            length_norm: false,
            max_len: None,
        }
    }
}

impl DecodeConfig {
    pub fn from_settings(s: &crate::config::Settings) -> Result<Self> {
        Ok(Self {
            first_beam: s.usize("first_beam")?,
            second_beam: s.usize("second_beam")?,
            hyps: s.usize("hyps")?,
            mode: s.get("attention").parse()?,
            use_ae: s.bool("use_ae")?,
            max_symbols_per_frame: s.usize("max_symbols_per_frame")?,
            length_norm: s.bool("length_norm")?,
            max_len: None,
        })
    }

    fn first_pass(&self) -> SearchConfig {
        SearchConfig {
            beam: self.first_beam,
            max_symbols_per_frame: self.max_symbols_per_frame,
        }
    }
}

/// First-pass beam and the deliberation output for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPassOutput {
    pub first: Beam,
    pub second: Beam,
}

/// Shared encoding and first-pass beam, recorded on `g`.
pub fn first_pass(model: &Model, g: &mut Graph, utt: &Utterance, cfg: &DecodeConfig) -> Result<(Var, Beam)> {
    let e = model.encode(g, utt.frames())?;
    let beam = beam_search(&model.rnnt, g, e, cfg.first_pass())?;
    Ok((e, beam))
}

/// Attention context for the second pass over `e` and the top hypotheses of
/// `first`.
pub fn second_pass_context(
    model: &Model,
    g: &mut Graph,
    e: Var,
    first: &Beam,
    cfg: &DecodeConfig,
) -> Result<DelibContext> {
    let delib = &model.delib;
    let e_prime = delib.additional_encode(g, e, cfg.use_ae)?;
    let hb = if cfg.mode.uses_text() {
        Some(delib.encode_hypotheses(g, first, cfg.hyps)?)
    } else {
        None
    };
    delib.context(g, e_prime, hb.as_ref(), cfg.mode)
}

fn validate(cfg: &DecodeConfig) -> Result<()> {
    if cfg.first_beam == 0 || cfg.second_beam == 0 || cfg.hyps == 0 {
        return Err(Error::invalid("beam widths and hypothesis count must be positive"));
    }
    Ok(())
}

/// First pass, then second-pass beam search attending to `e'` and `h_b`.
pub fn decode_two_pass(model: &Model, utt: &Utterance, cfg: &DecodeConfig) -> Result<TwoPassOutput> {
    validate(cfg)?;
    let mut g = Graph::new(&model.params);
    let (e, first) = first_pass(model, &mut g, utt, cfg)?;
    let ctx = second_pass_context(model, &mut g, e, &first, cfg)?;
    let max_len = cfg.max_len.unwrap_or(2 * model.config.l_pad);
    let second = second_pass_search(&model.delib, &mut g, &ctx, cfg.second_beam, max_len, cfg.length_norm)?;
    Ok(TwoPassOutput { first, second })
}

/// First pass, then re-ranking of the first-pass beam by the teacher-forced
/// deliberation log-probability of each candidate.
pub fn rescore_first_pass(model: &Model, utt: &Utterance, cfg: &DecodeConfig) -> Result<TwoPassOutput> {
    validate(cfg)?;
    let mut g = Graph::new(&model.params);
    let (e, first) = first_pass(model, &mut g, utt, cfg)?;
    let ctx = second_pass_context(model, &mut g, e, &first, cfg)?;
    let second = rescore_beam(&model.delib, &mut g, &ctx, &first)?;
    Ok(TwoPassOutput { first, second })
}

/// Scores each candidate of `beam` by teacher forcing and re-sorts.
pub fn rescore_beam(delib: &DelibDecoder, g: &mut Graph, ctx: &DelibContext, beam: &Beam) -> Result<Beam> {
    if beam.is_empty() {
        return Err(Error::invalid("cannot rescore an empty beam"));
    }
    let seqs: Vec<Vec<u32>> = beam.iter().map(|h| terminated(&h.tokens)).collect();
    let scores = delib.sequence_log_probs(g, ctx, &seqs)?;
    let hyps = beam
        .iter()
        .zip(scores)
        .map(|(h, s)| Hypothesis::new(h.tokens.clone(), g.value(s).item()))
        .collect();
    Ok(Beam::new(hyps))
}

/// `tokens` followed by `EOS`.
pub fn terminated(tokens: &[u32]) -> Vec<u32> {
    let mut y = tokens.to_vec();
    y.push(EOS);
    y
}

struct Partial {
    tokens: Vec<u32>,
    score: f64,
}

/// Label-synchronous beam search over the deliberation decoder.
///
/// Every active prefix is extended by each regular symbol and by `EOS`; the
/// best `width` extensions survive. Extensions ending in `EOS` are finished.
/// Search stops when nothing is active, at `max_len` steps (the last step
/// only allows `EOS`), or once `width` finished hypotheses exist and the
/// worst of the best `width` finished scores is at least the best active
/// score (log-probabilities only decrease as a prefix grows). With
/// `length_norm`, finished hypotheses are ranked by score per output token
/// (including `EOS`) and the early stop is disabled.
pub fn second_pass_search(
    delib: &DelibDecoder,
    g: &mut Graph,
    ctx: &DelibContext,
    width: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<Beam> {
    if width == 0 || max_len == 0 {
        return Err(Error::invalid("second-pass width and length cap must be positive"));
    }
    let mut active = vec![Partial {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut state = delib.initial_state(g, 1);
    let mut finished: Vec<Hypothesis> = Vec::new();
    let vocab = delib.vocab as u32;
    for step in 0..max_len {
        let prev: Vec<u32> = active.iter().map(|p| p.tokens.last().copied().unwrap_or(SOS)).collect();
        let out = delib.step(g, ctx, &prev, &state)?;
        let logits = g.value(out.logits);
        let last = step + 1 == max_len;
        let mut cands: Vec<(usize, u32, Vec<u32>, f64)> = Vec::new();
        for (i, p) in active.iter().enumerate() {
            let mut row = logits.row(i).to_vec();
            log_softmax_in_place(&mut row);
            let labels = if last { EOS..EOS } else { FIRST_REGULAR..vocab };
            for k in labels.chain(std::iter::once(EOS)) {
                let mut tokens = p.tokens.clone();
                tokens.push(k);
                cands.push((i, k, tokens, p.score + row[k as usize]));
            }
        }
        cands.sort_by(|a, b| rank_parts(a.3, &a.2, b.3, &b.2));
        cands.truncate(width);
        let mut parents = Vec::new();
        let mut next = Vec::new();
        for (parent, k, mut tokens, score) in cands {
            if k == EOS {
                tokens.pop();
                finished.push(Hypothesis::new(tokens, score));
            } else {
                parents.push(parent);
                next.push(Partial { tokens, score });
            }
        }
        if next.is_empty() {
            break;
        }
        if !length_norm && finished.len() >= width {
            finished.sort_by(rank);
            let worst_kept = finished[width - 1].log_prob;
            let best_active = next.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
            if worst_kept >= best_active {
                break;
            }
        }
        state = out.state.reorder(g, &parents)?;
        active = next;
    }
    if length_norm {
        finished.sort_by(|a, b| {
            let na = a.log_prob / (a.tokens.len() + 1) as f64;
            let nb = b.log_prob / (b.tokens.len() + 1) as f64;
            rank_parts(na, &a.tokens, nb, &b.tokens)
        });
        finished.truncate(width);
        return Ok(Beam::from_ranked(finished));
    }
    let mut beam = Beam::new(finished);
    beam.truncate(width);
    Ok(beam)
}

/// Decode output line: `id<TAB>top-1 tokens<TAB>log-prob`.
pub fn format_top1(id: &str, beam: &Beam, render: impl Fn(&[u32]) -> String) -> String {
    match beam.top() {
        Some(h) => format!("{id}\t{}\t{:.6}", render(&h.tokens), h.log_prob),
        None => format!("{id}\t\t-inf"),
    }
}

/// n-best lines: `id<TAB>rank<TAB>tokens<TAB>log-prob`, rank starting at 1.
pub fn format_nbest(id: &str, beam: &Beam, render: impl Fn(&[u32]) -> String) -> String {
    let mut out = String::new();
    for (r, h) in beam.iter().enumerate() {
        let _ = writeln!(out, "{id}\t{}\t{}\t{:.6}", r + 1, render(&h.tokens), h.log_prob);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::FrameSequence;
    use crate::model::ModelConfig;

    fn tiny_model(regular: usize, seed: u64) -> Model {
        let mut m = Model::new(ModelConfig::tiny(regular), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0);
        m.params.randomize(1.0, &mut rng);
        m
    }

    fn utterance(t: usize, seed: u64) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Utterance::new(FrameSequence::new(t, 3, data).unwrap(), vec![3]).unwrap()
    }

    fn context<'a>(m: &'a Model, g: &mut Graph<'a>, utt: &Utterance, cfg: &DecodeConfig) -> DelibContext {
        let (e, first) = first_pass(m, g, utt, cfg).unwrap();
        second_pass_context(m, g, e, &first, cfg).unwrap()
    }

    #[test]
    fn width_one_equals_greedy_second_pass() {
        for seed in 0..10 {
            let m = tiny_model(3, seed);
            let utt = utterance(4, seed);
            let cfg = DecodeConfig {
                second_beam: 1,
                max_len: Some(6),
                ..DecodeConfig::default()
            };
            let out = decode_two_pass(&m, &utt, &cfg).unwrap();
            let mut g = Graph::new(&m.params);
            let ctx = context(&m, &mut g, &utt, &cfg);
            let mut state = m.delib.initial_state(&mut g, 1);
            let (mut prev, mut tokens, mut score) = (SOS, Vec::new(), 0.0);
            for step in 0..6 {
                let o = m.delib.step(&mut g, &ctx, &[prev], &state).unwrap();
                let mut row = g.value(o.logits).row(0).to_vec();
                log_softmax_in_place(&mut row);
                let mut best = EOS;
                if step < 5 {
                    for k in FIRST_REGULAR..m.config.vocab_size as u32 {
                        if row[k as usize] > row[best as usize] {
                            best = k;
                        }
                    }
                }
                score += row[best as usize];
                if best == EOS {
                    break;
                }
                tokens.push(best);
                prev = best;
                state = o.state;
            }
            assert_eq!(out.second.hyps(), &[Hypothesis::new(tokens, score)]);
        }
    }

    #[test]
    fn exhaustive_width_finds_best_sequence() {
        for seed in 0..8 {
            let m = tiny_model(2, 30 + seed);
            let utt = utterance(3, seed);
            let cfg = DecodeConfig {
                second_beam: 1000,
                max_len: Some(4),
                ..DecodeConfig::default()
            };
            let out = decode_two_pass(&m, &utt, &cfg).unwrap();
            let mut g = Graph::new(&m.params);
            let ctx = context(&m, &mut g, &utt, &cfg);
            let mut all: Vec<Vec<u32>> = vec![vec![]];
            let mut frontier = all.clone();
            for _ in 0..3 {
                frontier = frontier
                    .iter()
                    .flat_map(|p| [3u32, 4].map(|k| [p.clone(), vec![k]].concat()))
                    .collect();
                all.extend(frontier.clone());
            }
            let mut best: Option<(f64, Vec<u32>)> = None;
            for y in all {
                let lp = m.delib.sequence_log_prob(&mut g, &ctx, &terminated(&y)).unwrap();
                let s = g.value(lp).item();
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, y));
                }
            }
            assert_eq!(out.second.top().unwrap().tokens, best.unwrap().1, "seed {seed}");
        }
    }

    #[test]
    fn rescoring_permutes_and_recomputes() {
        let m = tiny_model(3, 5);
        let utt = utterance(6, 5);
        let cfg = DecodeConfig::default();
        let out = rescore_first_pass(&m, &utt, &cfg).unwrap();
        let mut a: Vec<_> = out.first.iter().map(|h| h.tokens.clone()).collect();
        let mut b: Vec<_> = out.second.iter().map(|h| h.tokens.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let mut g = Graph::new(&m.params);
        let ctx = context(&m, &mut g, &utt, &cfg);
        for h in out.second.iter() {
            let lp = m.delib.sequence_log_prob(&mut g, &ctx, &terminated(&h.tokens)).unwrap();
            assert!((g.value(lp).item() - h.log_prob).abs() <= 1e-9);
        }
        for w in out.second.hyps().windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
    }

    #[test]
    fn acoustics_only_ignores_first_pass() {
        let m = tiny_model(3, 6);
        let utt = utterance(5, 6);
        let base = DecodeConfig {
            mode: AttentionMode::AcousticsOnly,
            max_len: Some(8),
            ..DecodeConfig::default()
        };
        let reference = decode_two_pass(&m, &utt, &base).unwrap().second;
        for (first_beam, hyps) in [(1, 1), (2, 8), (8, 3)] {
            let cfg = DecodeConfig {
                first_beam,
                hyps,
                ..base
            };
            assert_eq!(decode_two_pass(&m, &utt, &cfg).unwrap().second, reference);
        }
        for w in reference.hyps().windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let m = tiny_model(3, 7);
        let utt = utterance(5, 7);
        let cfg = DecodeConfig {
            max_len: Some(8),
            ..DecodeConfig::default()
        };
        assert_eq!(decode_two_pass(&m, &utt, &cfg).unwrap(), decode_two_pass(&m, &utt, &cfg).unwrap());
    }

    #[test]
    fn output_lines() {
        let beam = Beam::new(vec![Hypothesis::new(vec![3, 4], -0.25), Hypothesis::new(vec![5], -1.5)]);
        let render = |t: &[u32]| t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        assert_eq!(format_top1("u1", &beam, render), "u1\t3 4\t-0.250000");
        assert_eq!(format_nbest("u1", &beam, render), "u1\t1\t3 4\t-0.250000\nu1\t2\t5\t-1.500000\n");
    }
}
