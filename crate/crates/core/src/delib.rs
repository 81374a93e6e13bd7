//! Second-pass deliberation decoder (θ2): bidirectional hypothesis encoder,
//! optional additional acoustic encoder, text and acoustic multi-head
//! attention, and an attention decoder with input feeding.

use rand::Rng;

use crate::autodiff::{Graph, Group, ParamStore, Tensor, Var};
use crate::beam::Beam;
use crate::data::{pad_hypothesis, EOS, SOS};
use crate::error::{Error, Result};
use crate::layers::{AttentionSource, Embedding, Linear, LstmLayer, LstmState, MultiHeadAttention};
use crate::model::{AttentionMode, ModelConfig};

/// Encoded first-pass hypotheses `h_b`: `hyps · l_pad` rows, hypothesis `i`
/// occupying rows `[i·l_pad, (i+1)·l_pad)`.
#[derive(Clone, Debug)]
pub struct HypothesisEncoding {
    pub matrix: Var,
    pub hyps: usize,
    pub l_pad: usize,
    /// Padded token ids, one row per hypothesis.
    pub tokens: Vec<Vec<u32>>,
}

impl HypothesisEncoding {
    pub fn rows(&self) -> usize {
        self.hyps * self.l_pad
    }

    /// Index of the hypothesis that produced row `r`.
    pub fn source_of(&self, row: usize) -> usize {
        row / self.l_pad
    }

    /// Token at row `r`.
    pub fn token_at(&self, row: usize) -> u32 {
        self.tokens[row / self.l_pad][row % self.l_pad]
    }
}

/// Attention sources for one utterance, precomputed once per decode.
#[derive(Clone, Copy, Debug)]
pub struct DelibContext {
    pub mode: AttentionMode,
    pub text: Option<AttentionSource>,
    pub audio: Option<AttentionSource>,
}

/// Decoder recurrent state for a batch of partial outputs, including the
/// previous step's contexts that are fed back as input.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
    pub c_b: Var,
    pub c_e: Var,
}

impl DecoderState {
    /// Selects (and possibly repeats) batch rows.
    pub fn reorder(&self, g: &mut Graph, rows: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for st in &self.layers {
            layers.push(LstmState {
                h: g.gather_rows(st.h, rows)?,
                c: g.gather_rows(st.c, rows)?,
            });
        }
        Ok(Self {
            layers,
            c_b: g.gather_rows(self.c_b, rows)?,
            c_e: g.gather_rows(self.c_e, rows)?,
        })
    }
}

/// Output of one decoder step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `batch × vocab` unnormalised scores.
    pub logits: Var,
    pub state: DecoderState,
    /// Attention node over `h_b` (see [`Graph::attention_probs`]).
    pub text_weights: Option<Var>,
    /// Attention node over `e'`.
    pub audio_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DelibDecoder {
    pub hyp_embed: Embedding,
    pub bidi: Vec<(LstmLayer, LstmLayer)>,
    pub additional: Vec<LstmLayer>,
    pub text_att: MultiHeadAttention,
    pub audio_att: MultiHeadAttention,
    pub dec_embed: Embedding,
    pub dec_layers: Vec<LstmLayer>,
    pub output: Linear,
    pub l_pad: usize,
    pub ctx_dim: usize,
    pub vocab: usize,
}

impl DelibDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let grp = Group::Delib;
        let hyp_embed = Embedding::new(store, rng, grp, "delib.hyp_embed", cfg.vocab_size, cfg.hyp_emb);
        let mut input = cfg.hyp_emb;
        let mut bidi = Vec::with_capacity(cfg.bidi_layers);
        for i in 0..cfg.bidi_layers {
            let fwd = LstmLayer::new(store, rng, grp, &format!("delib.bidi{i}.fwd"), input, cfg.bidi_hidden, None);
            let bwd = LstmLayer::new(store, rng, grp, &format!("delib.bidi{i}.bwd"), input, cfg.bidi_hidden, None);
            input = 2 * cfg.bidi_hidden;
            bidi.push((fwd, bwd));
        }
        let enc_dim = cfg.encoder_dim();
        let additional = (0..cfg.ae_layers)
            .map(|i| LstmLayer::new(store, rng, grp, &format!("delib.ae{i}"), enc_dim, cfg.ae_hidden, Some(enc_dim)))
            .collect();
        let text_att = MultiHeadAttention::new(
            store,
            rng,
            grp,
            "delib.text_att",
            cfg.dec_hidden,
            cfg.hyp_enc_dim(),
            cfg.att_dim,
            cfg.ctx_dim,
            cfg.heads,
        )?;
        let audio_att = MultiHeadAttention::new(
            store,
            rng,
            grp,
            "delib.audio_att",
            cfg.dec_hidden,
            enc_dim,
            cfg.att_dim,
            cfg.ctx_dim,
            cfg.heads,
        )?;
        let dec_embed = Embedding::new(store, rng, grp, "delib.dec_embed", cfg.vocab_size, cfg.dec_emb);
        let mut input = cfg.dec_emb + 2 * cfg.ctx_dim;
        let mut dec_layers = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let layer = LstmLayer::new(store, rng, grp, &format!("delib.dec{i}"), input, cfg.dec_hidden, None);
            input = layer.output_dim;
            dec_layers.push(layer);
        }
        let output = Linear::new(store, rng, grp, "delib.output", cfg.dec_hidden + 2 * cfg.ctx_dim, cfg.vocab_size, true);
        Ok(Self {
            hyp_embed,
            bidi,
            additional,
            text_att,
            audio_att,
            dec_embed,
            dec_layers,
            output,
            l_pad: cfg.l_pad,
            ctx_dim: cfg.ctx_dim,
            vocab: cfg.vocab_size,
        })
    }

    pub fn has_additional_encoder(&self) -> bool {
        !self.additional.is_empty()
    }

    /// Encodes the top `h` hypotheses of `beam` (repeating the best one when
    /// the beam is shorter), each padded to `l_pad` and run independently
    /// through the shared bidirectional encoder.
    pub fn encode_hypotheses(&self, g: &mut Graph, beam: &Beam, h: usize) -> Result<HypothesisEncoding> {
        let top = beam.top().ok_or_else(|| Error::invalid("cannot encode an empty beam"))?;
        if h == 0 {
            return Err(Error::invalid("number of hypotheses must be positive"));
        }
        let tokens: Vec<Vec<u32>> = (0..h)
            .map(|i| {
                let hyp = beam.hyps().get(i).unwrap_or(top);
                pad_hypothesis(&hyp.tokens, self.l_pad)
            })
            .collect();
        self.encode_padded(g, tokens)
    }

    /// Bidirectional encoding of already padded token rows.
    pub fn encode_padded(&self, g: &mut Graph, tokens: Vec<Vec<u32>>) -> Result<HypothesisEncoding> {
        let hyps = tokens.len();
        if hyps == 0 || tokens.iter().any(|t| t.len() != self.l_pad) {
            return Err(Error::invalid(format!("hypotheses must be padded to {}", self.l_pad)));
        }
        let flat: Vec<u32> = tokens.concat();
        let mut x = self.hyp_embed.lookup(g, &flat)?;
        for (fwd, bwd) in &self.bidi {
            let f = fwd.run(g, x, hyps, self.l_pad, false)?;
            let b = bwd.run(g, x, hyps, self.l_pad, true)?;
            x = g.concat_cols(&[f, b])?;
        }
        Ok(HypothesisEncoding {
            matrix: x,
            hyps,
            l_pad: self.l_pad,
            tokens,
        })
    }

    /// `e'`: the additional encoder applied to `e`, or `e` itself when the
    /// encoder is absent or `enabled` is false.
    pub fn additional_encode(&self, g: &mut Graph, e: Var, enabled: bool) -> Result<Var> {
        if !enabled || self.additional.is_empty() {
            return Ok(e);
        }
        let len = g.value(e).rows();
        let mut x = e;
        for layer in &self.additional {
            x = layer.run(g, x, 1, len, false)?;
        }
        Ok(x)
    }

    /// Precomputes attention keys and values for the sides `mode` uses.
    pub fn context(
        &self,
        g: &mut Graph,
        e_prime: Var,
        hyps: Option<&HypothesisEncoding>,
        mode: AttentionMode,
    ) -> Result<DelibContext> {
        let text = if mode.uses_text() {
            let hb = hyps.ok_or_else(|| Error::invalid("text attention needs encoded hypotheses"))?;
            Some(self.text_att.precompute(g, hb.matrix)?)
        } else {
            None
        };
        let audio = if mode.uses_acoustics() {
            Some(self.audio_att.precompute(g, e_prime)?)
        } else {
            None
        };
        Ok(DelibContext { mode, text, audio })
    }

    pub fn initial_state(&self, g: &mut Graph, batch: usize) -> DecoderState {
        let layers = self.dec_layers.iter().map(|l| l.zero_state(g, batch)).collect();
        DecoderState {
            layers,
            c_b: g.input(Tensor::zeros(&[batch, self.ctx_dim])),
            c_e: g.input(Tensor::zeros(&[batch, self.ctx_dim])),
        }
    }

    /// One decoder step for a batch of previous tokens. The first LSTM layer
    /// reads `[embed(prev), c_b, c_e]` from the previous step; the new top
    /// hidden state queries both attentions; logits are an affine map of
    /// `[h, c_b, c_e]`. A side disabled by the mode contributes zeros.
    pub fn step(&self, g: &mut Graph, ctx: &DelibContext, prev: &[u32], state: &DecoderState) -> Result<StepOutput> {
        let batch = prev.len();
        let emb = self.dec_embed.lookup(g, prev)?;
        let mut x = g.concat_cols(&[emb, state.c_b, state.c_e])?;
        let mut layers = Vec::with_capacity(self.dec_layers.len());
        for (layer, st) in self.dec_layers.iter().zip(&state.layers) {
            let next = layer.step(g, x, st)?;
            x = next.h;
            layers.push(next);
        }
        let (c_b, text_weights) = match &ctx.text {
            Some(src) => {
                let (c, w) = self.text_att.attend(g, x, src)?;
                (c, Some(w))
            }
            None => (g.input(Tensor::zeros(&[batch, self.ctx_dim])), None),
        };
        let (c_e, audio_weights) = match &ctx.audio {
            Some(src) => {
                let (c, w) = self.audio_att.attend(g, x, src)?;
                (c, Some(w))
            }
            None => (g.input(Tensor::zeros(&[batch, self.ctx_dim])), None),
        };
        let feat = g.concat_cols(&[x, c_b, c_e])?;
        let logits = self.output.forward(g, feat)?;
        Ok(StepOutput {
            logits,
            state: DecoderState { layers, c_b, c_e },
            text_weights,
            audio_weights,
        })
    }

    /// Teacher-forced log-probabilities for a batch of sequences, each ending
    /// with `EOS`. Returns one scalar node per sequence.
    pub fn sequence_log_probs(&self, g: &mut Graph, ctx: &DelibContext, seqs: &[Vec<u32>]) -> Result<Vec<Var>> {
        let lp = self.teacher_forced_log_probs(g, ctx, seqs)?;
        let m = seqs.len();
        seqs.iter()
            .enumerate()
            .map(|(i, y)| {
                let idx: Vec<(usize, usize)> = y.iter().enumerate().map(|(k, &t)| (k * m + i, t as usize)).collect();
                let picked = g.pick(lp, &idx)?;
                g.sum(picked)
            })
            .collect()
    }

    /// `sum_k log p(y_k | y_<k)` for one sequence ending with `EOS`.
    pub fn sequence_log_prob(&self, g: &mut Graph, ctx: &DelibContext, y: &[u32]) -> Result<Var> {
        Ok(self.sequence_log_probs(g, ctx, &[y.to_vec()])?[0])
    }

    /// Mean per-token cross-entropy of `y` (ending with `EOS`).
    pub fn cross_entropy(&self, g: &mut Graph, ctx: &DelibContext, y: &[u32]) -> Result<Var> {
        check_terminated(y)?;
        let logits = self.teacher_forced_logits(g, ctx, &[y.to_vec()])?;
        let targets: Vec<usize> = y.iter().map(|&t| t as usize).collect();
        g.cross_entropy(logits, &targets)
    }

    fn teacher_forced_log_probs(&self, g: &mut Graph, ctx: &DelibContext, seqs: &[Vec<u32>]) -> Result<Var> {
        let logits = self.teacher_forced_logits(g, ctx, seqs)?;
        g.log_softmax(logits)
    }

    /// Logits for every step, stacked as rows `k·m + i` for sequence `i` and
    /// step `k`. Sequences shorter than the longest are fed `EOS` after their
    /// end; those rows are never read.
    fn teacher_forced_logits(&self, g: &mut Graph, ctx: &DelibContext, seqs: &[Vec<u32>]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::invalid("no sequences to score"));
        }
        for y in seqs {
            check_terminated(y)?;
            if let Some(&bad) = y.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(Error::TokenOutOfRange {
                    id: bad,
                    vocab: self.vocab,
                });
            }
        }
        let m = seqs.len();
        let n = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = self.initial_state(g, m);
        let mut rows = Vec::with_capacity(n);
        for k in 0..n {
            let prev: Vec<u32> = seqs
                .iter()
                .map(|y| if k == 0 { SOS } else { y.get(k - 1).copied().unwrap_or(EOS) })
                .collect();
            let out = self.step(g, ctx, &prev, &state)?;
            rows.push(out.logits);
            state = out.state;
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat_rows(&rows)
        }
    }
}

fn check_terminated(y: &[u32]) -> Result<()> {
    if y.last() != Some(&EOS) {
        return Err(Error::invalid("scored sequences must end with EOS"));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
