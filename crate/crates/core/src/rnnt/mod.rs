//! Streaming first pass: causal shared encoder with time reduction, RNN-T
//! prediction and joint networks, transducer loss and beam search.

mod search;

pub use search::{beam_search, greedy_decode, SearchConfig};

use rand::Rng;

use crate::autodiff::{Graph, Group, Var};
use crate::autodiff::ParamStore;
use crate::data::BLANK;
use crate::error::{Error, Result};
use crate::layers::{Embedding, Linear, LstmLayer, LstmState};
use crate::model::ModelConfig;

/// Concatenates `factor` consecutive rows of `x`. The final group is padded
/// by repeating the last row, so the output has `ceil(T / factor)` rows.
pub fn time_reduce(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    if factor == 0 {
        return Err(Error::invalid("time reduction factor must be positive"));
    }
    if factor == 1 {
        return Ok(x);
    }
    let t_len = g.value(x).rows();
    let out_len = t_len.div_ceil(factor);
    let mut parts = Vec::with_capacity(factor);
    for j in 0..factor {
        let idx: Vec<usize> = (0..out_len).map(|k| (k * factor + j).min(t_len - 1)).collect();
        parts.push(g.gather_rows(x, &idx)?);
    }
    g.concat_cols(&parts)
}

/// Unidirectional LSTM stack (θe) with a time-reduction stage before layer
/// `reduce_before`.
#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub layers: Vec<LstmLayer>,
    pub reduce_before: usize,
    pub factor: usize,
}

impl SharedEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let proj = (cfg.enc_proj > 0).then_some(cfg.enc_proj);
        let mut input = cfg.frontend_dim();
        let mut layers = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            if i == cfg.time_reduction_after {
                input *= cfg.time_reduction_factor;
            }
            let layer = LstmLayer::new(store, rng, Group::Enc, &format!("enc.lstm{i}"), input, cfg.enc_hidden, proj);
            input = layer.output_dim;
            layers.push(layer);
        }
        Self {
            layers,
            reduce_before: cfg.time_reduction_after,
            factor: cfg.time_reduction_factor,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    /// Encodes a `T × input_dim` matrix into `ceil(T / factor) × output_dim`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut x = x;
        if g.value(x).rows() == 0 {
            return Err(Error::invalid("cannot encode zero frames"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if i == self.reduce_before {
                x = time_reduce(g, x, self.factor)?;
            }
            let len = g.value(x).rows();
            x = layer.run(g, x, 1, len, false)?;
        }
        Ok(x)
    }
}

/// Prediction network output and recurrent state for a batch of prefixes.
#[derive(Clone, Debug)]
pub struct PredState {
    /// `batch × joint_dim`: prediction output already projected into the
    /// joint space.
    pub joint: Var,
    pub layers: Vec<LstmState>,
}

/// Prediction network, joint network and output layer (θ1).
#[derive(Clone, Debug)]
pub struct RnntDecoder {
    pub embed: Embedding,
    pub layers: Vec<LstmLayer>,
    pub joint_enc: Linear,
    pub joint_pred: Linear,
    pub output: Linear,
    pub vocab: usize,
}

impl RnntDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let embed = Embedding::new(store, rng, Group::Rnnt, "rnnt.embed", cfg.vocab_size, cfg.pred_emb);
        let proj = (cfg.pred_proj > 0).then_some(cfg.pred_proj);
        let mut input = cfg.pred_emb;
        let mut layers = Vec::with_capacity(cfg.pred_layers);
        for i in 0..cfg.pred_layers {
            let layer = LstmLayer::new(store, rng, Group::Rnnt, &format!("rnnt.pred{i}"), input, cfg.pred_hidden, proj);
            input = layer.output_dim;
            layers.push(layer);
        }
        let enc_dim = cfg.encoder_dim();
        let joint_enc = Linear::new(store, rng, Group::Rnnt, "rnnt.joint_enc", enc_dim, cfg.joint_dim, true);
        let joint_pred = Linear::new(store, rng, Group::Rnnt, "rnnt.joint_pred", input, cfg.joint_dim, false);
        let output = Linear::new(store, rng, Group::Rnnt, "rnnt.output", cfg.joint_dim, cfg.vocab_size, true);
        Self {
            embed,
            layers,
            joint_enc,
            joint_pred,
            output,
            vocab: cfg.vocab_size,
        }
    }

    /// Encoder frames projected into the joint space.
    pub fn project_encoder(&self, g: &mut Graph, e: Var) -> Result<Var> {
        self.joint_enc.forward(g, e)
    }

    /// Advances the prediction network by one token per batch row, starting
    /// from zero state when `prev` is `None`.
    pub fn predict(&self, g: &mut Graph, tokens: &[u32], prev: Option<&PredState>) -> Result<PredState> {
        let mut x = self.embed.lookup(g, tokens)?;
        let mut states = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let st = match prev {
                Some(p) => p.layers[i],
                None => layer.zero_state(g, tokens.len()),
            };
            let next = layer.step(g, x, &st)?;
            x = next.h;
            states.push(next);
        }
        let joint = self.joint_pred.forward(g, x)?;
        Ok(PredState { joint, layers: states })
    }

    /// Joint-space prediction outputs for the prefixes `[], [y1], …, [y1..yU]`
    /// as a `(U+1) × joint_dim` matrix. The network is primed with blank.
    pub fn predict_sequence(&self, g: &mut Graph, labels: &[u32]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(labels.len() + 1);
        inputs.push(BLANK);
        inputs.extend_from_slice(labels);
        let mut x = self.embed.lookup(g, &inputs)?;
        for layer in &self.layers {
            x = layer.run(g, x, 1, inputs.len(), false)?;
        }
        self.joint_pred.forward(g, x)
    }

    /// Log-probabilities over the vocabulary for every (enc row, pred row)
    /// pair: row `t·P + p` of a `(T·P) × vocab` matrix.
    pub fn joint(&self, g: &mut Graph, enc_joint: Var, pred_joint: Var) -> Result<Var> {
        let z = g.outer_add(enc_joint, pred_joint)?;
        let z = g.tanh(z)?;
        let logits = self.output.forward(g, z)?;
        g.log_softmax(logits)
    }

    /// Transducer loss `-log P(labels | e)` summed over all alignments.
    pub fn loss(&self, g: &mut Graph, e: Var, labels: &[u32]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.vocab,
            });
        }
        let frames = g.value(e).rows();
        let enc = self.project_encoder(g, e)?;
        let pred = self.predict_sequence(g, labels)?;
        let lp = self.joint(g, enc, pred)?;
        let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
        g.rnnt_loss(lp, &targets, frames, BLANK as usize)
    }
}
