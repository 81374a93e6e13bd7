//! Parameterised building blocks recorded onto a [`Graph`]: affine maps,
//! embeddings, LSTM layers with optional projection, multi-head attention.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Group, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Half-width of the default uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.05;

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Every weight uniform in `±INIT_SCALE`.
    Uniform,
    /// Weight matrices uniform in `±1/√fan_in`, embedding tables in `±1`.
    FanIn,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::FanIn => "fan-in",
        }
    }

    /// Half-width for the parameter `name` of shape `[rows, cols]`. LSTM gate
    /// matrices take the layer's hidden size as fan-in.
    pub fn scale(self, name: &str, rows: usize, cols: usize) -> f64 {
        match self {
            Self::Uniform => INIT_SCALE,
            Self::FanIn if name.ends_with(".table") => 1.0,
            Self::FanIn if name.ends_with(".wx") || name.ends_with(".wh") => fan_in_scale(cols / 4),
            Self::FanIn => fan_in_scale(rows),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "fan-in" => Ok(Self::FanIn),
            other => Err(Error::invalid(format!("unknown init {other:?}"))),
        }
    }
}

fn fan_in_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        group: Group,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add_uniform(group, format!("{name}.w"), &[in_dim, out_dim], INIT_SCALE, rng);
        let b = bias.then(|| store.add_zeros(group, format!("{name}.b"), &[out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.affine(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        group: Group,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = store.add_uniform(group, format!("{name}.table"), &[vocab, dim], INIT_SCALE, rng);
        Self { table, vocab, dim }
    }

    /// `ids.len() × dim` matrix of embedding rows.
    pub fn lookup(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.vocab,
            });
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = g.param(self.table);
        g.gather_rows(table, &idx)
    }
}

/// Recurrent state of one LSTM layer for a batch of rows. `h` is the layer
/// output (after projection, when the layer has one).
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// LSTM layer with gate layout `[input, forget, candidate, output]` and an
/// optional bias-free output projection fed back as the recurrent input.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub proj: Option<ParamId>,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
}

impl LstmLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        group: Group,
        name: &str,
        input_dim: usize,
        hidden: usize,
        proj: Option<usize>,
    ) -> Self {
        let output_dim = proj.unwrap_or(hidden);
        let wx = store.add_uniform(group, format!("{name}.wx"), &[input_dim, 4 * hidden], INIT_SCALE, rng);
        let wh = store.add_uniform(group, format!("{name}.wh"), &[output_dim, 4 * hidden], INIT_SCALE, rng);
        let b = store.add_zeros(group, format!("{name}.b"), &[4 * hidden]);
        let proj = proj.map(|p| store.add_uniform(group, format!("{name}.proj"), &[hidden, p], INIT_SCALE, rng));
        Self {
            wx,
            wh,
            b,
            proj,
            input_dim,
            hidden,
            output_dim,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        LstmState {
            h: g.input(Tensor::zeros(&[batch, self.output_dim])),
            c: g.input(Tensor::zeros(&[batch, self.hidden])),
        }
    }

    /// One time step for a `batch × input_dim` input.
    pub fn step(&self, g: &mut Graph, x: Var, state: &LstmState) -> Result<LstmState> {
        let (wx, b) = (g.param(self.wx), g.param(self.b));
        let xp = g.affine(x, wx, b)?;
        self.step_projected(g, xp, state)
    }

    fn step_projected(&self, g: &mut Graph, xp: Var, state: &LstmState) -> Result<LstmState> {
        let wh = g.param(self.wh);
        let hp = g.matmul(state.h, wh)?;
        let gates = g.add(xp, hp)?;
        let c = g.lstm_cell(gates, state.c)?;
        let h = g.lstm_output(gates, c)?;
        let h = match self.proj {
            Some(p) => {
                let p = g.param(p);
                g.matmul(h, p)?
            }
            None => h,
        };
        Ok(LstmState { h, c })
    }

    /// Runs the layer over `batch` independent sequences of length `len`
    /// stored in `x` with row `b·len + t`. Output rows use the same layout.
    pub fn run(&self, g: &mut Graph, x: Var, batch: usize, len: usize, reverse: bool) -> Result<Var> {
        let xt = g.value(x);
        if xt.rows() != batch * len || xt.cols() != self.input_dim {
            return Err(Error::shape("lstm run", xt.shape(), &[batch * len, self.input_dim]));
        }
        let (wx, b) = (g.param(self.wx), g.param(self.b));
        let xp = g.affine(x, wx, b)?;
        let mut state = self.zero_state(g, batch);
        let mut outputs = vec![state.h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let rows: Vec<usize> = (0..batch).map(|bi| bi * len + t).collect();
            let xt = if batch == 1 && len == 1 { xp } else { g.gather_rows(xp, &rows)? };
            state = self.step_projected(g, xt, &state)?;
            outputs[t] = state.h;
        }
        let stacked = g.concat_rows(&outputs)?;
        if batch == 1 {
            return Ok(stacked);
        }
        let perm: Vec<usize> = (0..batch)
            .flat_map(|bi| (0..len).map(move |t| t * batch + bi))
            .collect();
        g.gather_rows(stacked, &perm)
    }
}

/// One LSTM step, as a free function over an explicit layer.
pub fn lstm_step(g: &mut Graph, x: Var, state: &LstmState, layer: &LstmLayer) -> Result<LstmState> {
    layer.step(g, x, state)
}

/// Projected keys and values of an attention source, computed once per
/// utterance and reused across decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSource {
    pub keys: Var,
    pub values: Var,
    pub len: usize,
}

/// Multi-head attention with bias-free query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub query_dim: usize,
    pub source_dim: usize,
    pub att_dim: usize,
    pub out_dim: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        group: Group,
        name: &str,
        query_dim: usize,
        source_dim: usize,
        att_dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || att_dim % heads != 0 {
            return Err(Error::invalid(format!(
                "{heads} attention heads do not divide attention dim {att_dim}"
            )));
        }
        let mut mk = |suffix: &str, r: usize, c: usize| {
            store.add_uniform(group, format!("{name}.{suffix}"), &[r, c], INIT_SCALE, rng)
        };
        let wq = mk("wq", query_dim, att_dim);
        let wk = mk("wk", source_dim, att_dim);
        let wv = mk("wv", source_dim, att_dim);
        let wo = mk("wo", att_dim, out_dim);
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            query_dim,
            source_dim,
            att_dim,
            out_dim,
        })
    }

    pub fn precompute(&self, g: &mut Graph, source: Var) -> Result<AttentionSource> {
        let len = g.value(source).rows();
        if len == 0 {
            return Err(Error::invalid("attention over an empty source"));
        }
        let (wk, wv) = (g.param(self.wk), g.param(self.wv));
        let keys = g.matmul(source, wk)?;
        let values = g.matmul(source, wv)?;
        Ok(AttentionSource { keys, values, len })
    }

    /// Returns the `m × out_dim` context and the attention node holding the
    /// per-head probabilities (see [`Graph::attention_probs`]).
    pub fn attend(&self, g: &mut Graph, query: Var, src: &AttentionSource) -> Result<(Var, Var)> {
        let wq = g.param(self.wq);
        let q = g.matmul(query, wq)?;
        let att = g.attention(q, src.keys, src.values, self.heads)?;
        let wo = g.param(self.wo);
        let ctx = g.matmul(att, wo)?;
        Ok((ctx, att))
    }
}
