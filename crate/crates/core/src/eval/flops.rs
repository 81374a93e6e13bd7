//! Second-pass cost model: bidirectional hypothesis encoding, decoder steps
//! and two attention layers.

use crate::autodiff::ParamStore;
use crate::model::{AttentionMode, Model};

/// Parameter sizes of one attention layer, split into the source side
/// (applied once per source frame) and the query side (applied once per
/// decoded token).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSize {
    pub source: f64,
    pub query: f64,
}

impl AttentionSize {
    /// `params` split evenly between the two sides.
    pub fn even(params: f64) -> Self {
        Self {
            source: params / 2.0,
            query: params / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsInput {
    /// Bidirectional hypothesis encoder size.
    pub m_b: f64,
    /// Attention decoder size.
    pub m_d: f64,
    /// Decoded tokens.
    pub n: f64,
    /// First-pass hypotheses attended to.
    pub h: f64,
    /// Second-pass beam size.
    pub b: f64,
    /// Acoustic attention source length.
    pub t_frames: f64,
    /// Padded hypothesis length; the text source has `h · l_pad` rows.
    pub l_pad: f64,
    pub acoustic: Option<AttentionSize>,
    pub text: Option<AttentionSize>,
}

impl FlopsInput {
    /// Sizes quoted for the full-scale deliberation decoder: 22M encoder,
    /// 42M decoder, 2M attention parameters over two layers, 8 hypotheses,
    /// beam 8, 14 tokens, 109 frames, hypotheses padded to 120.
    pub fn reference_deliberation() -> Self {
        Self {
            m_b: 22e6,
            m_d: 42e6,
            n: 14.0,
            h: 8.0,
            b: 8.0,
            t_frames: 109.0,
            l_pad: 120.0,
            acoustic: Some(AttentionSize::even(1e6)),
            text: Some(AttentionSize::even(1e6)),
        }
    }

    /// The same decoder with only acoustic attention and no hypothesis
    /// encoder: the cost of an attention-decoder second pass.
    pub fn without_text(self) -> Self {
        Self {
            m_b: 0.0,
            h: 0.0,
            text: None,
            ..self
        }
    }
}

/// `M_B·N·H + M_D·N·B + Σ_layers (source·T_source + query·N)` where the
/// acoustic layer's `T_source` is `t_frames` and the text layer's is
/// `h · l_pad`.
pub fn estimate_flops(f: &FlopsInput) -> f64 {
    let mut total = f.m_b * f.n * f.h + f.m_d * f.n * f.b;
    if let Some(a) = f.acoustic {
        total += a.source * f.t_frames + a.query * f.n;
    }
    if let Some(t) = f.text {
        total += t.source * f.h * f.l_pad + t.query * f.n;
    }
    total
}

fn sum_params(store: &ParamStore, prefixes: &[&str]) -> f64 {
    store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(_, p)| p.tensor.len())
        .sum::<usize>() as f64
}

/// Cost-model sizes of a built model for a given decode setup.
pub fn model_flops_input(model: &Model, mode: AttentionMode, n: f64, h: f64, b: f64, t_frames: f64) -> FlopsInput {
    let p = &model.params;
    let text = mode.uses_text().then(|| AttentionSize {
        source: sum_params(p, &["delib.text_att.wk", "delib.text_att.wv"]),
        query: sum_params(p, &["delib.text_att.wq", "delib.text_att.wo"]),
    });
    let acoustic = mode.uses_acoustics().then(|| AttentionSize {
        source: sum_params(p, &["delib.audio_att.wk", "delib.audio_att.wv"]),
        query: sum_params(p, &["delib.audio_att.wq", "delib.audio_att.wo"]),
    });
    let (m_b, h) = if mode.uses_text() {
        (sum_params(p, &["delib.hyp_embed", "delib.bidi"]), h)
    } else {
        (0.0, 0.0)
    };
    FlopsInput {
        m_b,
        m_d: sum_params(p, &["delib.dec", "delib.output"]),
        n,
        h,
        b,
        t_frames,
        l_pad: model.config.l_pad as f64,
        acoustic,
        text,
    }
}
