//! Word error rate, corpus decoding, attention traces and the ablation
//! report.

mod flops;
mod heatmap;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

pub use flops::{estimate_flops, model_flops_input, AttentionSize, FlopsInput};
pub use heatmap::{
    export_heatmap, heatmap_csv, heatmap_pgm, parse_heatmap_csv, parse_pgm, pixel, AttentionWeights,
};

use crate::autodiff::Graph;
use crate::beam::Beam;
use crate::data::{Utterance, EOS, SOS};
use crate::decode::{decode_two_pass, first_pass, rescore_first_pass, DecodeConfig, TwoPassOutput};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Model};
use crate::parallel::parallel_map;
use crate::train::word_errors;

/// Total edit distance over total reference length.
pub fn compute_wer(refs: &[Vec<u32>], hyps: &[Vec<u32>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::invalid("references contain no words"));
    }
    let errors: usize = refs.iter().zip(hyps).map(|(r, h)| word_errors(h, r)).sum();
    Ok(errors as f64 / words as f64)
}

/// Which output an evaluation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecodeKind {
    /// Top first-pass hypothesis.
    FirstPass,
    /// Second-pass beam search.
    Beam,
    /// Second-pass rescoring of the first-pass beam.
    Rescore,
}

impl DecodeKind {
    pub fn name(self) -> &'static str {
        match self {
            DecodeKind::FirstPass => "first-pass",
            DecodeKind::Beam => "beam",
            DecodeKind::Rescore => "rescore",
        }
    }
}

impl fmt::Display for DecodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-pass" => Ok(DecodeKind::FirstPass),
            "beam" => Ok(DecodeKind::Beam),
            "rescore" => Ok(DecodeKind::Rescore),
            _ => Err(Error::invalid(format!("unknown decode mode {s:?}"))),
        }
    }
}

/// Decodes one utterance. For [`DecodeKind::FirstPass`] both beams are the
/// first-pass beam.
pub fn decode_utterance(model: &Model, utt: &Utterance, cfg: &DecodeConfig, kind: DecodeKind) -> Result<TwoPassOutput> {
    match kind {
        DecodeKind::Beam => decode_two_pass(model, utt, cfg),
        DecodeKind::Rescore => rescore_first_pass(model, utt, cfg),
        DecodeKind::FirstPass => {
            let mut g = Graph::new(&model.params);
            let (_, first) = first_pass(model, &mut g, utt, cfg)?;
            Ok(TwoPassOutput {
                second: first.clone(),
                first,
            })
        }
    }
}

/// Decodes every utterance on up to `threads` workers, preserving order.
pub fn decode_corpus(
    model: &Model,
    corpus: &[Utterance],
    cfg: &DecodeConfig,
    kind: DecodeKind,
    threads: usize,
) -> Result<Vec<TwoPassOutput>> {
    parallel_map(threads, corpus, |utt| decode_utterance(model, utt, cfg, kind))
}

fn top_tokens(beam: &Beam) -> Vec<u32> {
    beam.top().map(|h| h.tokens.clone()).unwrap_or_default()
}

/// Corpus WER of the top hypothesis of each beam.
pub fn beams_wer(corpus: &[Utterance], beams: &[&Beam]) -> Result<f64> {
    let refs: Vec<Vec<u32>> = corpus.iter().map(|u| u.reference().to_vec()).collect();
    let hyps: Vec<Vec<u32>> = beams.iter().map(|b| top_tokens(b)).collect();
    compute_wer(&refs, &hyps)
}

/// Corpus statistics of one decode run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub wer: f64,
    pub first_pass_wer: f64,
    /// Mean top-1 output length including `EOS`.
    pub mean_tokens: f64,
    /// Mean encoder frames.
    pub mean_frames: f64,
    pub outputs: Vec<TwoPassOutput>,
}

/// Decodes `corpus` and scores both passes.
pub fn evaluate(
    model: &Model,
    corpus: &[Utterance],
    cfg: &DecodeConfig,
    kind: DecodeKind,
    threads: usize,
) -> Result<EvalResult> {
    let outputs = decode_corpus(model, corpus, cfg, kind, threads)?;
    let second: Vec<&Beam> = outputs.iter().map(|o| &o.second).collect();
    let first: Vec<&Beam> = outputs.iter().map(|o| &o.first).collect();
    let n = corpus.len().max(1) as f64;
    let mean_tokens = second.iter().map(|b| top_tokens(b).len() + 1).sum::<usize>() as f64 / n;
    let frames = parallel_map(threads, corpus, |u| Ok(model.features(u.frames())?.frames()))?;
    let factor = model.config.time_reduction_factor.max(1);
    let reduced = |t: usize| if model.config.time_reduction_after < model.config.enc_layers { t.div_ceil(factor) } else { t };
    let mean_frames = frames.iter().map(|&t| reduced(t)).sum::<usize>() as f64 / n;
    Ok(EvalResult {
        wer: beams_wer(corpus, &second)?,
        first_pass_wer: beams_wer(corpus, &first)?,
        mean_tokens,
        mean_frames,
        outputs,
    })
}

/// Attention side recorded by [`attention_trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSide {
    Text,
    Acoustic,
}

/// Per-step attention weights while re-reading a decoded output.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub weights: AttentionWeights,
    /// Output token read at each step, ending with `EOS`.
    pub outputs: Vec<u32>,
    /// For text attention, the first-pass token at each source row (`None`
    /// for acoustic frames).
    pub sources: Vec<Option<u32>>,
    pub result: TwoPassOutput,
}

/// Decodes `utt` with `kind`, then teacher-forces the top output and
/// records the head-averaged weights of `side` at each step.
pub fn attention_trace(
    model: &Model,
    utt: &Utterance,
    cfg: &DecodeConfig,
    kind: DecodeKind,
    side: AttentionSide,
) -> Result<AttentionTrace> {
    let needed = match side {
        AttentionSide::Text => cfg.mode.uses_text(),
        AttentionSide::Acoustic => cfg.mode.uses_acoustics(),
    };
    if !needed {
        return Err(Error::invalid(format!("attention mode {} has no {side:?} attention", cfg.mode)));
    }
    let result = decode_utterance(model, utt, cfg, kind)?;
    let delib = &model.delib;
    let mut g = Graph::new(&model.params);
    let e = model.encode(&mut g, utt.frames())?;
    let e_prime = delib.additional_encode(&mut g, e, cfg.use_ae)?;
    let hb = if cfg.mode.uses_text() {
        Some(delib.encode_hypotheses(&mut g, &result.first, cfg.hyps)?)
    } else {
        None
    };
    let ctx = delib.context(&mut g, e_prime, hb.as_ref(), cfg.mode)?;
    let mut outputs = top_tokens(&result.second);
    outputs.push(EOS);
    let mut state = delib.initial_state(&mut g, 1);
    let mut prev = SOS;
    let mut values = Vec::new();
    let mut cols = 0;
    for &y in &outputs {
        let out = delib.step(&mut g, &ctx, &[prev], &state)?;
        let node = match side {
            AttentionSide::Text => out.text_weights,
            AttentionSide::Acoustic => out.audio_weights,
        }
        .ok_or_else(|| Error::invalid("attention weights missing"))?;
        let probs = g
            .attention_probs(node)
            .ok_or_else(|| Error::invalid("attention weights missing"))?;
        cols = probs.sources;
        values.extend(probs.averaged());
        state = out.state;
        prev = y;
    }
    let sources = match (side, &hb) {
        (AttentionSide::Text, Some(hb)) => (0..hb.rows()).map(|r| Some(hb.token_at(r))).collect(),
        _ => vec![None; cols],
    };
    let weights = AttentionWeights::new(outputs.len(), cols, renormalised(values, cols))?;
    Ok(AttentionTrace {
        weights,
        outputs,
        sources,
        result,
    })
}

/// Head averaging can leave rows a few ulps away from one; rescales each.
fn renormalised(mut values: Vec<f64>, cols: usize) -> Vec<f64> {
    for row in values.chunks_mut(cols.max(1)) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p = (*p / s).clamp(0.0, 1.0));
    }
    values
}

/// One deliberation configuration in the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationKey {
    pub mode: AttentionMode,
    pub hyps: usize,
    pub ae: bool,
}

impl AblationKey {
    /// File name of the checkpoint trained for this configuration.
    pub fn checkpoint_name(&self) -> String {
        format!(
            "delib-{}-h{}-ae{}.ckpt",
            self.mode,
            self.hyps,
            if self.ae { "on" } else { "off" }
        )
    }
}

/// Grid of configurations evaluated by [`run_ablation`].
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub modes: Vec<AttentionMode>,
    pub hyps: Vec<usize>,
    pub ae: Vec<bool>,
    pub decode: Vec<DecodeKind>,
}

impl AblationGrid {
    /// Model configurations in report order (mode, then H, then AE).
    pub fn keys(&self) -> Vec<AblationKey> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &hyps in &self.hyps {
                for &ae in &self.ae {
                    out.push(AblationKey { mode, hyps, ae });
                }
            }
        }
        out
    }

    pub fn rows(&self) -> usize {
        1 + self.keys().len() * self.decode.len()
    }
}

/// One line of the ablation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub config_id: String,
    pub key: Option<AblationKey>,
    pub decode: DecodeKind,
    pub wer: f64,
    pub gflops: Option<f64>,
    /// Decode wall time; not part of the CSV, which stays reproducible.
    pub decode_ms: u128,
}

pub const REPORT_HEADER: &str = "config_id,mode,H,AE,decode,wer,gflops";

impl ReportRow {
    pub fn csv(&self) -> String {
        let (mode, h, ae) = match &self.key {
            Some(k) => (
                k.mode.name().to_string(),
                k.hyps.to_string(),
                if k.ae { "on" } else { "off" }.to_string(),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let gflops = self.gflops.map(|g| format!("{g:.6}")).unwrap_or_default();
        format!(
            "{},{mode},{h},{ae},{},{:.6},{gflops}",
            self.config_id, self.decode, self.wer
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }
}

/// Evaluates the first pass of `baseline` and every grid configuration,
/// loading each model through `load`. Second-pass rows carry the cost-model
/// estimate at the evaluated sizes; the first-pass row has none.
pub fn run_ablation<F>(
    corpus: &[Utterance],
    baseline: &Model,
    grid: &AblationGrid,
    base: &DecodeConfig,
    threads: usize,
    mut load: F,
) -> Result<Report>
where
    F: FnMut(&AblationKey) -> Result<Model>,
{
    if grid.modes.is_empty() || grid.hyps.is_empty() || grid.ae.is_empty() || grid.decode.is_empty() {
        return Err(Error::invalid("ablation grid has an empty axis"));
    }
    if grid.decode.contains(&DecodeKind::FirstPass) {
        return Err(Error::invalid("the first pass is always reported and is not a grid decode mode"));
    }
    let start = Instant::now();
    let first = evaluate(baseline, corpus, base, DecodeKind::FirstPass, threads)?;
    let mut rows = vec![ReportRow {
        config_id: "first-pass".into(),
        key: None,
        decode: DecodeKind::FirstPass,
        wer: first.wer,
        gflops: None,
        decode_ms: start.elapsed().as_millis(),
    }];
    for key in grid.keys() {
        let model = load(&key)?;
        for &decode in &grid.decode {
            let cfg = DecodeConfig {
                mode: key.mode,
                hyps: key.hyps,
                use_ae: key.ae,
                ..*base
            };
            let start = Instant::now();
            let res = evaluate(&model, corpus, &cfg, decode, threads)?;
            let decode_ms = start.elapsed().as_millis();
            let b = match decode {
                DecodeKind::Rescore => cfg.first_beam,
                _ => cfg.second_beam,
            } as f64;
            let sizes = model_flops_input(&model, key.mode, res.mean_tokens, key.hyps as f64, b, res.mean_frames);
            rows.push(ReportRow {
                config_id: format!("{}-h{}-ae{}-{}", key.mode, key.hyps, if key.ae { "on" } else { "off" }, decode),
                key: Some(key),
                decode,
                wer: res.wer,
                gflops: Some(estimate_flops(&sizes) / 1e9),
                decode_ms,
            });
        }
    }
    Ok(Report { rows })
}
