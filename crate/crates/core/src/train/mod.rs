//! Training stages: RNN-T, deliberation cross-entropy with a frozen first
//! pass, expected word-error fine-tuning, and joint training, plus
//! checkpoint files.

mod checkpoint;
mod mwer;
mod optim;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_settings, read_checkpoint, save_checkpoint, save_checkpoint_with_settings,
    Checkpoint, ParamGroup, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use mwer::{combine_with_ce, mwer_loss, mwer_value, word_errors, MwerBatchStats};
pub use optim::{Optimizer, OptimizerKind};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Group, Tensor, Var};
use crate::beam::Beam;
use crate::config::Settings;
use crate::data::Utterance;
use crate::decode::{first_pass, second_pass_context, second_pass_search, terminated, DecodeConfig};
use crate::delib::{DelibContext, DelibDecoder};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::parallel_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Rnnt,
    DelibCe,
    Mwer,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rnnt => "rnnt",
            Self::DelibCe => "delib-ce",
            Self::Mwer => "mwer",
            Self::Joint => "joint",
        }
    }

    /// Parameter groups updated by this stage.
    pub fn trainable(self) -> &'static [Group] {
        match self {
            Self::Rnnt => &[Group::Enc, Group::Rnnt],
            Self::DelibCe | Self::Mwer => &[Group::Delib],
            Self::Joint => &Group::ALL,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnnt" => Ok(Self::Rnnt),
            "delib-ce" | "delib_ce" => Ok(Self::DelibCe),
            "mwer" => Ok(Self::Mwer),
            "joint" => Ok(Self::Joint),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`; the rate moves
    /// linearly between the two. `1` keeps it constant.
    pub lr_final_scale: f64,
    /// Decoupled weight decay; `0` disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Cross-entropy weight in the expected-error objective.
    pub alpha: f64,
    /// Deliberation cross-entropy weight in joint training.
    pub lambda: f64,
    /// n-best size for the expected-error objective.
    pub mwer_beam: usize,
    pub threads: usize,
    /// First-pass search and attention setup used while training the
    /// second pass.
    pub decode: DecodeConfig,
}

impl TrainConfig {
    pub fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            lr_final_scale: 1.0,
            clip_norm: 0.0,
            weight_decay: 0.0,
            steps: 200,
            batch_size: 8,
            seed,
            alpha: 0.01,
            lambda: 1.0,
            mwer_beam: 4,
            threads: 1,
            decode: DecodeConfig::default(),
        }
    }

    pub fn from_settings(s: &Settings) -> Result<Self> {
        let cfg = Self {
            stage: s.get("stage").parse()?,
            optimizer: s.get("optimizer").parse()?,
            lr: s.f64("lr")?,
            lr_final_scale: s.f64("lr_final_scale")?,
            clip_norm: s.f64("clip_norm")?,
            weight_decay: s.f64("weight_decay")?,
            steps: s.usize("steps")?,
            batch_size: s.usize("batch_size")?,
            seed: s.seed()?,
            alpha: s.f64("alpha")?,
            lambda: s.f64("lambda")?,
            mwer_beam: s.usize("mwer_beam")?,
            threads: s.usize("threads")?,
            decode: DecodeConfig::from_settings(s)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate used for `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let progress = (step.saturating_sub(1)) as f64 / (self.steps - 1) as f64;
        self.lr * (1.0 - progress * (1.0 - self.lr_final_scale))
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.stage == Stage::Mwer && self.mwer_beam < 2 {
            return Err(Error::invalid("mwer_beam must be at least 2"));
        }
        if !(self.lr_final_scale > 0.0 && self.lr_final_scale <= 1.0) {
            return Err(Error::invalid("lr_final_scale must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::invalid("batch_size and threads must be positive"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    /// Mean per-utterance objective over the batch, before the update.
    pub loss: f64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,stage,loss,wall_ms";

impl StepLog {
    /// CSV line; the loss is printed in shortest round-trip form.
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.stage, self.loss, self.wall_ms)
    }
}

/// `-log P(reference | x)` under the first pass.
pub fn rnnt_objective(model: &Model, g: &mut Graph, utt: &Utterance) -> Result<Var> {
    let e = model.encode(g, utt.frames())?;
    model.rnnt.loss(g, e, utt.reference())
}

/// Mean per-token cross-entropy of the reference (plus `EOS`) under the
/// deliberation decoder.
pub fn ce_objective(delib: &DelibDecoder, g: &mut Graph, ctx: &DelibContext, reference: &[u32]) -> Result<Var> {
    delib.cross_entropy(g, ctx, &terminated(reference))
}

/// Expected-error objective over `nbest` combined with `alpha` times the
/// reference cross-entropy.
pub fn mwer_objective(
    delib: &DelibDecoder,
    g: &mut Graph,
    ctx: &DelibContext,
    nbest: &[Vec<u32>],
    reference: &[u32],
    alpha: f64,
) -> Result<(Var, MwerBatchStats)> {
    let seqs: Vec<Vec<u32>> = nbest.iter().map(|h| terminated(h)).collect();
    let scores = delib.sequence_log_probs(g, ctx, &seqs)?;
    let errors: Vec<usize> = nbest.iter().map(|h| word_errors(h, reference)).collect();
    let (mwer, stats) = mwer_loss(g, &scores, &errors)?;
    let ce = ce_objective(delib, g, ctx, reference)?;
    Ok((combine_with_ce(g, mwer, ce, alpha)?, stats))
}

/// `L_RNNT + lambda · L_CE` with the second pass attending to the shared
/// encoding, so the encoder receives gradient from both terms. `first` is
/// the first-pass beam for this utterance.
pub fn joint_objective(
    model: &Model,
    g: &mut Graph,
    utt: &Utterance,
    first: &Beam,
    lambda: f64,
    cfg: &DecodeConfig,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    let e = model.encode(g, utt.frames())?;
    let rnnt = model.rnnt.loss(g, e, utt.reference())?;
    let ctx = second_pass_context(model, g, e, first, cfg)?;
    let ce = ce_objective(&model.delib, g, &ctx, utt.reference())?;
    let weighted = g.scale(ce, lambda)?;
    g.add(rnnt, weighted)
}

/// Shared encoding (as a constant) and first-pass beam from the current
/// parameters.
pub fn frozen_first_pass(model: &Model, utt: &Utterance, cfg: &DecodeConfig) -> Result<(Tensor, Beam)> {
    let mut g = Graph::new(&model.params);
    let (e, beam) = first_pass(model, &mut g, utt, cfg)?;
    Ok((g.value(e).clone(), beam))
}

/// Objective value and gradients for one utterance, or `None` when the
/// utterance contributes nothing (an n-best list shorter than two).
pub fn utterance_loss(model: &Model, utt: &Utterance, cfg: &TrainConfig) -> Result<Option<(f64, Gradients)>> {
    let mut g = Graph::new(&model.params);
    let loss = match cfg.stage {
        Stage::Rnnt => rnnt_objective(model, &mut g, utt)?,
        Stage::DelibCe => {
            let (e, first) = frozen_first_pass(model, utt, &cfg.decode)?;
            let e = g.input(e);
            let ctx = second_pass_context(model, &mut g, e, &first, &cfg.decode)?;
            ce_objective(&model.delib, &mut g, &ctx, utt.reference())?
        }
        Stage::Mwer => {
            let (e, first) = frozen_first_pass(model, utt, &cfg.decode)?;
            let e = g.input(e);
            let ctx = second_pass_context(model, &mut g, e, &first, &cfg.decode)?;
            let max_len = cfg.decode.max_len.unwrap_or(2 * model.config.l_pad);
            let nbest = second_pass_search(&model.delib, &mut g, &ctx, cfg.mwer_beam, max_len, false)?;
            if nbest.len() < 2 {
                return Ok(None);
            }
            let hyps: Vec<Vec<u32>> = nbest.iter().map(|h| h.tokens.clone()).collect();
            mwer_objective(&model.delib, &mut g, &ctx, &hyps, utt.reference(), cfg.alpha)?.0
        }
        Stage::Joint => {
            let (_, first) = frozen_first_pass(model, utt, &cfg.decode)?;
            joint_objective(model, &mut g, utt, &first, cfg.lambda, &cfg.decode)?
        }
    };
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok(Some((value, grads)))
}

/// Deterministic stream of corpus indices: a fresh seeded permutation per
/// epoch.
struct BatchStream {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.epoch));
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut rng);
                    self.epoch += 1;
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Runs `cfg.steps` optimisation steps of `cfg.stage` on `model`. Per-batch
/// work is spread over `cfg.threads` workers; gradients are summed in batch
/// order, so results do not depend on the thread count. `on_step` sees each
/// log line as it is produced.
pub fn train(
    model: &mut Model,
    corpus: &[Utterance],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip_norm, cfg.stage.trainable(), &model.params)?
        .with_weight_decay(cfg.weight_decay)?;
    let mut stream = BatchStream::new(cfg.seed, corpus.len());
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let start = Instant::now();
        opt.set_lr(cfg.lr_at(step))?;
        let batch = stream.next_batch(cfg.batch_size);
        let shared: &Model = model;
        let results = parallel_map(cfg.threads, &batch, |&i| utterance_loss(shared, &corpus[i], cfg))?;
        let mut total = Gradients::zeros_like(&model.params);
        let mut loss = 0.0;
        let mut used = 0usize;
        for (value, grads) in results.into_iter().flatten() {
            loss += value;
            total.add_assign(&grads);
            used += 1;
        }
        if used > 0 {
            loss /= used as f64;
            total.scale(1.0 / used as f64);
            opt.apply(&mut model.params, &total)?;
        }
        let record = StepLog {
            step,
            stage: cfg.stage,
            loss,
            wall_ms: start.elapsed().as_millis(),
        };
        on_step(&record);
        logs.push(record);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests;
