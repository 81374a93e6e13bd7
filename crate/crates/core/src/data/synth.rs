use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use super::{FrameSequence, Utterance, Vocab};
use crate::error::{Error, Result};

/// Parameters of the synthetic transcription task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub feature_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    /// Seed of the per-token signature vectors (fixed for a task).
    pub signature_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            min_len: 2,
            max_len: 10,
            frames_per_token: 6,
            noise_sigma: 0.5,
            signature_seed: 1234,
        }
    }
}

impl TaskConfig {
    pub fn from_settings(s: &crate::config::Settings) -> Result<Self> {
        let cfg = Self {
            feature_dim: s.usize("feature_dim")?,
            min_len: s.usize("min_len")?,
            max_len: s.usize("max_len")?,
            frames_per_token: s.usize("frames_per_token")?,
            noise_sigma: s.f64("noise_sigma")?,
            signature_seed: s.u64("signature_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::invalid(format!(
                "need max_len >= min_len >= 1, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.frames_per_token < 1 {
            return Err(Error::invalid("frames_per_token must be at least 1"));
        }
        if self.feature_dim < 1 {
            return Err(Error::invalid("feature_dim must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Task instance: each regular token owns a fixed random unit vector; an
/// utterance repeats each token's vector `frames_per_token` times plus noise.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    vocab: Vocab,
    config: TaskConfig,
    signatures: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(vocab: Vocab, config: TaskConfig) -> Result<Self> {
        config.validate()?;
        if vocab.regular_count() == 0 {
            return Err(Error::EmptyVocab);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.signature_seed);
        let signatures = (0..vocab.regular_count())
            .map(|_| {
                let v: Vec<f64> = (0..config.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(Self {
            vocab,
            config,
            signatures,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// Signature vector of a regular token.
    pub fn signature(&self, token: u32) -> &[f64] {
        &self.signatures[(token - self.vocab.regular_ids().start) as usize]
    }

    pub fn generate(&self, seed: u64) -> Utterance {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let ids = self.vocab.regular_ids();
        let reference: Vec<u32> = (0..len).map(|_| rng.random_range(ids.clone())).collect();
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        let frames = len * cfg.frames_per_token;
        let mut data = Vec::with_capacity(frames * cfg.feature_dim);
        for &tok in &reference {
            let sig = self.signature(tok);
            for _ in 0..cfg.frames_per_token {
                for &s in sig {
                    let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push((s + n) as f32);
                }
            }
        }
        let frames = FrameSequence::new(frames, cfg.feature_dim, data).expect("finite by construction");
        Utterance::new(frames, reference).expect("valid by construction")
    }

    /// `count` utterances with seeds `seed, seed+1, ...`; independent of the
    /// number of worker threads. Corpora whose seed ranges overlap share
    /// utterances.
    pub fn generate_corpus(&self, seed: u64, count: usize) -> Vec<Utterance> {
        (0..count)
            .into_par_iter()
            .map(|i| self.generate(seed.wrapping_add(i as u64)))
            .collect()
    }

    /// Maps each frame to the token with the nearest signature and collapses
    /// runs of `frames_per_token`. Exact on noise-free utterances.
    pub fn nearest_signature_decode(&self, frames: &FrameSequence) -> Vec<u32> {
        let fpt = self.config.frames_per_token;
        (0..frames.frames() / fpt)
            .map(|k| {
                let mut mean = vec![0.0; frames.dim()];
                for t in k * fpt..(k + 1) * fpt {
                    for (m, &v) in mean.iter_mut().zip(frames.frame(t)) {
                        *m += v as f64 / fpt as f64;
                    }
                }
                self.vocab
                    .regular_ids()
                    .min_by(|&a, &b| {
                        let da = dist2(&mean, self.signature(a));
                        let db = dist2(&mean, self.signature(b));
                        da.total_cmp(&db)
                    })
                    .expect("vocab non-empty")
            })
            .collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One-shot generation without keeping the task around.
pub fn generate_utterance(seed: u64, vocab: &Vocab, config: &TaskConfig) -> Result<Utterance> {
    Ok(SyntheticTask::new(vocab.clone(), config.clone())?.generate(seed))
}
