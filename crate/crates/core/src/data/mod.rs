//! Synthetic utterances, vocabulary, feature frontend and corpus files.

mod corpus;
mod frames;
mod synth;
mod vocab;

pub(crate) use corpus::Reader;
pub use corpus::{decode_corpus, encode_corpus, read_corpus, write_corpus, CORPUS_MAGIC, CORPUS_VERSION};
pub use frames::{stack_downsample, FrameSequence};
pub use synth::{generate_utterance, SyntheticTask, TaskConfig};
pub use vocab::{Vocab, BLANK, EOS, FIRST_REGULAR, SOS};

use crate::error::{Error, Result};

/// Acoustic frames paired with their reference transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    frames: FrameSequence,
    reference: Vec<u32>,
}

impl Utterance {
    pub fn new(frames: FrameSequence, reference: Vec<u32>) -> Result<Self> {
        if frames.frames() == 0 {
            return Err(Error::invalid("utterance needs at least one frame"));
        }
        if let Some(&t) = reference.iter().find(|&&t| Vocab::is_reserved(t)) {
            return Err(Error::invalid(format!("reserved token {t} in reference")));
        }
        Ok(Self { frames, reference })
    }

    pub fn frames(&self) -> &FrameSequence {
        &self.frames
    }

    pub fn reference(&self) -> &[u32] {
        &self.reference
    }
}

/// Pads with `EOS` to exactly `l_pad` tokens. Longer inputs keep their first
/// `l_pad - 1` tokens followed by `EOS`.
pub fn pad_hypothesis(tokens: &[u32], l_pad: usize) -> Vec<u32> {
    assert!(l_pad >= 1, "pad length must be positive");
    if tokens.len() > l_pad {
        let mut out = tokens[..l_pad - 1].to_vec();
        out.push(EOS);
        return out;
    }
    let mut out = tokens.to_vec();
    out.resize(l_pad, EOS);
    out
}
