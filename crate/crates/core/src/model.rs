//! Complete two-pass model: shared encoder, RNN-T decoder and deliberation
//! decoder, built deterministically from a [`ModelConfig`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::config::Settings;
use crate::data::{stack_downsample, FrameSequence, FIRST_REGULAR};
use crate::delib::DelibDecoder;
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::rnnt::{RnntDecoder, SharedEncoder};

/// Which attention contexts feed the second-pass decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Both,
    AcousticsOnly,
    TextOnly,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [Self::Both, Self::AcousticsOnly, Self::TextOnly];

    pub fn uses_text(self) -> bool {
        matches!(self, Self::Both | Self::TextOnly)
    }

    pub fn uses_acoustics(self) -> bool {
        matches!(self, Self::Both | Self::AcousticsOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::AcousticsOnly => "acoustic",
            Self::TextOnly => "text",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "acoustic" | "acoustics" | "acoustics_only" => Ok(Self::AcousticsOnly),
            "text" | "text_only" => Ok(Self::TextOnly),
            other => Err(Error::invalid(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Architecture hyper-parameters. All dimensions are in units of values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Total vocabulary size including the reserved ids.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub stack_prev: usize,
    pub stride: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub enc_proj: usize,
    pub time_reduction_after: usize,
    pub time_reduction_factor: usize,
    pub pred_emb: usize,
    pub pred_layers: usize,
    pub pred_hidden: usize,
    pub pred_proj: usize,
    pub joint_dim: usize,
    pub hyp_emb: usize,
    pub bidi_layers: usize,
    pub bidi_hidden: usize,
    pub ae_layers: usize,
    pub ae_hidden: usize,
    pub att_dim: usize,
    pub heads: usize,
    pub ctx_dim: usize,
    pub dec_emb: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub l_pad: usize,
    pub attention: AttentionMode,
}

/// Config keys that define the model architecture; stored in checkpoints.
pub const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "feature_dim",
    "stack_prev",
    "stride",
    "enc_layers",
    "enc_hidden",
    "enc_proj",
    "time_reduction_after",
    "time_reduction_factor",
    "pred_emb",
    "pred_layers",
    "pred_hidden",
    "pred_proj",
    "joint_dim",
    "hyp_emb",
    "bidi_layers",
    "bidi_hidden",
    "ae_layers",
    "ae_hidden",
    "att_dim",
    "heads",
    "ctx_dim",
    "dec_emb",
    "dec_layers",
    "dec_hidden",
    "l_pad",
    "attention",
];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::from_settings(&Settings::default()).expect("default settings are valid")
    }
}

impl ModelConfig {
    /// `vocab_size` in settings counts regular symbols only.
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let c = Self {
            vocab_size: s.usize("vocab_size")? + FIRST_REGULAR as usize,
            feature_dim: s.usize("feature_dim")?,
            stack_prev: s.usize("stack_prev")?,
            stride: s.usize("stride")?,
            enc_layers: s.usize("enc_layers")?,
            enc_hidden: s.usize("enc_hidden")?,
            enc_proj: s.usize("enc_proj")?,
            time_reduction_after: s.usize("time_reduction_after")?,
            time_reduction_factor: s.usize("time_reduction_factor")?,
            pred_emb: s.usize("pred_emb")?,
            pred_layers: s.usize("pred_layers")?,
            pred_hidden: s.usize("pred_hidden")?,
            pred_proj: s.usize("pred_proj")?,
            joint_dim: s.usize("joint_dim")?,
            hyp_emb: s.usize("hyp_emb")?,
            bidi_layers: s.usize("bidi_layers")?,
            bidi_hidden: s.usize("bidi_hidden")?,
            ae_layers: s.usize("ae_layers")?,
            ae_hidden: s.usize("ae_hidden")?,
            att_dim: s.usize("att_dim")?,
            heads: s.usize("heads")?,
            ctx_dim: s.usize("ctx_dim")?,
            dec_emb: s.usize("dec_emb")?,
            dec_layers: s.usize("dec_layers")?,
            dec_hidden: s.usize("dec_hidden")?,
            l_pad: s.usize("l_pad")?,
            attention: s.get("attention").parse()?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Writes the architecture keys back into `settings`.
    pub fn apply_to(&self, settings: &mut Settings) -> Result<()> {
        let regular = self.vocab_size - FIRST_REGULAR as usize;
        let pairs: [(&str, String); 27] = [
            ("vocab_size", regular.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("stack_prev", self.stack_prev.to_string()),
            ("stride", self.stride.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_hidden", self.enc_hidden.to_string()),
            ("enc_proj", self.enc_proj.to_string()),
            ("time_reduction_after", self.time_reduction_after.to_string()),
            ("time_reduction_factor", self.time_reduction_factor.to_string()),
            ("pred_emb", self.pred_emb.to_string()),
            ("pred_layers", self.pred_layers.to_string()),
            ("pred_hidden", self.pred_hidden.to_string()),
            ("pred_proj", self.pred_proj.to_string()),
            ("joint_dim", self.joint_dim.to_string()),
            ("hyp_emb", self.hyp_emb.to_string()),
            ("bidi_layers", self.bidi_layers.to_string()),
            ("bidi_hidden", self.bidi_hidden.to_string()),
            ("ae_layers", self.ae_layers.to_string()),
            ("ae_hidden", self.ae_hidden.to_string()),
            ("att_dim", self.att_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ctx_dim", self.ctx_dim.to_string()),
            ("dec_emb", self.dec_emb.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("dec_hidden", self.dec_hidden.to_string()),
            ("l_pad", self.l_pad.to_string()),
            ("attention", self.attention.name().to_string()),
        ];
        for (k, v) in pairs {
            settings.set(k, &v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = Settings::default();
        self.apply_to(&mut s)?;
        Ok(s.subset_text(MODEL_KEYS))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_settings(&Settings::from_text(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("stride", self.stride),
            ("enc_layers", self.enc_layers),
            ("enc_hidden", self.enc_hidden),
            ("time_reduction_factor", self.time_reduction_factor),
            ("pred_emb", self.pred_emb),
            ("pred_layers", self.pred_layers),
            ("pred_hidden", self.pred_hidden),
            ("joint_dim", self.joint_dim),
            ("hyp_emb", self.hyp_emb),
            ("bidi_layers", self.bidi_layers),
            ("bidi_hidden", self.bidi_hidden),
            ("att_dim", self.att_dim),
            ("heads", self.heads),
            ("ctx_dim", self.ctx_dim),
            ("dec_emb", self.dec_emb),
            ("dec_layers", self.dec_layers),
            ("dec_hidden", self.dec_hidden),
            ("l_pad", self.l_pad),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.vocab_size <= FIRST_REGULAR as usize {
            return Err(Error::EmptyVocab);
        }
        if self.time_reduction_after >= self.enc_layers {
            return Err(Error::invalid("time_reduction_after must be below enc_layers"));
        }
        if self.att_dim % self.heads != 0 {
            return Err(Error::invalid("heads must divide att_dim"));
        }
        if self.ae_layers > 0 && self.ae_hidden == 0 {
            return Err(Error::invalid("ae_hidden must be positive when ae_layers > 0"));
        }
        Ok(())
    }

    /// Input dimension of the encoder after frame stacking.
    pub fn frontend_dim(&self) -> usize {
        self.feature_dim * (self.stack_prev + 1)
    }

    /// Output dimension of the shared encoder.
    pub fn encoder_dim(&self) -> usize {
        if self.enc_proj > 0 {
            self.enc_proj
        } else {
            self.enc_hidden
        }
    }

    /// Row width of the hypothesis encoding.
    pub fn hyp_enc_dim(&self) -> usize {
        2 * self.bidi_hidden
    }

    /// Small dimensions for exhaustive and finite-difference tests.
    pub fn tiny(regular_vocab: usize) -> Self {
        Self {
            vocab_size: regular_vocab + FIRST_REGULAR as usize,
            feature_dim: 3,
            stack_prev: 0,
            stride: 1,
            enc_layers: 2,
            enc_hidden: 4,
            enc_proj: 3,
            time_reduction_after: 1,
            time_reduction_factor: 1,
            pred_emb: 3,
            pred_layers: 1,
            pred_hidden: 4,
            pred_proj: 0,
            joint_dim: 4,
            hyp_emb: 3,
            bidi_layers: 1,
            bidi_hidden: 2,
            ae_layers: 1,
            ae_hidden: 4,
            att_dim: 4,
            heads: 2,
            ctx_dim: 3,
            dec_emb: 3,
            dec_layers: 1,
            dec_hidden: 4,
            l_pad: 5,
            attention: AttentionMode::Both,
        }
    }
}

/// All parameters and the layer descriptors that index into them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: SharedEncoder,
    pub rnnt: RnntDecoder,
    pub delib: DelibDecoder,
}

impl Model {
    /// Builds the parameter layout and initialises it from `seed` with
    /// [`Init::Uniform`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = SharedEncoder::new(&mut params, &mut rng, &config);
        let rnnt = RnntDecoder::new(&mut params, &mut rng, &config);
        let delib = DelibDecoder::new(&mut params, &mut rng, &config)?;
        Ok(Self {
            config,
            params,
            encoder,
            rnnt,
            delib,
        })
    }

    /// Like [`Model::new`], then redraws every weight matrix under `init`.
    /// Biases stay zero.
    pub fn with_init(config: ModelConfig, seed: u64, init: Init) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        if init == Init::Uniform {
            return Ok(model);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let p = model.params.param(id);
            if p.tensor.shape().len() < 2 {
                continue;
            }
            let scale = init.scale(&p.name, p.tensor.rows(), p.tensor.cols());
            for v in model.params.get_mut(id).values_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
        Ok(model)
    }

    /// Stacked and downsampled encoder input.
    pub fn features(&self, frames: &FrameSequence) -> Result<FrameSequence> {
        if frames.dim() != self.config.feature_dim {
            return Err(Error::shape(
                "features",
                &[frames.frames(), frames.dim()],
                &[frames.frames(), self.config.feature_dim],
            ));
        }
        stack_downsample(frames, self.config.stack_prev, self.config.stride)
    }

    /// Shared encoding `e` of raw frames, recorded on `g`.
    pub fn encode(&self, g: &mut Graph, frames: &FrameSequence) -> Result<Var> {
        let feats = self.features(frames)?;
        let x = g.input(feats.to_tensor()?);
        self.encoder.encode(g, x)
    }
}
