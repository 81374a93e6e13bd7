//! Line-oriented `key = value` run configuration.
//!
//! Every key has a default; a config file overrides defaults and explicit
//! overrides (command-line flags) override the file. Unknown and duplicate
//! keys are errors. [`Settings::to_text`] prints a file that reproduces the
//! same resolved configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    OptionalU64,
    Choice(&'static [&'static str]),
}

struct KeySpec {
    name: &'static str,
    default: &'static str,
    kind: Kind,
}

const fn key(name: &'static str, default: &'static str, kind: Kind) -> KeySpec {
    KeySpec { name, default, kind }
}

pub const ATTENTION_MODES: &[&str] = &["both", "acoustic", "text"];
pub const STAGES: &[&str] = &["rnnt", "delib-ce", "mwer", "joint"];
pub const OPTIMIZERS: &[&str] = &["sgd", "adam"];
pub const INITS: &[&str] = &["uniform", "fan-in"];
pub const DECODE_MODES: &[&str] = &["beam", "rescore", "first-pass"];

use Kind::*;

static KEYS: &[KeySpec] = &[
    // synthetic task
    key("vocab_size", "16", Usize),
    key("feature_dim", "8", Usize),
    key("min_len", "2", Usize),
    key("max_len", "10", Usize),
    key("frames_per_token", "6", Usize),
    key("noise_sigma", "0.5", F64),
    key("signature_seed", "1234", U64),
    key("utterances", "200", Usize),
    // frontend
    key("stack_prev", "3", Usize),
    key("stride", "3", Usize),
    // shared encoder
    key("enc_layers", "2", Usize),
    key("enc_hidden", "32", Usize),
    key("enc_proj", "16", Usize),
    key("time_reduction_after", "1", Usize),
    key("time_reduction_factor", "2", Usize),
    // RNN-T decoder
    key("pred_emb", "16", Usize),
    key("pred_layers", "1", Usize),
    key("pred_hidden", "32", Usize),
    key("pred_proj", "16", Usize),
    key("joint_dim", "32", Usize),
    // deliberation decoder
    key("hyp_emb", "16", Usize),
    key("bidi_layers", "1", Usize),
    key("bidi_hidden", "16", Usize),
    key("ae_layers", "2", Usize),
    key("ae_hidden", "32", Usize),
    key("att_dim", "32", Usize),
    key("heads", "4", Usize),
    key("ctx_dim", "32", Usize),
    key("dec_emb", "16", Usize),
    key("dec_layers", "1", Usize),
    key("dec_hidden", "32", Usize),
    key("l_pad", "24", Usize),
    key("attention", "both", Choice(ATTENTION_MODES)),
    // decoding
    key("first_beam", "8", Usize),
    key("second_beam", "8", Usize),
    key("hyps", "8", Usize),
    key("max_symbols_per_frame", "4", Usize),
    key("length_norm", "false", Bool),
    key("use_ae", "true", Bool),
    key("decode_mode", "beam", Choice(DECODE_MODES)),
    // training
    key("stage", "rnnt", Choice(STAGES)),
    key("init", "uniform", Choice(INITS)),
    key("optimizer", "sgd", Choice(OPTIMIZERS)),
    key("lr", "0.1", F64),
    key("lr_final_scale", "1", F64),
    key("clip_norm", "0", F64),
    key("weight_decay", "0", F64),
    key("steps", "200", Usize),
    key("batch_size", "8", Usize),
    key("alpha", "0.01", F64),
    key("lambda", "1.0", F64),
    key("mwer_beam", "4", Usize),
    key("seed", "", OptionalU64),
    key("threads", "1", Usize),
];

fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

fn validate(spec: &KeySpec, value: &str) -> std::result::Result<(), String> {
    let ok = match spec.kind {
        Usize => value.parse::<usize>().is_ok(),
        U64 => value.parse::<u64>().is_ok(),
        F64 => value.parse::<f64>().is_ok_and(f64::is_finite),
        Bool => matches!(value, "true" | "false" | "on" | "off"),
        OptionalU64 => value.is_empty() || value.parse::<u64>().is_ok(),
        Choice(options) => options.contains(&value),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("invalid value {value:?} for {}", spec.name))
    }
}

/// Parses config text into key/value pairs. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            msg: format!("expected `key = value`, got {raw:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        let spec = spec(k).ok_or_else(|| Error::Config {
            line: line_no,
            msg: format!("unknown key {k:?}"),
        })?;
        validate(spec, v).map_err(|msg| Error::Config { line: line_no, msg })?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config {
                line: line_no,
                msg: format!("duplicate key {k:?}"),
            });
        }
    }
    Ok(out)
}

/// Fully resolved configuration: one value for every known key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl Settings {
    /// Defaults, then `file_text`, then `overrides`.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Self::default();
        if let Some(text) = file_text {
            for (k, v) in parse_config(text)? {
                s.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(Some(text), &[])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec(key).ok_or_else(|| Error::invalid(format!("unknown config key {key:?}")))?;
        validate(spec, value).map_err(Error::InvalidArgument)?;
        self.values.insert(spec.name, value.to_string());
        Ok(())
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Result<Self> {
        self.set(key, &value.to_string())?;
        Ok(self)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::invalid(format!("invalid value for {key}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        Ok(matches!(self.get(key), "true" | "on"))
    }

    /// The run seed; required by data generation and training.
    pub fn seed(&self) -> Result<u64> {
        match self.get("seed") {
            "" => Err(Error::invalid("a seed is required (--seed or `seed = ...`)")),
            s => s.parse().map_err(|_| Error::invalid("invalid seed")),
        }
    }

    /// `key = value` lines for every key, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Only the listed keys, in the given order.
    pub fn subset_text(&self, keys: &[&str]) -> String {
        keys.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }
}
