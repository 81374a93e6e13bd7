//! Versioned checkpoint files: run settings text plus named parameter groups.
//!
//! Layout (little-endian): magic `DLBK`, version `u32`, config text (`u32`
//! length + UTF-8), group count, then per group its name, parameter count and
//! per parameter the name, rank, dims (`u32`) and `f64` values.

use std::fs;
use std::path::Path;

use crate::autodiff::{Group, Tensor};
use crate::config::Settings;
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLBK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters of one group, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub group: Group,
    pub params: Vec<(String, Tensor)>,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub groups: Vec<ParamGroup>,
}

impl Checkpoint {
    /// Snapshot of every parameter group of `model`.
    pub fn from_model(model: &Model) -> Result<Self> {
        let groups = Group::ALL
            .into_iter()
            .map(|group| ParamGroup {
                group,
                params: model
                    .params
                    .iter()
                    .filter(|(_, p)| p.group == group)
                    .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
                    .collect(),
            })
            .collect();
        Ok(Self {
            config_text: model.config.to_text()?,
            groups,
        })
    }

    /// Snapshot that also records the run settings, so later runs can
    /// default to them. The architecture keys must describe `model`.
    pub fn with_settings(model: &Model, settings: &Settings) -> Result<Self> {
        if ModelConfig::from_settings(settings)? != model.config {
            return Err(Error::invalid("settings do not describe the model architecture"));
        }
        Ok(Self {
            config_text: settings.to_text(),
            ..Self::from_model(model)?
        })
    }

    /// Settings stored with the checkpoint; keys it does not mention keep
    /// their defaults.
    pub fn settings(&self) -> Result<Settings> {
        Settings::from_text(&self.config_text)
    }

    /// Rebuilds the model described by the config text and loads every
    /// stored parameter into it. All model parameters must be present.
    pub fn into_model(self) -> Result<Model> {
        let config = ModelConfig::from_text(&self.config_text)?;
        let mut model = Model::new(config, 0)?;
        let mut loaded = 0;
        for grp in self.groups {
            for (name, tensor) in grp.params {
                let id = model
                    .params
                    .find(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} not in model")))?;
                if model.params.param(id).group != grp.group {
                    return Err(Error::Format(format!("parameter {name} stored in wrong group")));
                }
                let expected = model.params.get(id).shape().to_vec();
                if expected != tensor.shape() {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, model expects {expected:?}",
                        tensor.shape()
                    )));
                }
                model.params.assign(&name, tensor)?;
                loaded += 1;
            }
        }
        if loaded != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {loaded} of {} model parameters",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.config_text);
        put_u32(&mut out, self.groups.len() as u32);
        for grp in &self.groups {
            put_str(&mut out, grp.group.name());
            put_u32(&mut out, grp.params.len() as u32);
            for (name, t) in &grp.params {
                put_str(&mut out, name);
                put_u32(&mut out, t.shape().len() as u32);
                for &d in t.shape() {
                    put_u32(&mut out, d as u32);
                }
                for v in t.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config_text = get_str(&mut r)?;
        let n_groups = r.u32()?;
        let mut groups = Vec::new();
        for _ in 0..n_groups {
            let name = get_str(&mut r)?;
            let group = Group::from_name(&name).ok_or_else(|| Error::Format(format!("unknown group {name:?}")))?;
            let count = r.u32()?;
            let mut params = Vec::new();
            for _ in 0..count {
                let pname = get_str(&mut r)?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let values = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let t = Tensor::new(shape, values).map_err(|e| Error::Format(format!("parameter {pname}: {e}")))?;
                params.push((pname, t));
            }
            groups.push(ParamGroup { group, params });
        }
        if !r.at_end() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config_text, groups })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, Checkpoint::from_model(model)?.encode())?;
    Ok(())
}

pub fn save_checkpoint_with_settings(path: &Path, model: &Model, settings: &Settings) -> Result<()> {
    fs::write(path, Checkpoint::with_settings(model, settings)?.encode())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Checkpoint::decode(&fs::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(path)?.into_model()
}

/// The model and the settings stored with it.
pub fn load_checkpoint_with_settings(path: &Path) -> Result<(Model, Settings)> {
    let ckpt = read_checkpoint(path)?;
    let settings = ckpt.settings()?;
    Ok((ckpt.into_model()?, settings))
}
