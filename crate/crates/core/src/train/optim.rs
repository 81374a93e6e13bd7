//! First-order optimisers applied to a subset of parameter groups.

use std::str::FromStr;

use crate::autodiff::{Gradients, Group, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimiser state. Only parameters whose group is in `trainable` change.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip_norm: f64,
    weight_decay: f64,
    trainable: Vec<Group>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    /// `clip_norm <= 0` disables global-norm clipping.
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: f64, trainable: &[Group], params: &ParamStore) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Ok(Self {
            kind,
            lr,
            clip_norm,
            weight_decay: 0.0,
            trainable: trainable.to_vec(),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Decoupled weight decay: each update also shrinks trainable values by
    /// `lr · weight_decay` times their current value.
    pub fn with_weight_decay(mut self, weight_decay: f64) -> Result<Self> {
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        self.weight_decay = weight_decay;
        Ok(self)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn is_trainable(&self, g: Group) -> bool {
        self.trainable.contains(&g)
    }

    /// Norm of the gradient restricted to trainable groups.
    pub fn trainable_norm(&self, params: &ParamStore, grads: &Gradients) -> f64 {
        grads
            .iter()
            .filter(|(id, _)| self.is_trainable(params.param(*id).group))
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let norm = self.trainable_norm(params, grads);
        let factor = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !self.is_trainable(params.param(id).group) {
                continue;
            }
            let g = grads.get(id);
            let values = params.get_mut(id).values_mut();
            if self.weight_decay > 0.0 {
                let keep = 1.0 - self.lr * self.weight_decay;
                values.iter_mut().for_each(|p| *p *= keep);
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in values.iter_mut().zip(g) {
                        *p -= self.lr * factor * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    for (k, (p, &gi)) in values.iter_mut().zip(g).enumerate() {
                        let gi = gi * factor;
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * gi;
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * gi * gi;
                        *p -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
