//! Named parameter storage with roles that drive freezing, weight decay and
//! checkpointing.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Backbone weight matrices, embeddings and layer scales; never updated.
    BackboneFrozen,
    BackboneBias,
    BackboneNorm,
    DecoderWeight,
    DecoderBias,
    DecoderNorm,
    /// Normalization running statistics; updated by forward passes, not by
    /// the optimizer.
    RunningStat,
}

impl ParamRole {
    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            ParamRole::BackboneFrozen | ParamRole::BackboneBias | ParamRole::BackboneNorm
        )
    }

    /// Receives gradients when backbone adaptation is enabled.
    pub fn is_trainable(self, bitfit: bool) -> bool {
        match self {
            ParamRole::BackboneFrozen | ParamRole::RunningStat => false,
            ParamRole::BackboneBias | ParamRole::BackboneNorm => bitfit,
            _ => true,
        }
    }

    /// Subject to decoupled weight decay.
    pub fn is_decayed(self) -> bool {
        self == ParamRole::DecoderWeight
    }
}

/// A tensor slot shared between the layer that reads it and the store that
/// owns it; writes through [`Var::set`] are visible to both.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    var: Var,
    tracked: bool,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("role", &self.role)
            .field("shape", &self.var.shape())
            .finish()
    }
}

impl Param {
    /// The value as used in a forward pass. Untracked parameters are detached
    /// so no gradient is ever computed for them.
    pub fn t(&self) -> Tensor {
        if self.tracked {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }
}

/// Deterministic parameter initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the common default for conv and
    /// linear layers.
    FanInUniform(usize),
    Normal(f64),
}

impl Init {
    fn sample(self, n: usize, rng: &mut impl Rng) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std as f32).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        role: ParamRole,
        value: Tensor,
        bitfit: bool,
    ) -> Result<Param> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let param = Param {
            name: name.to_string(),
            role,
            var: Var::from_tensor(&value.to_dtype(DType::F32)?)?,
            tracked: role.is_trainable(bitfit),
        };
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(param.clone());
        Ok(param)
    }

    pub fn init(
        &mut self,
        name: &str,
        role: ParamRole,
        shape: &[usize],
        init: Init,
        bitfit: bool,
        rng: &mut impl Rng,
    ) -> Result<Param> {
        let n = shape.iter().product();
        let data = init.sample(n, rng);
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.insert(name, role, t, bitfit)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters that receive gradients, in registration order.
    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.tracked)
    }

    /// Deep copy: new storage for every tensor.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let copy = Var::from_tensor(&p.var.as_tensor().copy()?)?;
            out.index.insert(p.name.clone(), out.params.len());
            out.params.push(Param {
                name: p.name.clone(),
                role: p.role,
                var: copy,
                tracked: p.tracked,
            });
        }
        Ok(out)
    }

    /// Overwrites every parameter from `other`, which must have the same
    /// names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for p in &self.params {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            p.assign(src.var.as_tensor())?;
        }
        Ok(())
    }

    /// Snapshot of every tensor by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.var.as_tensor().detach()))
            .collect()
    }
}

impl Param {
    /// Replaces the value in place, checking the shape.
    pub fn assign(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.var.dims() {
            return Err(Error::Checkpoint(format!(
                "`{}` expects shape {:?}, got {:?}",
                self.name,
                self.var.dims(),
                value.dims()
            )));
        }
        self.var.set(&value.to_dtype(DType::F32)?.contiguous()?)?;
        Ok(())
    }
}
