use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ModelParams, ParamSet, PoolingKind};
use crate::classifier::ClassifierKind;
use crate::fsutil::{read_to_string, write_atomic};
use crate::pooling::Normalization;
use crate::{Error, Result};

/// Dimensions recorded alongside the tensors so a checkpoint can be checked on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Zero for mean and max pooling.
    pub attention_dim: usize,
    pub heads: usize,
    pub class_count: usize,
    pub pooling: PoolingKind,
    pub normalization: Option<Normalization>,
    pub classifier: ClassifierKind,
    pub context_gating: bool,
}

impl ModelDims {
    pub fn of(model: &ModelParams) -> Self {
        let att = model.attention.as_ref();
        ModelDims {
            input_dim: model.input_dim(),
            hidden_dim: model.hidden_dim(),
            attention_dim: att.map_or(0, |a| a.heads[0].hidden_dim()),
            heads: model.num_heads(),
            class_count: model.class_count(),
            pooling: model.pooling,
            normalization: att.map(|a| a.normalization),
            classifier: model.classifier.kind(),
            context_gating: model.context_gate.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub model: ModelParams,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: ModelParams, optimizer: Option<AdamState>) -> Self {
        Checkpoint {
            dims: ModelDims::of(&model),
            model,
            optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let actual = ModelDims::of(&self.model);
        if actual != self.dims {
            return Err(Error::Config(format!(
                "checkpoint dimensions {:?} do not match its tensors {:?}",
                self.dims, actual
            )));
        }
        if let Some((name, _)) = self.model.tensors().into_iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!("checkpoint tensor `{name}` is not finite")));
        }
        if let Some(opt) = &self.optimizer {
            let lens: Vec<usize> = self.model.tensors().iter().map(|(_, t)| t.len()).collect();
            let m: Vec<usize> = opt.m.iter().map(Vec::len).collect();
            let v: Vec<usize> = opt.v.iter().map(Vec::len).collect();
            if m != lens || v != lens {
                return Err(Error::Config("optimizer state does not match model tensors".into()));
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut json = serde_json::to_string_pretty(checkpoint)?;
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    checkpoint.validate()?;
    Ok(checkpoint)
}
