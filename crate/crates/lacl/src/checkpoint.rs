//! Model persistence: one JSON file holding the encoder config, head
//! metadata, vocabulary, label names, and a flat name -> tensor map.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::head::{GclParams, GclSharing};
use crate::numcore::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    BadVersion(u32),
    #[error("checkpoint inconsistent: {0}")]
    Mismatch(String),
    #[error("checkpoint missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint has unknown parameter {0}")]
    UnknownParam(String),
}

/// How to rebuild the trained head from the flat parameter map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadMeta {
    /// layer_start is the first (1-based) encoder layer routed into the
    /// compression MLP; 1 means all layers.
    Lacl { layer_start: usize, out_width: usize, g_hidden: usize, sharing: GclSharing },
    Ce { classes: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub head: HeadMeta,
    pub vocab: Vec<String>,
    pub labels: Vec<String>,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor>,
}

/// Structured parameters recovered from a checkpoint.
#[derive(Debug, Clone)]
pub enum TrainedHead {
    Lacl { layer_start: usize, gcl: GclParams },
    Ce { w: Tensor, b: Tensor },
}

impl Checkpoint {
    pub fn from_parts(
        encoder: &EncoderParams,
        head: &TrainedHead,
        vocab: Vec<String>,
        labels: Vec<String>,
        seed: u64,
    ) -> Self {
        let mut params: BTreeMap<String, Tensor> = encoder
            .named()
            .into_iter()
            .map(|(k, t)| (k, t.clone()))
            .collect();
        let head_meta = match head {
            TrainedHead::Lacl { layer_start, gcl } => {
                for (k, t) in gcl.named() {
                    params.insert(k, t.clone());
                }
                HeadMeta::Lacl {
                    layer_start: *layer_start,
                    out_width: gcl.out_width,
                    g_hidden: gcl.g_hidden,
                    sharing: gcl.sharing,
                }
            }
            TrainedHead::Ce { w, b } => {
                params.insert("ce.w".into(), w.clone());
                params.insert("ce.b".into(), b.clone());
                HeadMeta::Ce { classes: b.numel() }
            }
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            encoder: encoder.config.clone(),
            head: head_meta,
            vocab,
            labels,
            seed,
            params,
        }
    }

    /// Validates and rebuilds the structured encoder and head parameters.
    pub fn materialize(&self) -> Result<(EncoderParams, TrainedHead), CkptError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CkptError::BadVersion(self.version));
        }
        self.encoder
            .validate()
            .map_err(|e| CkptError::Mismatch(e.to_string()))?;
        if self.vocab.len() != self.encoder.vocab_size {
            return Err(CkptError::Mismatch(format!(
                "vocab has {} tokens but config says {}",
                self.vocab.len(),
                self.encoder.vocab_size
            )));
        }

        let mut remaining = self.params.clone();
        let mut take = |key: &str| -> Result<Tensor, CkptError> {
            remaining
                .remove(key)
                .ok_or_else(|| CkptError::MissingParam(key.to_string()))
        };

        let mut enc = EncoderParams::init(self.encoder.clone(), 0)
            .map_err(|e| CkptError::Mismatch(e.to_string()))?;
        for (key, slot) in enc.named_mut() {
            let t = take(&key)?;
            if t.shape() != slot.shape() {
                return Err(CkptError::Mismatch(format!(
                    "{key} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }

        let head = match &self.head {
            HeadMeta::Lacl { layer_start, out_width, g_hidden, sharing } => {
                let total = self.encoder.layers;
                if *layer_start == 0 || *layer_start > total {
                    return Err(CkptError::Mismatch(format!(
                        "layer_start {layer_start} outside 1..={total}"
                    )));
                }
                let mut gcl = GclParams::init(
                    total - layer_start + 1,
                    self.encoder.dim,
                    *out_width,
                    *g_hidden,
                    *sharing,
                    0,
                )
                .map_err(|e| CkptError::Mismatch(e.to_string()))?;
                for (key, slot) in gcl.named_mut() {
                    let t = take(&key)?;
                    if t.shape() != slot.shape() {
                        return Err(CkptError::Mismatch(format!(
                            "{key} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
                TrainedHead::Lacl { layer_start: *layer_start, gcl }
            }
            HeadMeta::Ce { classes } => {
                let w = take("ce.w")?;
                let b = take("ce.b")?;
                if w.shape() != [self.encoder.dim, *classes] || b.shape() != [*classes] {
                    return Err(CkptError::Mismatch(format!(
                        "ce head shapes {:?}/{:?} do not match dim {} x {classes}",
                        w.shape(),
                        b.shape(),
                        self.encoder.dim
                    )));
                }
                TrainedHead::Ce { w, b }
            }
        };

        if let Some(key) = remaining.into_keys().next() {
            return Err(CkptError::UnknownParam(key));
        }
        Ok((enc, head))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CkptError> {
    let mut text = serde_json::to_string(ckpt)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_json_str(&text)
}

pub fn checkpoint_from_json_str(raw: &str) -> Result<Checkpoint, CkptError> {
    Ok(serde_json::from_str(raw)?)
}
