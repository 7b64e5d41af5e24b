//! Small pre-norm transformer encoder that exposes the token states of every
//! block, so downstream code can pool and compare all layers rather than just
//! the last one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{NodeId, NumError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("empty-sequence: batch has no examples")]
    EmptyBatch,
    #[error("sequence of length {0} exceeds max_len {1}")]
    TooLong(usize, usize),
    #[error("unknown token id {0} (vocab size {1})")]
    UnknownToken(u32, usize),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout_p: f64,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers of width 64 so each layer contributes a
    /// 16-wide slice to the ensemble representation.
    pub fn desk_default(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 4,
            dim: 64,
            heads: 4,
            ff_mult: 4,
            dropout_p: 0.1,
            max_len: 32,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::BadConfig(msg));
        if self.layers == 0 || self.heads == 0 || self.ff_mult == 0 || self.max_len == 0 {
            return bad("layers, heads, ff_mult, max_len must all be positive".into());
        }
        if self.dim == 0 || self.dim % self.layers != 0 {
            return bad(format!(
                "dim {} not divisible by layers {}: per-layer slices need equal width",
                self.dim, self.layers
            ));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0,1)", self.dropout_p));
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} below the 3 reserved ids", self.vocab_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
}

/// Draws N(0, std) values via Box-Muller.
pub(crate) fn normal_init(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(std * r * theta.cos());
        if out.len() < n {
            out.push(std * r * theta.sin());
        }
    }
    out
}

impl EncoderParams {
    /// Weights and embeddings N(0, 0.02); biases zero; norm gains one.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let ff = config.ff_mult * d;
        let mut mat = |rows: usize, cols: usize| {
            Tensor::new(vec![rows, cols], normal_init(&mut rng, rows * cols, 0.02))
                .expect("finite init")
        };
        let tok_emb = mat(config.vocab_size, d);
        let pos_emb = mat(config.max_len, d);
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_gain: Tensor::vector(vec![1.0; d]),
                ln1_bias: Tensor::zeros(vec![d]),
                wq: mat(d, d),
                bq: Tensor::zeros(vec![d]),
                wk: mat(d, d),
                bk: Tensor::zeros(vec![d]),
                wv: mat(d, d),
                bv: Tensor::zeros(vec![d]),
                wo: mat(d, d),
                bo: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::vector(vec![1.0; d]),
                ln2_bias: Tensor::zeros(vec![d]),
                ff_w1: mat(d, ff),
                ff_b1: Tensor::zeros(vec![ff]),
                ff_w2: mat(ff, d),
                ff_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(EncoderParams { config, tok_emb, pos_emb, blocks })
    }

    /// Canonical (name, tensor) order shared by checkpoints and the optimizer.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            for (field, t) in [
                ("ln1.gain", &b.ln1_gain),
                ("ln1.bias", &b.ln1_bias),
                ("attn.wq", &b.wq),
                ("attn.bq", &b.bq),
                ("attn.wk", &b.wk),
                ("attn.bk", &b.bk),
                ("attn.wv", &b.wv),
                ("attn.bv", &b.bv),
                ("attn.wo", &b.wo),
                ("attn.bo", &b.bo),
                ("ln2.gain", &b.ln2_gain),
                ("ln2.bias", &b.ln2_bias),
                ("ff.w1", &b.ff_w1),
                ("ff.b1", &b.ff_b1),
                ("ff.w2", &b.ff_w2),
                ("ff.b2", &b.ff_b2),
            ] {
                out.push((format!("block{l}.{field}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let l = i + 1;
            for (field, t) in [
                ("ln1.gain", &mut b.ln1_gain),
                ("ln1.bias", &mut b.ln1_bias),
                ("attn.wq", &mut b.wq),
                ("attn.bq", &mut b.bq),
                ("attn.wk", &mut b.wk),
                ("attn.bk", &mut b.bk),
                ("attn.wv", &mut b.wv),
                ("attn.bv", &mut b.bv),
                ("attn.wo", &mut b.wo),
                ("attn.bo", &mut b.bo),
                ("ln2.gain", &mut b.ln2_gain),
                ("ln2.bias", &mut b.ln2_bias),
                ("ff.w1", &mut b.ff_w1),
                ("ff.b1", &mut b.ff_b1),
                ("ff.w2", &mut b.ff_w2),
                ("ff.b2", &mut b.ff_b2),
            ] {
                out.push((format!("block{l}.{field}"), t));
            }
        }
        out
    }
}

/// Token ids flattened row-major with a validity mask; PAD rows are masked.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

pub fn pad_batch(seqs: &[Vec<u32>], config: &EncoderConfig) -> Result<PaddedBatch, EncoderError> {
    if seqs.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    for s in seqs {
        if s.len() > config.max_len {
            return Err(EncoderError::TooLong(s.len(), config.max_len));
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(EncoderError::UnknownToken(bad, config.vocab_size));
        }
    }
    let batch = seqs.len();
    let mut ids = vec![crate::data::PAD_ID as usize; batch * len];
    let mut mask = vec![false; batch * len];
    for (b, s) in seqs.iter().enumerate() {
        for (t, &tok) in s.iter().enumerate() {
            ids[b * len + t] = tok as usize;
            mask[b * len + t] = true;
        }
    }
    Ok(PaddedBatch { ids, mask, batch, len })
}

/// Tape node handles for all encoder parameters, in `named()` order.
pub struct EncoderNodes {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub blocks: Vec<Vec<NodeId>>,
}

impl EncoderParams {
    pub fn leaf_on(&self, tape: &mut Tape) -> EncoderNodes {
        let tok_emb = tape.leaf(self.tok_emb.clone());
        let pos_emb = tape.leaf(self.pos_emb.clone());
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                [
                    &b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                    &b.bo, &b.ln2_gain, &b.ln2_bias, &b.ff_w1, &b.ff_b1, &b.ff_w2, &b.ff_b2,
                ]
                .into_iter()
                .map(|t| tape.leaf(t.clone()))
                .collect()
            })
            .collect();
        EncoderNodes { tok_emb, pos_emb, blocks }
    }
}

/// Per-block token states on the tape, each `[batch*len, dim]`, plus the
/// mask needed to pool them.
pub struct TapeStates {
    pub layers: Vec<NodeId>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Runs the encoder on a tape. `dropout_rng` drives the seeded masks; pass
/// `None` for the deterministic inference path.
pub fn forward_on_tape(
    config: &EncoderConfig,
    nodes: &EncoderNodes,
    tape: &mut Tape,
    batch: &PaddedBatch,
    dropout_rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<TapeStates, EncoderError> {
    config.validate()?;
    let (b, t, heads) = (batch.batch, batch.len, config.heads);
    let dk = config.dim / heads;
    let mut drop = |tape: &mut Tape, x: NodeId| -> Result<NodeId, NumError> {
        match dropout_rng {
            Some(rng) => tape.dropout(x, config.dropout_p, *rng),
            None => Ok(x),
        }
    };

    let tok = tape.gather(nodes.tok_emb, &batch.ids)?;
    let pos_ids: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let pos = tape.gather(nodes.pos_emb, &pos_ids)?;
    let emb = tape.add(tok, pos)?;
    let mut x = drop(tape, emb)?;

    let mut layers = Vec::with_capacity(config.layers);
    for block in &nodes.blocks {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
            block[..16].try_into().expect("16 parameter nodes per block");

        let h = tape.layer_norm(x, ln1_g, ln1_b)?;
        let q = tape.matmul(h, wq).and_then(|m| tape.add_bias(m, bq))?;
        let k = tape.matmul(h, wk).and_then(|m| tape.add_bias(m, bk))?;
        let v = tape.matmul(h, wv).and_then(|m| tape.add_bias(m, bv))?;
        let qh = tape.split_heads(q, b, t, heads)?;
        let kh = tape.split_heads(k, b, t, heads)?;
        let vh = tape.split_heads(v, b, t, heads)?;
        let scores = tape.bmm_nt(qh, kh)?;
        let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let weights = tape.masked_softmax(scaled, &batch.mask, heads)?;
        let ctx = tape.bmm(weights, vh)?;
        let merged = tape.merge_heads(ctx, b, t, heads)?;
        let attn_out = tape.matmul(merged, wo).and_then(|m| tape.add_bias(m, bo))?;
        let attn_out = drop(tape, attn_out)?;
        x = tape.add(x, attn_out)?;

        let h2 = tape.layer_norm(x, ln2_g, ln2_b)?;
        let f = tape.matmul(h2, w1).and_then(|m| tape.add_bias(m, b1))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w2).and_then(|m| tape.add_bias(m, b2))?;
        let f = drop(tape, f)?;
        x = tape.add(x, f)?;

        layers.push(x);
    }
    Ok(TapeStates { layers, mask: batch.mask.clone(), batch: b, len: t })
}

/// Mean over non-PAD positions of each block's states: one `[batch, dim]`
/// node per layer.
pub fn pool_layers(tape: &mut Tape, states: &TapeStates) -> Result<Vec<NodeId>, EncoderError> {
    states
        .layers
        .iter()
        .map(|&h| {
            tape.masked_mean_pool(h, &states.mask, states.batch, states.len).map_err(Into::into)
        })
        .collect()
}

/// Deterministic inference: pooled per-layer vectors as plain tensors,
/// `layers` entries of shape `[batch, dim]`.
pub fn encode_pooled(
    params: &EncoderParams,
    seqs: &[Vec<u32>],
) -> Result<Vec<Tensor>, EncoderError> {
    let batch = pad_batch(seqs, &params.config)?;
    let mut tape = Tape::new();
    let nodes = params.leaf_on(&mut tape);
    let states = forward_on_tape(&params.config, &nodes, &mut tape, &batch, &mut None)?;
    let pooled = pool_layers(&mut tape, &states)?;
    Ok(pooled.into_iter().map(|id| tape.value(id).clone()).collect())
}
