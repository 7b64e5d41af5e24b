//! The contrastive head: per-layer compression of pooled states, the
//! ensemble representation, the supervised contrastive loss over it, and the
//! correlation regularizer that keeps adjacent layers from collapsing into
//! copies of each other.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::normal_init;
use crate::numcore::{NodeId, NumError, Tape, Tensor, EPS_NORM};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("anchor-without-positive: batch item {0} has no same-label partner")]
    AnchorWithoutPositive(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("margin {0} outside (0,1]")]
    BadMargin(f64),
    #[error("loss weight must be non-negative, got {0}")]
    BadLambda(f64),
    #[error("width mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    BadArg(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GclSharing {
    Shared,
    PerLayer,
}

/// First-layer width of the compression MLP: the reference model uses 1024 at
/// width 768; anything smaller doubles its input width instead.
pub fn default_g_hidden(dim: usize) -> usize {
    if dim == 768 {
        1024
    } else {
        2 * dim
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GclSet {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Two-layer MLP (input_dim -> g_hidden -> out_width) applied to every
/// layer's pooled vector, either one shared set of weights or one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GclParams {
    pub layers: usize,
    pub input_dim: usize,
    pub out_width: usize,
    pub g_hidden: usize,
    pub sharing: GclSharing,
    sets: Vec<GclSet>,
}

impl GclParams {
    pub fn init(
        layers: usize,
        input_dim: usize,
        out_width: usize,
        g_hidden: usize,
        sharing: GclSharing,
        seed: u64,
    ) -> Result<Self, HeadError> {
        if layers == 0 || input_dim == 0 || out_width == 0 || g_hidden == 0 {
            return Err(HeadError::BadArg(
                "layers, input_dim, out_width, g_hidden must all be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_sets = match sharing {
            GclSharing::Shared => 1,
            GclSharing::PerLayer => layers,
        };
        let sets = (0..n_sets)
            .map(|_| GclSet {
                w1: Tensor::new(
                    vec![input_dim, g_hidden],
                    normal_init(&mut rng, input_dim * g_hidden, 0.02),
                )
                .expect("finite init"),
                b1: Tensor::zeros(vec![g_hidden]),
                w2: Tensor::new(
                    vec![g_hidden, out_width],
                    normal_init(&mut rng, g_hidden * out_width, 0.02),
                )
                .expect("finite init"),
                b2: Tensor::zeros(vec![out_width]),
            })
            .collect();
        Ok(GclParams { layers, input_dim, out_width, g_hidden, sharing, sets })
    }

    /// Standard construction for an encoder of `layers` blocks of width
    /// `dim`: each layer compresses to a dim/layers slice so the
    /// concatenation has width dim again.
    pub fn for_encoder(
        layers: usize,
        dim: usize,
        g_hidden: Option<usize>,
        sharing: GclSharing,
        seed: u64,
    ) -> Result<Self, HeadError> {
        if layers == 0 || dim % layers != 0 {
            return Err(HeadError::BadArg(format!("dim {dim} not divisible by layers {layers}")));
        }
        Self::init(
            layers,
            dim,
            dim / layers,
            g_hidden.unwrap_or_else(|| default_g_hidden(dim)),
            sharing,
            seed,
        )
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.sets.iter().enumerate() {
            let prefix = match self.sharing {
                GclSharing::Shared => "gcl".to_string(),
                GclSharing::PerLayer => format!("gcl{}", i + 1),
            };
            out.push((format!("{prefix}.w1"), &s.w1));
            out.push((format!("{prefix}.b1"), &s.b1));
            out.push((format!("{prefix}.w2"), &s.w2));
            out.push((format!("{prefix}.b2"), &s.b2));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let sharing = self.sharing;
        let mut out = Vec::new();
        for (i, s) in self.sets.iter_mut().enumerate() {
            let prefix = match sharing {
                GclSharing::Shared => "gcl".to_string(),
                GclSharing::PerLayer => format!("gcl{}", i + 1),
            };
            out.push((format!("{prefix}.w1"), &mut s.w1));
            out.push((format!("{prefix}.b1"), &mut s.b1));
            out.push((format!("{prefix}.w2"), &mut s.w2));
            out.push((format!("{prefix}.b2"), &mut s.b2));
        }
        out
    }

    pub fn leaf_on(&self, tape: &mut Tape) -> GclNodes {
        GclNodes {
            layers: self.layers,
            sharing: self.sharing,
            sets: self
                .sets
                .iter()
                .map(|s| {
                    [
                        tape.leaf(s.w1.clone()),
                        tape.leaf(s.b1.clone()),
                        tape.leaf(s.w2.clone()),
                        tape.leaf(s.b2.clone()),
                    ]
                })
                .collect(),
        }
    }
}

pub struct GclNodes {
    layers: usize,
    sharing: GclSharing,
    pub sets: Vec<[NodeId; 4]>,
}

/// Compresses each layer's pooled vectors and concatenates in layer order:
/// returns the per-layer c nodes `[batch, out_width]` and z `[batch, D]`.
pub fn gcl_forward_on_tape(
    tape: &mut Tape,
    nodes: &GclNodes,
    pooled: &[NodeId],
) -> Result<(Vec<NodeId>, NodeId), HeadError> {
    if pooled.len() != nodes.layers {
        return Err(HeadError::Shape(format!(
            "{} pooled layers for a {}-layer head",
            pooled.len(),
            nodes.layers
        )));
    }
    let want_in = tape.value(nodes.sets[0][0]).shape()[0];
    let mut cs = Vec::with_capacity(pooled.len());
    for (l, &h) in pooled.iter().enumerate() {
        let shape = tape.value(h).shape().to_vec();
        if shape.len() != 2 || shape[1] != want_in {
            return Err(HeadError::Shape(format!(
                "pooled layer {} has shape {shape:?}, expected [_, {want_in}]",
                l + 1
            )));
        }
        let [w1, b1, w2, b2] = nodes.sets[match nodes.sharing {
            GclSharing::Shared => 0,
            GclSharing::PerLayer => l,
        }];
        let hidden = tape.matmul(h, w1).and_then(|m| tape.add_bias(m, b1))?;
        let act = tape.gelu(hidden)?;
        let c = tape.matmul(act, w2).and_then(|m| tape.add_bias(m, b2))?;
        cs.push(c);
    }
    let z = tape.concat_cols(&cs)?;
    Ok((cs, z))
}

/// Inference-path compression: plain tensors in, (per-layer c, z) out.
pub fn gcl_apply(
    params: &GclParams,
    pooled: &[Tensor],
) -> Result<(Vec<Tensor>, Tensor), HeadError> {
    let mut tape = Tape::new();
    let nodes = params.leaf_on(&mut tape);
    let ids: Vec<NodeId> = pooled.iter().map(|t| tape.leaf(t.clone())).collect();
    let (cs, z) = gcl_forward_on_tape(&mut tape, &nodes, &ids)?;
    Ok((
        cs.into_iter().map(|id| tape.value(id).clone()).collect(),
        tape.value(z).clone(),
    ))
}

/// Supervised contrastive loss over an augmented batch of normalized rows:
/// per anchor, -log of (sum of same-label similarities) / (sum over all
/// others), averaged over anchors. The positive sum sits inside the log.
pub fn scl_loss_on_tape(
    tape: &mut Tape,
    z: NodeId,
    labels: &[usize],
    tau: f64,
) -> Result<NodeId, HeadError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(HeadError::BadTemperature(tau));
    }
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(HeadError::Shape(format!(
            "{} rows vs {} labels",
            shape.first().copied().unwrap_or(0),
            labels.len()
        )));
    }
    let n = labels.len();
    let mut pos = vec![0.0; n * n];
    let mut all = vec![0.0; n * n];
    for i in 0..n {
        let mut has_positive = false;
        for j in 0..n {
            if i == j {
                continue;
            }
            all[i * n + j] = 1.0;
            if labels[i] == labels[j] {
                pos[i * n + j] = 1.0;
                has_positive = true;
            }
        }
        if !has_positive {
            return Err(HeadError::AnchorWithoutPositive(i));
        }
    }
    let pos_mask = Tensor::new(vec![n, n], pos)?;
    let all_mask = Tensor::new(vec![n, n], all)?;

    let sim = tape.matmul_nt(z, z)?;
    let scaled = tape.scale(sim, 1.0 / tau)?;
    let e = tape.exp(scaled)?;
    let num = tape.mul_const(e, &pos_mask).and_then(|m| tape.row_sum(m))?;
    let den = tape.mul_const(e, &all_mask).and_then(|m| tape.row_sum(m))?;
    let ln_num = tape.ln(num)?;
    let ln_den = tape.ln(den)?;
    let per_anchor = tape.sub(ln_den, ln_num)?;
    Ok(tape.mean_all(per_anchor)?)
}

/// Batch-axis cosine between dimension d of layers l and l+1 (l is 1-based,
/// 1 <= l < L). Degenerate columns return 0.
pub fn adjacent_correlation(c: &[Tensor], l: usize, d: usize) -> Result<f64, HeadError> {
    if l == 0 || l >= c.len() {
        return Err(HeadError::BadArg(format!("layer {l} outside 1..{}", c.len())));
    }
    let (a, b) = (&c[l - 1], &c[l]);
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(HeadError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (rows, w) = (a.shape()[0], a.shape()[1]);
    if d >= w {
        return Err(HeadError::BadArg(format!("dimension {d} outside width {w}")));
    }
    if rows < 2 {
        return Err(HeadError::BadArg("batch of at least 2 required".into()));
    }
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for r in 0..rows {
        let (u, v) = (a.data()[r * w + d], b.data()[r * w + d]);
        uv += u * v;
        uu += u * u;
        vv += v * v;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu <= EPS_NORM || nv <= EPS_NORM {
        return Ok(0.0);
    }
    Ok(uv / (nu * nv))
}

/// Correlation regularizer: for each adjacent layer pair, sum the raw
/// correlations of dimensions at or above the margin. The selection is a
/// constant of the forward values; gradient flows only through the selected
/// correlations.
pub fn cr_loss_on_tape(
    tape: &mut Tape,
    cs: &[NodeId],
    margin: f64,
) -> Result<NodeId, HeadError> {
    if !(margin > 0.0 && margin <= 1.0) {
        return Err(HeadError::BadMargin(margin));
    }
    if cs.is_empty() {
        return Err(HeadError::BadArg("no compressed layers".into()));
    }
    if tape.value(cs[0]).shape().len() != 2 || tape.value(cs[0]).shape()[0] < 2 {
        return Err(HeadError::BadArg("batch of at least 2 required".into()));
    }
    let mut total: Option<NodeId> = None;
    for pair in cs.windows(2) {
        let cor = tape.adj_cor(pair[0], pair[1])?;
        let sel: Vec<f64> = tape
            .value(cor)
            .data()
            .iter()
            .map(|&v| if v >= margin { 1.0 } else { 0.0 })
            .collect();
        let w = tape.value(cor).shape().to_vec();
        let sel = Tensor::new(w, sel)?;
        let picked = tape.mul_const(cor, &sel)?;
        let s = tape.sum_all(picked)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        // Single layer: no adjacent pairs, constant zero.
        None => tape.leaf(Tensor::scalar(0.0)),
    })
}

/// Mean of adjacent_correlation over all layer pairs and dimensions; 0 for
/// a single layer. Reported per epoch and compared across ablations.
pub fn mean_adjacent_correlation(c: &[Tensor]) -> Result<f64, HeadError> {
    if c.len() < 2 {
        return Ok(0.0);
    }
    let w = c[0].shape()[1];
    let mut sum = 0.0;
    for l in 1..c.len() {
        for d in 0..w {
            sum += adjacent_correlation(c, l, d)?;
        }
    }
    Ok(sum / ((c.len() - 1) * w) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub scl: f64,
    pub cr: f64,
    pub total: f64,
    pub lambda1: f64,
}

/// total = scl + lambda1 * cr, combined on the tape so gradient flows
/// through both terms.
pub fn total_loss(
    tape: &mut Tape,
    scl: NodeId,
    cr: NodeId,
    lambda1: f64,
) -> Result<(NodeId, LossBreakdown), HeadError> {
    if !(lambda1 >= 0.0 && lambda1.is_finite()) {
        return Err(HeadError::BadLambda(lambda1));
    }
    let weighted = tape.scale(cr, lambda1)?;
    let root = tape.add(scl, weighted)?;
    Ok((
        root,
        LossBreakdown {
            scl: tape.value(scl).item(),
            cr: tape.value(cr).item(),
            total: tape.value(root).item(),
            lambda1,
        },
    ))
}
