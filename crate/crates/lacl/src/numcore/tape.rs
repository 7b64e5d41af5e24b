use rand::Rng;

use super::tensor::{dot, l2_norm, Tensor};
use super::{NumError, EPS_LN, EPS_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m,n] + [n]`, bias broadcast over rows.
    AddBias(NodeId, NodeId),
    /// `[m,k] x [k,n]`
    MatMul(NodeId, NodeId),
    /// `[m,k] x [n,k]^T -> [m,n]`
    MatMulNT(NodeId, NodeId),
    /// `[g,m,k] x [g,k,n]` batched.
    Bmm(NodeId, NodeId),
    /// `[g,m,k] x [g,n,k]^T -> [g,m,n]` batched.
    BmmNT(NodeId, NodeId),
    /// `[batch*len, d] -> [batch*heads, len, d/heads]`
    SplitHeads { x: NodeId, batch: usize, len: usize, heads: usize },
    /// Inverse of `SplitHeads`.
    MergeHeads { x: NodeId, batch: usize, len: usize, heads: usize },
    /// Row-wise normalization of `[m,n]` with per-column gain and bias.
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Row softmax over `[batch*heads, len, len]`; masked keys got weight 0
    /// in the forward pass, which the backward formula preserves.
    MaskedSoftmax(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    /// Inverted dropout; `keep[i]` entries are scaled by 1/keep_prob.
    Dropout { x: NodeId, keep: Vec<bool>, keep_prob: f64 },
    /// Row lookup: `out[r] = table[ids[r]]`.
    Gather { table: NodeId, ids: Vec<usize> },
    /// `[batch*len, d] -> [batch, d]`, mean over positions with a true mask.
    MaskedMeanPool { x: NodeId, mask: Vec<bool>, batch: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    /// Rows of a and b alternate: out rows (2i, 2i+1) = (a_i, b_i).
    InterleaveRows(NodeId, NodeId),
    RowL2Norm(NodeId),
    /// `[m,n] -> [m]`
    RowSum(NodeId),
    /// Hadamard with a constant (non-differentiated) weight tensor.
    MulConst { x: NodeId, weight: Tensor },
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Per-column batch cosine between two `[m,w]` tensors -> `[w]`;
    /// degenerate columns yield 0 with zero gradient.
    AdjCor(NodeId, NodeId),
    /// Mean softmax cross-entropy of `[m,k]` logits against class indices.
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
}

/// Reverse-mode tape. Operations run eagerly and record enough to replay the
/// chain rule; `backward` fills every node's gradient accumulator. A tape is
/// single-use: after one backward pass it refuses further passes.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward` call; zeros before that.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn want_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(NumError::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.want_same_shape("add", a, b)?;
        let data =
            self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.want_same_shape("sub", a, b)?;
        let data =
            self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.want_same_shape("mul", a, b)?;
        let data =
            self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumError> {
        if !c.is_finite() {
            return Err(NumError::arg("scale", format!("factor {c}")));
        }
        let data = self.val(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(a, c), value))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (xs, bs) = (self.val(x).shape().to_vec(), self.val(b).shape().to_vec());
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(NumError::shape("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let n = xs[1];
        let bias = self.val(b).data().to_vec();
        let data = self
            .val(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let value = Tensor::new(xs, data)?;
        Ok(self.push(Op::AddBias(x, b), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (asx, bsx) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if asx.len() != 2 || bsx.len() != 2 || asx[1] != bsx[0] {
            return Err(NumError::shape("matmul", format!("{asx:?} x {bsx:?}")));
        }
        let (m, k, n) = (asx[0], asx[1], bsx[1]);
        let mut out = vec![0.0; m * n];
        mm(self.val(a).data(), self.val(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (asx, bsx) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if asx.len() != 2 || bsx.len() != 2 || asx[1] != bsx[1] {
            return Err(NumError::shape("matmul_nt", format!("{asx:?} x {bsx:?}^T")));
        }
        let (m, k, n) = (asx[0], asx[1], bsx[0]);
        let mut out = vec![0.0; m * n];
        mm_nt(self.val(a).data(), self.val(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulNT(a, b), value))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (asx, bsx) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if asx.len() != 3 || bsx.len() != 3 || asx[0] != bsx[0] || asx[2] != bsx[1] {
            return Err(NumError::shape("bmm", format!("{asx:?} x {bsx:?}")));
        }
        let (g, m, k, n) = (asx[0], asx[1], asx[2], bsx[2]);
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            mm(
                &self.val(a).data()[gi * m * k..(gi + 1) * m * k],
                &self.val(b).data()[gi * k * n..(gi + 1) * k * n],
                m,
                k,
                n,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(Op::Bmm(a, b), value))
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (asx, bsx) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if asx.len() != 3 || bsx.len() != 3 || asx[0] != bsx[0] || asx[2] != bsx[2] {
            return Err(NumError::shape("bmm_nt", format!("{asx:?} x {bsx:?}^T")));
        }
        let (g, m, k, n) = (asx[0], asx[1], asx[2], bsx[1]);
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            mm_nt(
                &self.val(a).data()[gi * m * k..(gi + 1) * m * k],
                &self.val(b).data()[gi * n * k..(gi + 1) * n * k],
                m,
                k,
                n,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(Op::BmmNT(a, b), value))
    }

    pub fn split_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        len: usize,
        heads: usize,
    ) -> Result<NodeId, NumError> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 2 || xs[0] != batch * len || xs[1] % heads != 0 {
            return Err(NumError::shape(
                "split_heads",
                format!("{xs:?} with batch={batch} len={len} heads={heads}"),
            ));
        }
        let d = xs[1];
        let dk = d / heads;
        let src = self.val(x).data();
        let mut out = vec![0.0; batch * len * d];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let dst = ((b * heads + h) * len + t) * dk;
                    let from = (b * len + t) * d + h * dk;
                    out[dst..dst + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, len, dk], out)?;
        Ok(self.push(Op::SplitHeads { x, batch, len, heads }, value))
    }

    pub fn merge_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        len: usize,
        heads: usize,
    ) -> Result<NodeId, NumError> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 3 || xs[0] != batch * heads || xs[1] != len {
            return Err(NumError::shape(
                "merge_heads",
                format!("{xs:?} with batch={batch} len={len} heads={heads}"),
            ));
        }
        let dk = xs[2];
        let d = dk * heads;
        let src = self.val(x).data();
        let mut out = vec![0.0; batch * len * d];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let from = ((b * heads + h) * len + t) * dk;
                    let dst = (b * len + t) * d + h * dk;
                    out[dst..dst + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let value = Tensor::new(vec![batch * len, d], out)?;
        Ok(self.push(Op::MergeHeads { x, batch, len, heads }, value))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumError> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 2
            || self.val(gain).shape() != [xs[1]]
            || self.val(bias).shape() != [xs[1]]
        {
            return Err(NumError::shape(
                "layer_norm",
                format!(
                    "{:?} with gain {:?} bias {:?}",
                    xs,
                    self.val(gain).shape(),
                    self.val(bias).shape()
                ),
            ));
        }
        let (m, n) = (xs[0], xs[1]);
        let g = self.val(gain).data().to_vec();
        let b = self.val(bias).data().to_vec();
        let src = self.val(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let (xhat, _) = layer_norm_row(row);
            for j in 0..n {
                out[r * n + j] = g[j] * xhat[j] + b[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, value))
    }

    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        mask: &[bool],
        heads: usize,
    ) -> Result<NodeId, NumError> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 3 || xs[1] != xs[2] {
            return Err(NumError::shape("masked_softmax", format!("{xs:?}")));
        }
        let (groups, t) = (xs[0], xs[1]);
        if heads == 0 || groups % heads != 0 || mask.len() != (groups / heads) * t {
            return Err(NumError::shape(
                "masked_softmax",
                format!("{groups} groups, {heads} heads, mask len {}", mask.len()),
            ));
        }
        let src = self.val(x).data();
        let mut out = vec![0.0; src.len()];
        for gi in 0..groups {
            let b = gi / heads;
            let key_mask = &mask[b * t..(b + 1) * t];
            if !key_mask.iter().any(|&k| k) {
                return Err(NumError::EmptySequence);
            }
            for q in 0..t {
                let base = (gi * t + q) * t;
                let row = &src[base..base + t];
                let mx = row
                    .iter()
                    .zip(key_mask)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..t {
                    if key_mask[j] {
                        let e = (row[j] - mx).exp();
                        out[base + j] = e;
                        z += e;
                    }
                }
                for j in 0..t {
                    out[base + j] /= z;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(Op::MaskedSoftmax(x), value))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let data = self.val(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Gelu(x), value))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let data = self.val(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Tanh(x), value))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let data: Vec<f64> = self.val(x).data().iter().map(|v| v.exp()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite("exp"));
        }
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Exp(x), value))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        if self.val(x).data().iter().any(|&v| v <= 0.0) {
            return Err(NumError::arg("ln", "non-positive input".to_string()));
        }
        let data = self.val(x).data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Ln(x), value))
    }

    /// Inverted dropout driven by the caller's RNG stream; `p_drop == 0` is a
    /// free identity.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        p_drop: f64,
        rng: &mut R,
    ) -> Result<NodeId, NumError> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(NumError::arg("dropout", format!("p_drop {p_drop}")));
        }
        if p_drop == 0.0 {
            return Ok(x);
        }
        let keep_prob = 1.0 - p_drop;
        let keep: Vec<bool> = (0..self.val(x).numel()).map(|_| rng.gen::<f64>() >= p_drop).collect();
        let data = self
            .val(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, &k)| if k { v / keep_prob } else { 0.0 })
            .collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, keep, keep_prob }, value))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumError> {
        let ts = self.val(table).shape().to_vec();
        if ts.len() != 2 {
            return Err(NumError::shape("gather", format!("table {ts:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(NumError::arg("gather", format!("row {bad} out of {}", ts[0])));
        }
        let d = ts[1];
        let src = self.val(table).data();
        let mut out = vec![0.0; ids.len() * d];
        for (r, &i) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, value))
    }

    pub fn masked_mean_pool(
        &mut self,
        x: NodeId,
        mask: &[bool],
        batch: usize,
        len: usize,
    ) -> Result<NodeId, NumError> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 2 || xs[0] != batch * len || mask.len() != batch * len {
            return Err(NumError::shape(
                "masked_mean_pool",
                format!("{xs:?} with batch={batch} len={len} mask={}", mask.len()),
            ));
        }
        let d = xs[1];
        let src = self.val(x).data();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let n_real = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
            if n_real == 0 {
                return Err(NumError::EmptySequence);
            }
            for t in 0..len {
                if mask[b * len + t] {
                    let row = &src[(b * len + t) * d..(b * len + t + 1) * d];
                    for j in 0..d {
                        out[b * d + j] += row[j];
                    }
                }
            }
            for j in 0..d {
                out[b * d + j] /= n_real as f64;
            }
        }
        let value = Tensor::new(vec![batch, d], out)?;
        Ok(self.push(Op::MaskedMeanPool { x, mask: mask.to_vec(), batch, len }, value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumError> {
        if parts.is_empty() {
            return Err(NumError::arg("concat_cols", "no parts".to_string()));
        }
        let m = self.val(parts[0]).shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 2 || s[0] != m {
                return Err(NumError::shape("concat_cols", format!("part {s:?} vs {m} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.val(p).data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn interleave_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.want_same_shape("interleave_rows", a, b)?;
        let s = self.val(a).shape().to_vec();
        if s.len() != 2 {
            return Err(NumError::shape("interleave_rows", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; 2 * m * n];
        for r in 0..m {
            out[2 * r * n..(2 * r + 1) * n].copy_from_slice(&self.val(a).data()[r * n..(r + 1) * n]);
            out[(2 * r + 1) * n..(2 * r + 2) * n]
                .copy_from_slice(&self.val(b).data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![2 * m, n], out)?;
        Ok(self.push(Op::InterleaveRows(a, b), value))
    }

    pub fn row_l2norm(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let s = self.val(x).shape().to_vec();
        if s.len() != 2 {
            return Err(NumError::shape("row_l2norm", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.val(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let nr = l2_norm(row);
            if nr <= EPS_NORM {
                return Err(NumError::DegenerateVector);
            }
            for j in 0..n {
                out[r * n + j] = row[j] / nr;
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(Op::RowL2Norm(x), value))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let s = self.val(x).shape().to_vec();
        if s.len() != 2 {
            return Err(NumError::shape("row_sum", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.val(x).data();
        let out: Vec<f64> = (0..m).map(|r| src[r * n..(r + 1) * n].iter().sum()).collect();
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(Op::RowSum(x), value))
    }

    pub fn mul_const(&mut self, x: NodeId, weight: &Tensor) -> Result<NodeId, NumError> {
        if self.val(x).shape() != weight.shape() {
            return Err(NumError::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.val(x).shape(), weight.shape()),
            ));
        }
        let data = self.val(x).data().iter().zip(weight.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(Op::MulConst { x, weight: weight.clone() }, value))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let n = self.val(x).numel();
        if n == 0 {
            return Err(NumError::EmptySequence);
        }
        let v = self.val(x).data().iter().sum::<f64>() / n as f64;
        Ok(self.push(Op::MeanAll(x), Tensor::scalar(v)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let v = self.val(x).data().iter().sum::<f64>();
        Ok(self.push(Op::SumAll(x), Tensor::scalar(v)))
    }

    /// Per-dimension cosine across the batch axis between two `[m,w]`
    /// activations; the correlation underlying the redundancy penalty.
    pub fn adj_cor(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.want_same_shape("adj_cor", a, b)?;
        let s = self.val(a).shape().to_vec();
        if s.len() != 2 {
            return Err(NumError::shape("adj_cor", format!("{s:?}")));
        }
        let (m, w) = (s[0], s[1]);
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; w];
        for d in 0..w {
            let mut uv = 0.0;
            let mut uu = 0.0;
            let mut vv = 0.0;
            for r in 0..m {
                let (u, v) = (av[r * w + d], bv[r * w + d]);
                uv += u * v;
                uu += u * u;
                vv += v * v;
            }
            let (nu, nv) = (uu.sqrt(), vv.sqrt());
            out[d] = if nu <= EPS_NORM || nv <= EPS_NORM { 0.0 } else { uv / (nu * nv) };
        }
        let value = Tensor::new(vec![w], out)?;
        Ok(self.push(Op::AdjCor(a, b), value))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, NumError> {
        let s = self.val(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(NumError::shape(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (m, k) = (s[0], s[1]);
        if m == 0 {
            return Err(NumError::EmptySequence);
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(NumError::arg("cross_entropy", format!("label {bad} out of {k}")));
        }
        let src = self.val(logits).data();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / m as f64);
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec() }, value))
    }

    /// Reverse pass from a scalar root. Fills `grad` on every node the root
    /// depends on; visits each node exactly once in reverse creation order,
    /// which is a reverse topological order by construction.
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumError> {
        if self.consumed {
            return Err(NumError::BackwardConsumed);
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(NumError::NonScalarLoss(self.nodes[root.0].value.shape().to_vec()));
        }
        self.consumed = true;
        self.nodes[root.0].grad.data_mut()[0] = 1.0;
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let contribs = backward_contribs(&self.nodes, i);
            for (pid, c) in contribs {
                let dst = self.nodes[pid].grad.data_mut();
                for (d, s) in dst.iter_mut().zip(c.data()) {
                    *d += s;
                }
            }
        }
        for node in &self.nodes {
            if !node.grad.is_finite() {
                return Err(NumError::NonFinite("backward gradient"));
            }
        }
        Ok(())
    }
}

fn layer_norm_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = (var + EPS_LN).sqrt();
    (row.iter().map(|v| (v - mu) / sigma).collect(), sigma)
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Gradient contributions of node `i` to its parents, as (parent, tensor)
/// pairs. Reads are immutable; accumulation happens in `backward`.
fn backward_contribs(nodes: &[Node], i: usize) -> Vec<(usize, Tensor)> {
    let node = &nodes[i];
    let g = node.grad.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => {
            vec![(a.0, node.grad.clone()), (b.0, node.grad.clone())]
        }
        Op::Sub(a, b) => {
            let neg = Tensor::new(node.grad.shape().to_vec(), g.iter().map(|v| -v).collect())
                .expect("finite");
            vec![(a.0, node.grad.clone()), (b.0, neg)]
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let da: Vec<f64> = g.iter().zip(bv).map(|(gv, v)| gv * v).collect();
            let db: Vec<f64> = g.iter().zip(av).map(|(gv, v)| gv * v).collect();
            vec![
                (a.0, Tensor::new(node.grad.shape().to_vec(), da).expect("finite")),
                (b.0, Tensor::new(node.grad.shape().to_vec(), db).expect("finite")),
            ]
        }
        Op::Scale(a, c) => {
            let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
            vec![(a.0, Tensor::new(node.grad.shape().to_vec(), da).expect("finite"))]
        }
        Op::AddBias(x, b) => {
            let n = nodes[b.0].value.numel();
            let mut db = vec![0.0; n];
            for (idx, gv) in g.iter().enumerate() {
                db[idx % n] += gv;
            }
            vec![(x.0, node.grad.clone()), (b.0, Tensor::vector(db))]
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.nrows(), nodes[a.0].value.ncols());
            let n = nodes[b.0].value.ncols();
            let mut da = vec![0.0; m * k];
            mm_nt(g, nodes[b.0].value.data(), m, n, k, &mut da);
            let mut db = vec![0.0; k * n];
            mm_tn(nodes[a.0].value.data(), g, m, k, n, &mut db);
            vec![
                (a.0, Tensor::new(vec![m, k], da).expect("finite")),
                (b.0, Tensor::new(vec![k, n], db).expect("finite")),
            ]
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (nodes[a.0].value.nrows(), nodes[a.0].value.ncols());
            let n = nodes[b.0].value.nrows();
            let mut da = vec![0.0; m * k];
            mm(g, nodes[b.0].value.data(), m, n, k, &mut da);
            let mut db = vec![0.0; n * k];
            mm_tn(g, nodes[a.0].value.data(), m, n, k, &mut db);
            vec![
                (a.0, Tensor::new(vec![m, k], da).expect("finite")),
                (b.0, Tensor::new(vec![n, k], db).expect("finite")),
            ]
        }
        Op::Bmm(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (gn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut da = vec![0.0; gn * m * k];
            let mut db = vec![0.0; gn * k * n];
            for gi in 0..gn {
                let gug = &g[gi * m * n..(gi + 1) * m * n];
                mm_nt(
                    gug,
                    &nodes[b.0].value.data()[gi * k * n..(gi + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut da[gi * m * k..(gi + 1) * m * k],
                );
                mm_tn(
                    &nodes[a.0].value.data()[gi * m * k..(gi + 1) * m * k],
                    gug,
                    m,
                    k,
                    n,
                    &mut db[gi * k * n..(gi + 1) * k * n],
                );
            }
            vec![
                (a.0, Tensor::new(vec![gn, m, k], da).expect("finite")),
                (b.0, Tensor::new(vec![gn, k, n], db).expect("finite")),
            ]
        }
        Op::BmmNT(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (gn, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
            let mut da = vec![0.0; gn * m * k];
            let mut db = vec![0.0; gn * n * k];
            for gi in 0..gn {
                let gug = &g[gi * m * n..(gi + 1) * m * n];
                mm(
                    gug,
                    &nodes[b.0].value.data()[gi * n * k..(gi + 1) * n * k],
                    m,
                    n,
                    k,
                    &mut da[gi * m * k..(gi + 1) * m * k],
                );
                mm_tn(
                    gug,
                    &nodes[a.0].value.data()[gi * m * k..(gi + 1) * m * k],
                    m,
                    n,
                    k,
                    &mut db[gi * n * k..(gi + 1) * n * k],
                );
            }
            vec![
                (a.0, Tensor::new(vec![gn, m, k], da).expect("finite")),
                (b.0, Tensor::new(vec![gn, n, k], db).expect("finite")),
            ]
        }
        Op::SplitHeads { x, batch, len, heads } => {
            let d = nodes[x.0].value.ncols();
            let dk = d / heads;
            let mut dx = vec![0.0; batch * len * d];
            for b in 0..*batch {
                for t in 0..*len {
                    for h in 0..*heads {
                        let from = ((b * heads + h) * len + t) * dk;
                        let dst = (b * len + t) * d + h * dk;
                        dx[dst..dst + dk].copy_from_slice(&g[from..from + dk]);
                    }
                }
            }
            vec![(x.0, Tensor::new(vec![batch * len, d], dx).expect("finite"))]
        }
        Op::MergeHeads { x, batch, len, heads } => {
            let dk = nodes[x.0].value.shape()[2];
            let d = dk * heads;
            let mut dx = vec![0.0; batch * heads * len * dk];
            for b in 0..*batch {
                for t in 0..*len {
                    for h in 0..*heads {
                        let from = (b * len + t) * d + h * dk;
                        let dst = ((b * heads + h) * len + t) * dk;
                        dx[dst..dst + dk].copy_from_slice(&g[from..from + dk]);
                    }
                }
            }
            vec![(x.0, Tensor::new(vec![batch * heads, *len, dk], dx).expect("finite"))]
        }
        Op::LayerNorm { x, gain, bias } => {
            let (m, n) = (nodes[x.0].value.nrows(), nodes[x.0].value.ncols());
            let gv = nodes[gain.0].value.data();
            let src = nodes[x.0].value.data();
            let mut dx = vec![0.0; m * n];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for r in 0..m {
                let row = &src[r * n..(r + 1) * n];
                let grow = &g[r * n..(r + 1) * n];
                let (xhat, sigma) = layer_norm_row(row);
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..n {
                    let dxh = grow[j] * gv[j];
                    m1 += dxh;
                    m2 += dxh * xhat[j];
                    dgain[j] += grow[j] * xhat[j];
                    dbias[j] += grow[j];
                }
                m1 /= n as f64;
                m2 /= n as f64;
                for j in 0..n {
                    let dxh = grow[j] * gv[j];
                    dx[r * n + j] = (dxh - m1 - xhat[j] * m2) / sigma;
                }
            }
            vec![
                (x.0, Tensor::new(vec![m, n], dx).expect("finite")),
                (gain.0, Tensor::vector(dgain)),
                (bias.0, Tensor::vector(dbias)),
            ]
        }
        Op::MaskedSoftmax(x) => {
            let s = node.value.shape();
            let (groups, t) = (s[0], s[1]);
            let mut dx = vec![0.0; out.len()];
            for gi in 0..groups {
                for q in 0..t {
                    let base = (gi * t + q) * t;
                    let w = &out[base..base + t];
                    let grow = &g[base..base + t];
                    let srow: f64 = w.iter().zip(grow).map(|(wv, gv)| wv * gv).sum();
                    for j in 0..t {
                        dx[base + j] = w[j] * (grow[j] - srow);
                    }
                }
            }
            vec![(x.0, Tensor::new(s.to_vec(), dx).expect("finite"))]
        }
        Op::Gelu(x) => {
            let src = nodes[x.0].value.data();
            let dx: Vec<f64> = src.iter().zip(g).map(|(&v, gv)| gv * gelu_grad(v)).collect();
            vec![(x.0, Tensor::new(node.value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::Tanh(x) => {
            let dx: Vec<f64> = out.iter().zip(g).map(|(y, gv)| gv * (1.0 - y * y)).collect();
            vec![(x.0, Tensor::new(node.value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::Exp(x) => {
            let dx: Vec<f64> = out.iter().zip(g).map(|(y, gv)| gv * y).collect();
            vec![(x.0, Tensor::new(node.value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::Ln(x) => {
            let src = nodes[x.0].value.data();
            let dx: Vec<f64> = src.iter().zip(g).map(|(v, gv)| gv / v).collect();
            vec![(x.0, Tensor::new(node.value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::Dropout { x, keep, keep_prob } => {
            let dx: Vec<f64> = keep
                .iter()
                .zip(g)
                .map(|(&k, gv)| if k { gv / keep_prob } else { 0.0 })
                .collect();
            vec![(x.0, Tensor::new(node.value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::Gather { table, ids } => {
            let (rows, d) = (nodes[table.0].value.nrows(), nodes[table.0].value.ncols());
            let mut dt = vec![0.0; rows * d];
            for (r, &idx) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[idx * d + j] += g[r * d + j];
                }
            }
            vec![(table.0, Tensor::new(vec![rows, d], dt).expect("finite"))]
        }
        Op::MaskedMeanPool { x, mask, batch, len } => {
            let d = node.value.ncols();
            let mut dx = vec![0.0; batch * len * d];
            for b in 0..*batch {
                let n_real = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count() as f64;
                for t in 0..*len {
                    if mask[b * len + t] {
                        for j in 0..d {
                            dx[(b * len + t) * d + j] = g[b * d + j] / n_real;
                        }
                    }
                }
            }
            vec![(x.0, Tensor::new(vec![batch * len, d], dx).expect("finite"))]
        }
        Op::ConcatCols(parts) => {
            let m = node.value.nrows();
            let total = node.value.ncols();
            let mut offset = 0;
            let mut contribs = Vec::with_capacity(parts.len());
            for &p in parts {
                let w = nodes[p.0].value.ncols();
                let mut dp = vec![0.0; m * w];
                for r in 0..m {
                    dp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                contribs.push((p.0, Tensor::new(vec![m, w], dp).expect("finite")));
                offset += w;
            }
            contribs
        }
        Op::InterleaveRows(a, b) => {
            let n = node.value.ncols();
            let m = node.value.nrows() / 2;
            let mut da = vec![0.0; m * n];
            let mut db = vec![0.0; m * n];
            for r in 0..m {
                da[r * n..(r + 1) * n].copy_from_slice(&g[2 * r * n..(2 * r + 1) * n]);
                db[r * n..(r + 1) * n].copy_from_slice(&g[(2 * r + 1) * n..(2 * r + 2) * n]);
            }
            vec![
                (a.0, Tensor::new(vec![m, n], da).expect("finite")),
                (b.0, Tensor::new(vec![m, n], db).expect("finite")),
            ]
        }
        Op::RowL2Norm(x) => {
            let (m, n) = (node.value.nrows(), node.value.ncols());
            let src = nodes[x.0].value.data();
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                let xrow = &src[r * n..(r + 1) * n];
                let yrow = &out[r * n..(r + 1) * n];
                let grow = &g[r * n..(r + 1) * n];
                let nr = l2_norm(xrow);
                let proj = dot(yrow, grow);
                for j in 0..n {
                    dx[r * n + j] = (grow[j] - yrow[j] * proj) / nr;
                }
            }
            vec![(x.0, Tensor::new(vec![m, n], dx).expect("finite"))]
        }
        Op::RowSum(x) => {
            let (m, n) = (nodes[x.0].value.nrows(), nodes[x.0].value.ncols());
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                for j in 0..n {
                    dx[r * n + j] = g[r];
                }
            }
            vec![(x.0, Tensor::new(vec![m, n], dx).expect("finite"))]
        }
        Op::MulConst { x, weight } => {
            let dx: Vec<f64> = g.iter().zip(weight.data()).map(|(gv, w)| gv * w).collect();
            vec![(x.0, Tensor::new(node.value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::MeanAll(x) => {
            let n = nodes[x.0].value.numel();
            let gv = g[0] / n as f64;
            let dx = vec![gv; n];
            vec![(x.0, Tensor::new(nodes[x.0].value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::SumAll(x) => {
            let n = nodes[x.0].value.numel();
            let dx = vec![g[0]; n];
            vec![(x.0, Tensor::new(nodes[x.0].value.shape().to_vec(), dx).expect("finite"))]
        }
        Op::AdjCor(a, b) => {
            let (m, w) = (nodes[a.0].value.nrows(), nodes[a.0].value.ncols());
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let mut da = vec![0.0; m * w];
            let mut db = vec![0.0; m * w];
            for d in 0..w {
                let mut uv = 0.0;
                let mut uu = 0.0;
                let mut vv = 0.0;
                for r in 0..m {
                    let (u, v) = (av[r * w + d], bv[r * w + d]);
                    uv += u * v;
                    uu += u * u;
                    vv += v * v;
                }
                let (nu, nv) = (uu.sqrt(), vv.sqrt());
                if nu <= EPS_NORM || nv <= EPS_NORM {
                    continue; // forward emitted a constant 0 for this column
                }
                let cor = uv / (nu * nv);
                let gd = g[d];
                for r in 0..m {
                    let (u, v) = (av[r * w + d], bv[r * w + d]);
                    da[r * w + d] = gd * (v / (nu * nv) - cor * u / (nu * nu));
                    db[r * w + d] = gd * (u / (nu * nv) - cor * v / (nv * nv));
                }
            }
            vec![
                (a.0, Tensor::new(vec![m, w], da).expect("finite")),
                (b.0, Tensor::new(vec![m, w], db).expect("finite")),
            ]
        }
        Op::CrossEntropy { logits, labels } => {
            let (m, k) = (nodes[logits.0].value.nrows(), nodes[logits.0].value.ncols());
            let src = nodes[logits.0].value.data();
            let scale = g[0] / m as f64;
            let mut dx = vec![0.0; m * k];
            for (r, &y) in labels.iter().enumerate() {
                let row = &src[r * k..(r + 1) * k];
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..k {
                    let p = (row[j] - mx).exp() / z;
                    dx[r * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                }
            }
            vec![(logits.0, Tensor::new(vec![m, k], dx).expect("finite"))]
        }
    }
}

/// `out += a[m,k] x b[k,n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    }
}

/// `out += a[m,k] x b[n,k]^T`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a[m,k]^T x b[m,n]` giving `[k,n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::oracle::{finite_diff_gradient, max_rel_err, FD_STEP};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Deterministic non-uniform weights so reductions do not hide per-entry
    /// sign errors behind symmetric sums.
    fn probe_weights(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| 0.3 * ((i * 37 + 11) % 17) as f64 - 2.0).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Weighted-sum scalarization of an op output, so finite differences see
    /// every output coordinate.
    fn probe_loss(tape: &mut Tape, out: NodeId) -> NodeId {
        let w = probe_weights(tape.value(out).shape());
        let weighted = tape.mul_const(out, &w).unwrap();
        tape.sum_all(weighted).unwrap()
    }

    /// Checks tape gradients of `build` against central differences for
    /// `seeds` random draws from `sampler`.
    fn check_grad<S, B>(seeds: u64, tol: f64, sampler: S, build: B)
    where
        S: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
        B: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = sampler(&mut rng);
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &ids);
            tape.backward(loss).unwrap();
            let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id).clone()).collect();

            let numeric = finite_diff_gradient(
                |params: &[Tensor]| {
                    let mut t = Tape::new();
                    let pids: Vec<NodeId> = params.iter().map(|p| t.leaf(p.clone())).collect();
                    let l = build(&mut t, &pids);
                    Ok(t.value(l).item())
                },
                &inputs,
                FD_STEP,
            )
            .unwrap();

            let mut worst = 0.0f64;
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max(max_rel_err(a.data(), n.data()));
            }
            assert!(worst < tol, "seed {seed}: max rel err {worst:e}");
        }
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[6.0]);
    }

    #[test]
    fn backward_constant_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = tape.leaf(Tensor::scalar(5.0));
        let _ = x;
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_uniform_softmax_cross_entropy() {
        // Uniform logits: gradient of each logit is p_k - y_k with p = 1/K.
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap());
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).data();
        for (k, &gv) in g.iter().enumerate() {
            let expect = 0.25 - if k == 2 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-12, "k={k} g={gv}");
        }
    }

    #[test]
    fn backward_non_scalar_root_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("non-scalar-loss"), "{err}");
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        tape.backward(x).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_over_shared_parent() {
        // y = x + x => dy/dx = 2, exercised through a single backward pass.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0]);
    }

    #[test]
    fn grad_add_sub_mul_scale() {
        check_grad(
            100,
            1e-4,
            |rng| {
                vec![
                    rand_tensor(rng, vec![3, 4], -1.5, 1.5),
                    rand_tensor(rng, vec![3, 4], -1.5, 1.5),
                ]
            },
            |tape, p| {
                let s = tape.add(p[0], p[1]).unwrap();
                let d = tape.sub(s, p[1]).unwrap();
                let m = tape.mul(d, p[1]).unwrap();
                let sc = tape.scale(m, -0.7).unwrap();
                probe_loss(tape, sc)
            },
        );
    }

    #[test]
    fn grad_add_bias() {
        check_grad(
            100,
            1e-4,
            |rng| {
                vec![rand_tensor(rng, vec![4, 3], -1.0, 1.0), rand_tensor(rng, vec![3], -1.0, 1.0)]
            },
            |tape, p| {
                let y = tape.add_bias(p[0], p[1]).unwrap();
                probe_loss(tape, y)
            },
        );
    }

    #[test]
    fn grad_matmul_both_layouts() {
        check_grad(
            100,
            1e-4,
            |rng| {
                vec![
                    rand_tensor(rng, vec![3, 4], -1.0, 1.0),
                    rand_tensor(rng, vec![4, 2], -1.0, 1.0),
                    rand_tensor(rng, vec![5, 2], -1.0, 1.0),
                ]
            },
            |tape, p| {
                let ab = tape.matmul(p[0], p[1]).unwrap(); // [3,2]
                let nt = tape.matmul_nt(ab, p[2]).unwrap(); // [3,5]
                probe_loss(tape, nt)
            },
        );
    }

    #[test]
    fn grad_matmul_shared_operand() {
        // z z^T pattern from the contrastive loss: one node used twice.
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![4, 3], -1.0, 1.0)],
            |tape, p| {
                let s = tape.matmul_nt(p[0], p[0]).unwrap();
                probe_loss(tape, s)
            },
        );
    }

    #[test]
    fn grad_bmm_both_layouts() {
        check_grad(
            100,
            1e-4,
            |rng| {
                vec![
                    rand_tensor(rng, vec![2, 2, 3], -1.0, 1.0),
                    rand_tensor(rng, vec![2, 3, 2], -1.0, 1.0),
                    rand_tensor(rng, vec![2, 4, 2], -1.0, 1.0),
                ]
            },
            |tape, p| {
                let ab = tape.bmm(p[0], p[1]).unwrap(); // [2,2,2]
                let nt = tape.bmm_nt(ab, p[2]).unwrap(); // [2,2,4]
                probe_loss(tape, nt)
            },
        );
    }

    #[test]
    fn grad_split_merge_heads() {
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![4, 6], -1.0, 1.0)],
            |tape, p| {
                let s = tape.split_heads(p[0], 2, 2, 3).unwrap();
                let m = tape.merge_heads(s, 2, 2, 3).unwrap();
                probe_loss(tape, m)
            },
        );
        // Round trip is the identity.
        let mut tape = Tape::new();
        let x = tape.leaf(probe_weights(&[4, 6]));
        let s = tape.split_heads(x, 2, 2, 3).unwrap();
        let m = tape.merge_heads(s, 2, 2, 3).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(x).data());
    }

    #[test]
    fn grad_layer_norm() {
        check_grad(
            100,
            1e-4,
            |rng| {
                vec![
                    rand_tensor(rng, vec![3, 5], -2.0, 2.0),
                    rand_tensor(rng, vec![5], 0.5, 1.5),
                    rand_tensor(rng, vec![5], -0.5, 0.5),
                ]
            },
            |tape, p| {
                let y = tape.layer_norm(p[0], p[1], p[2]).unwrap();
                probe_loss(tape, y)
            },
        );
    }

    #[test]
    fn grad_masked_softmax() {
        let mask = vec![true, true, false, true, true, true];
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![4, 3, 3], -2.0, 2.0)],
            move |tape, p| {
                let y = tape.masked_softmax(p[0], &mask, 2).unwrap();
                probe_loss(tape, y)
            },
        );
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys_and_normalizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(
            &mut ChaCha8Rng::seed_from_u64(5),
            vec![2, 3, 3],
            -1.0,
            1.0,
        ));
        let mask = vec![true, false, true];
        let y = tape.masked_softmax(x, &mask, 2).unwrap();
        let v = tape.value(y);
        for gi in 0..2 {
            for q in 0..3 {
                let row = &v.data()[(gi * 3 + q) * 3..(gi * 3 + q) * 3 + 3];
                assert_eq!(row[1], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_elementwise_nonlinearities() {
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![3, 4], -2.0, 2.0)],
            |tape, p| {
                let a = tape.gelu(p[0]).unwrap();
                let b = tape.tanh(a).unwrap();
                probe_loss(tape, b)
            },
        );
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![3, 4], 0.3, 2.0)],
            |tape, p| {
                let e = tape.exp(p[0]).unwrap();
                let l = tape.ln(e).unwrap();
                probe_loss(tape, l)
            },
        );
    }

    #[test]
    fn grad_dropout_fixed_mask() {
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![4, 4], -1.0, 1.0)],
            |tape, p| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
                let y = tape.dropout(p[0], 0.4, &mut mask_rng).unwrap();
                probe_loss(tape, y)
            },
        );
    }

    #[test]
    fn dropout_zero_rate_is_identity_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn grad_gather() {
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![5, 3], -1.0, 1.0)],
            |tape, p| {
                let y = tape.gather(p[0], &[0, 2, 2, 4]).unwrap();
                probe_loss(tape, y)
            },
        );
    }

    #[test]
    fn grad_masked_mean_pool() {
        let mask = vec![true, true, false, true, false, false, true, true];
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![8, 3], -1.0, 1.0)],
            move |tape, p| {
                let y = tape.masked_mean_pool(p[0], &mask, 2, 4).unwrap();
                probe_loss(tape, y)
            },
        );
    }

    #[test]
    fn masked_mean_pool_ignores_padding_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0], vec![100.0, 100.0]]).unwrap(),
        );
        let y = tape.masked_mean_pool(x, &[true, true, false], 1, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_concat_interleave_rowsum() {
        check_grad(
            100,
            1e-4,
            |rng| {
                vec![
                    rand_tensor(rng, vec![3, 2], -1.0, 1.0),
                    rand_tensor(rng, vec![3, 4], -1.0, 1.0),
                    rand_tensor(rng, vec![3, 6], -1.0, 1.0),
                ]
            },
            |tape, p| {
                let c = tape.concat_cols(&[p[0], p[1]]).unwrap(); // [3,6]
                let i = tape.interleave_rows(c, p[2]).unwrap(); // [6,6]
                let r = tape.row_sum(i).unwrap();
                let w = probe_weights(&[6]);
                let wr = tape.mul_const(r, &w).unwrap();
                tape.sum_all(wr).unwrap()
            },
        );
    }

    #[test]
    fn grad_row_l2norm() {
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![4, 3], 0.2, 1.5)],
            |tape, p| {
                let y = tape.row_l2norm(p[0]).unwrap();
                probe_loss(tape, y)
            },
        );
    }

    #[test]
    fn grad_mean_all() {
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![3, 3], -1.0, 1.0)],
            |tape, p| tape.mean_all(p[0]).unwrap(),
        );
    }

    #[test]
    fn grad_adj_cor() {
        check_grad(
            100,
            1e-4,
            |rng| {
                vec![
                    rand_tensor(rng, vec![5, 3], 0.2, 1.2),
                    rand_tensor(rng, vec![5, 3], 0.2, 1.2),
                ]
            },
            |tape, p| {
                let c = tape.adj_cor(p[0], p[1]).unwrap();
                let w = probe_weights(&[3]);
                let wc = tape.mul_const(c, &w).unwrap();
                tape.sum_all(wc).unwrap()
            },
        );
    }

    #[test]
    fn adj_cor_degenerate_column_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 4.0]]).unwrap());
        let c = tape.adj_cor(a, b).unwrap();
        assert_eq!(tape.value(c).data()[0], 0.0);
        assert!((tape.value(c).data()[1] - 1.0).abs() < 1e-12);
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).data()[0], 0.0);
        assert_eq!(tape.grad(a).data()[2], 0.0);
    }

    #[test]
    fn grad_cross_entropy() {
        check_grad(
            100,
            1e-4,
            |rng| vec![rand_tensor(rng, vec![4, 3], -2.0, 2.0)],
            |tape, p| tape.cross_entropy(p[0], &[0, 2, 1, 2]).unwrap(),
        );
    }

    #[test]
    fn exp_overflow_is_an_error_not_inf() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e4));
        assert!(tape.exp(x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = tape.leaf(rand_tensor(&mut rng, vec![4, 4], -1.0, 1.0));
            let g = tape.gelu(x).unwrap();
            let s = tape.matmul_nt(g, g).unwrap();
            let l = tape.mean_all(s).unwrap();
            tape.value(l).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
