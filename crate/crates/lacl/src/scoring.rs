//! Inference-side scoring: embedding banks over the training set, cosine
//! nearest-neighbor scores, class-conditional Gaussians with a tied
//! covariance, explicit per-layer ensembles, and thresholding.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CkptError, TrainedHead};
use crate::data::{Corpus, DataError, Vocabulary};
use crate::encoder::{encode_pooled, EncoderError, EncoderParams};
use crate::head::{gcl_apply, HeadError};
use crate::numcore::{l2_norm, NumError, Tensor, EPS_NORM};

const EMBED_CHUNK: usize = 64;
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("empty embedding bank")]
    EmptyBank,
    #[error("class {0} has {1} examples, need at least 2 to fit a covariance")]
    ClassTooSmall(String, usize),
    #[error("covariance not positive definite even after ridge {0:e}")]
    Singular(f64),
    #[error("bank/query mismatch: {0}")]
    Mismatch(String),
    #[error("invalid argument: {0}")]
    BadArg(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceMode {
    Full,
    /// Drop the lower half of the per-layer segments of z before scoring.
    UpperHalf,
}

/// Frozen embeddings of one example set under one checkpoint.
#[derive(Debug, Clone)]
pub struct Embedded {
    /// Unnormalized sentence representation, [n, zdim].
    pub z_raw: Tensor,
    /// Row-normalized copy used by cosine scorers, [n, zdim].
    pub z_norm: Tensor,
    /// Mean-pooled encoder states, one [n, dim] tensor per layer.
    pub layers: Vec<Tensor>,
    /// Segment width of z; 0 when z has no layer structure (ce checkpoints).
    pub seg_width: usize,
    pub n_segments: usize,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.z_raw.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic inference forward: no dropout, no augmentation.
pub fn embed_examples(
    enc: &EncoderParams,
    head: &TrainedHead,
    seqs: &[Vec<u32>],
) -> Result<Embedded, ScoreError> {
    if seqs.is_empty() {
        return Err(ScoreError::BadArg("no examples to embed".into()));
    }
    let dim = enc.config.dim;
    let n_layers = enc.config.layers;
    let mut layer_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_layers];
    let mut z_rows: Vec<Vec<f64>> = Vec::new();
    for chunk in seqs.chunks(EMBED_CHUNK) {
        let pooled = encode_pooled(enc, chunk)?;
        for (l, t) in pooled.iter().enumerate() {
            for r in 0..chunk.len() {
                layer_rows[l].push(t.row(r).to_vec());
            }
        }
        match head {
            TrainedHead::Lacl { layer_start, gcl } => {
                let (_, z) = gcl_apply(gcl, &pooled[layer_start - 1..])?;
                for r in 0..chunk.len() {
                    z_rows.push(z.row(r).to_vec());
                }
            }
            TrainedHead::Ce { .. } => {
                let last = &pooled[n_layers - 1];
                for r in 0..chunk.len() {
                    z_rows.push(last.row(r).to_vec());
                }
            }
        }
    }
    let (seg_width, n_segments) = match head {
        TrainedHead::Lacl { gcl, .. } => (gcl.out_width, gcl.layers),
        TrainedHead::Ce { .. } => (0, 0),
    };
    let z_raw = Tensor::from_rows(&z_rows)?;
    let mut norm_rows = Vec::with_capacity(z_rows.len());
    for row in &z_rows {
        norm_rows.push(unit(row)?);
    }
    Ok(Embedded {
        z_raw,
        z_norm: Tensor::from_rows(&norm_rows)?,
        layers: layer_rows
            .into_iter()
            .map(|rows| Tensor::from_rows(&rows))
            .collect::<Result<_, _>>()?,
        seg_width: if n_segments == 0 { 0 } else { seg_width },
        n_segments,
    })
    .and_then(|e| {
        debug_assert!(e.layers.iter().all(|t| t.shape() == [seqs.len(), dim]));
        Ok(e)
    })
}

/// Embeddings of every training example plus labels and provenance.
#[derive(Debug, Clone)]
pub struct EmbeddingBank {
    pub embedded: Embedded,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub checkpoint_id: String,
    pub corpus_id: String,
}

impl EmbeddingBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn short_sha(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn build_bank(ckpt: &Checkpoint, corpus: &Corpus) -> Result<EmbeddingBank, ScoreError> {
    let (enc, head) = ckpt.materialize()?;
    if corpus.label_names != ckpt.labels {
        return Err(ScoreError::Mismatch(format!(
            "corpus labels {:?} differ from checkpoint labels {:?}",
            corpus.label_names, ckpt.labels
        )));
    }
    let vocab = Vocabulary::from_tokens(ckpt.vocab.clone())?;
    let data = corpus.tokenized(&vocab);
    if data.train.is_empty() {
        return Err(ScoreError::Data(DataError::EmptySplit("train".into())));
    }
    let seqs: Vec<Vec<u32>> = data.train.iter().map(|e| e.tokens.clone()).collect();
    let embedded = embed_examples(&enc, &head, &seqs)?;
    let corpus_text: String = data.train.iter().map(|e| format!("{}\x1f{}\n", e.text, e.label)).collect();
    Ok(EmbeddingBank {
        embedded,
        labels: data.train.iter().map(|e| e.label).collect(),
        label_names: corpus.label_names.clone(),
        checkpoint_id: short_sha(serde_json::to_string(ckpt).expect("serializable").as_bytes()),
        corpus_id: short_sha(corpus_text.as_bytes()),
    })
}

fn slice_bounds(e: &Embedded, mode: SliceMode) -> Result<(usize, usize), ScoreError> {
    let zd = e.z_raw.shape()[1];
    match mode {
        SliceMode::Full => Ok((0, zd)),
        SliceMode::UpperHalf => {
            if e.n_segments == 0 {
                return Err(ScoreError::BadArg(
                    "upper_half slicing needs a segmented representation (lacl checkpoint)".into(),
                ));
            }
            Ok((e.n_segments / 2 * e.seg_width, zd))
        }
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>, ScoreError> {
    let n = l2_norm(v);
    if n <= EPS_NORM {
        return Err(ScoreError::Num(NumError::DegenerateVector));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn normalized_slice(row: &[f64], lo: usize, hi: usize) -> Result<Vec<f64>, ScoreError> {
    unit(&row[lo..hi])
}

/// Nearest-neighbor cosine over the bank's z: returns the best similarity
/// and the neighbor's label. Ties break to the lowest bank index.
pub fn cosine_score(
    query_z: &[f64],
    bank: &EmbeddingBank,
    mode: SliceMode,
) -> Result<(f64, usize), ScoreError> {
    if bank.is_empty() {
        return Err(ScoreError::EmptyBank);
    }
    let (lo, hi) = slice_bounds(&bank.embedded, mode)?;
    if query_z.len() != bank.embedded.z_raw.shape()[1] {
        return Err(ScoreError::Mismatch(format!(
            "query width {} vs bank width {}",
            query_z.len(),
            bank.embedded.z_raw.shape()[1]
        )));
    }
    let q = normalized_slice(query_z, lo, hi)?;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for i in 0..bank.len() {
        let b = normalized_slice(bank.embedded.z_norm.row(i), lo, hi)?;
        let s: f64 = q.iter().zip(&b).map(|(a, c)| a * c).sum();
        if s > best.0 {
            best = (s, i);
        }
    }
    Ok((best.0.clamp(-1.0, 1.0), bank.labels[best.1]))
}

/// Class-conditional Gaussians with one covariance pooled across classes.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub means: Vec<Tensor>,
    /// Pooled within-class covariance plus ridge.
    pub cov: Tensor,
    pub precision: Tensor,
    pub ridge: f64,
    chol: Tensor,
}

fn cholesky_lower(a: &Tensor, ridge: f64) -> Result<Tensor, ScoreError> {
    let d = a.shape()[0];
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        for i in j..d {
            let mut s = a.data()[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(ScoreError::Singular(ridge));
                }
                l[j * d + j] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Tensor::new(vec![d, d], l).map_err(Into::into)
}

/// Solves L w = y by forward substitution; squared Mahalanobis distance is
/// then the squared norm of w.
fn forward_solve(l: &Tensor, y: &[f64]) -> Vec<f64> {
    let d = y.len();
    let mut w = vec![0.0; d];
    for i in 0..d {
        let mut s = y[i];
        for k in 0..i {
            s -= l.data()[i * d + k] * w[k];
        }
        w[i] = s / l.data()[i * d + i];
    }
    w
}

fn lower_inverse(l: &Tensor) -> Tensor {
    let d = l.shape()[0];
    let mut inv = vec![0.0; d * d];
    for col in 0..d {
        let mut e = vec![0.0; d];
        e[col] = 1.0;
        let w = forward_solve(l, &e);
        for row in 0..d {
            inv[row * d + col] = w[row];
        }
    }
    Tensor::new(vec![d, d], inv).expect("finite inverse")
}

impl GaussianStats {
    /// Builds stats from given means and covariance (ridge already applied
    /// by the caller, or zero for exact hand cases).
    pub fn from_parts(means: Vec<Tensor>, cov: Tensor, ridge: f64) -> Result<Self, ScoreError> {
        let d = cov.shape()[0];
        if cov.shape() != [d, d] {
            return Err(ScoreError::BadArg(format!("covariance shape {:?}", cov.shape())));
        }
        if means.is_empty() || means.iter().any(|m| m.shape() != [d]) {
            return Err(ScoreError::BadArg("means must be [d] vectors, at least one".into()));
        }
        let chol = cholesky_lower(&cov, ridge)?;
        let l_inv = lower_inverse(&chol);
        // precision = L^-T L^-1
        let mut prec = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += l_inv.data()[k * d + i] * l_inv.data()[k * d + j];
                }
                prec[i * d + j] = s;
            }
        }
        Ok(GaussianStats {
            means,
            cov,
            precision: Tensor::new(vec![d, d], prec).expect("finite precision"),
            ridge,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.shape()[0]
    }
}

/// Tied-covariance fit: per-class means, covariance pooled over all
/// within-class deviations (normalized by total count), ridge added.
pub fn mahalanobis_fit(
    features: &Tensor,
    labels: &[usize],
    names: &[String],
    ridge: f64,
) -> Result<GaussianStats, ScoreError> {
    if ridge <= 0.0 {
        return Err(ScoreError::BadArg(format!("ridge {ridge} must be positive")));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if labels.len() != n {
        return Err(ScoreError::BadArg(format!("{n} rows vs {} labels", labels.len())));
    }
    let classes = names.len();
    if classes == 0 || labels.iter().any(|&y| y >= classes) {
        return Err(ScoreError::BadArg("labels outside class list".into()));
    }
    let mut counts = vec![0usize; classes];
    let mut sums = vec![vec![0.0; d]; classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count < 2 {
            return Err(ScoreError::ClassTooSmall(names[c].clone(), count));
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for (i, &y) in labels.iter().enumerate() {
        let row = features.row(i);
        let dev: Vec<f64> = row.iter().zip(&means[y]).map(|(x, m)| x - m).collect();
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += dev[a] * dev[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / n as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
        cov[a * d + a] += ridge;
    }
    GaussianStats::from_parts(
        means
            .into_iter()
            .map(|m| Tensor::new(vec![d], m).expect("finite mean"))
            .collect(),
        Tensor::new(vec![d, d], cov)?,
        ridge,
    )
}

/// Negated squared Mahalanobis distance to the nearest class mean, and that
/// class. Higher scores mean more in-distribution.
pub fn mahalanobis_classify(x: &[f64], stats: &GaussianStats) -> Result<(f64, usize), ScoreError> {
    if x.len() != stats.dim() {
        return Err(ScoreError::Mismatch(format!(
            "query width {} vs stats width {}",
            x.len(),
            stats.dim()
        )));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (c, mu) in stats.means.iter().enumerate() {
        let dev: Vec<f64> = x.iter().zip(mu.data()).map(|(a, m)| a - m).collect();
        let w = forward_solve(&stats.chol, &dev);
        let dist2: f64 = w.iter().map(|v| v * v).sum();
        if dist2 < best.0 {
            best = (dist2, c);
        }
    }
    Ok((-best.0, best.1))
}

pub fn mahalanobis_score(x: &[f64], stats: &GaussianStats) -> Result<f64, ScoreError> {
    mahalanobis_classify(x, stats).map(|(s, _)| s)
}

fn tanh_rows(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect())
        .expect("tanh stays finite")
}

/// Per-layer Gaussians for the explicit Mahalanobis ensemble: intermediate
/// layers are squashed through tanh at fit and score time, the last layer
/// stays raw.
#[derive(Debug, Clone)]
pub struct MahaEnsemble {
    pub per_layer: Vec<GaussianStats>,
}

pub fn fit_maha_ensemble(bank: &EmbeddingBank, ridge: f64) -> Result<MahaEnsemble, ScoreError> {
    if bank.is_empty() {
        return Err(ScoreError::EmptyBank);
    }
    let last = bank.embedded.layers.len() - 1;
    let per_layer = bank
        .embedded
        .layers
        .iter()
        .enumerate()
        .map(|(l, t)| {
            let feats = if l < last { tanh_rows(t) } else { t.clone() };
            mahalanobis_fit(&feats, &bank.labels, &bank.label_names, ridge)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MahaEnsemble { per_layer })
}

/// Sum of per-layer nearest-mean scores (each already negated), tanh on
/// intermediate layers; the label is the class with the smallest summed
/// distance.
pub fn maha_ensemble_score(
    query_layers: &[Vec<f64>],
    ens: &MahaEnsemble,
) -> Result<(f64, usize), ScoreError> {
    let ll = ens.per_layer.len();
    if query_layers.len() != ll {
        return Err(ScoreError::Mismatch(format!(
            "{} query layers vs {} fitted layers",
            query_layers.len(),
            ll
        )));
    }
    let classes = ens.per_layer[0].means.len();
    let mut total = 0.0;
    let mut per_class = vec![0.0; classes];
    for (l, (q, stats)) in query_layers.iter().zip(&ens.per_layer).enumerate() {
        let feat: Vec<f64> =
            if l < ll - 1 { q.iter().map(|v| v.tanh()).collect() } else { q.clone() };
        let (s, _) = mahalanobis_classify(&feat, stats)?;
        total += s;
        for (c, acc) in per_class.iter_mut().enumerate() {
            let dev: Vec<f64> =
                feat.iter().zip(stats.means[c].data()).map(|(a, m)| a - m).collect();
            let w = forward_solve(&stats.chol, &dev);
            *acc += w.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let label = per_class
        .iter()
        .enumerate()
        .min_by(|a, b| (*a.1).total_cmp(b.1))
        .map(|(c, _)| c)
        .unwrap_or(0);
    Ok((total, label))
}

/// Sum over layers of the max cosine against that layer's bank vectors (no
/// tanh); the label comes from the bank entry with the best summed cosine.
pub fn cosine_ensemble_score(
    query_layers: &[Vec<f64>],
    bank: &EmbeddingBank,
) -> Result<(f64, usize), ScoreError> {
    cosine_ensemble_score_from(query_layers, bank, 0)
}

/// Same ensemble restricted to layers `from_layer..` (0-based), for the
/// inference variant that drops the lower half of the stack.
pub fn cosine_ensemble_score_from(
    query_layers: &[Vec<f64>],
    bank: &EmbeddingBank,
    from_layer: usize,
) -> Result<(f64, usize), ScoreError> {
    if bank.is_empty() {
        return Err(ScoreError::EmptyBank);
    }
    let ll = bank.embedded.layers.len();
    if query_layers.len() != ll {
        return Err(ScoreError::Mismatch(format!(
            "{} query layers vs {} bank layers",
            query_layers.len(),
            ll
        )));
    }
    if from_layer >= ll {
        return Err(ScoreError::BadArg(format!(
            "first ensemble layer {from_layer} out of range for {ll} layers"
        )));
    }
    let mut total = 0.0;
    let mut summed = vec![0.0; bank.len()];
    for (l, q) in query_layers.iter().enumerate().skip(from_layer) {
        let qn = unit(q)?;
        let t = &bank.embedded.layers[l];
        let mut best = f64::NEG_INFINITY;
        for i in 0..bank.len() {
            let row = t.row(i);
            let norm = l2_norm(row);
            if norm <= EPS_NORM {
                return Err(ScoreError::Num(NumError::DegenerateVector));
            }
            let s: f64 = qn.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / norm;
            summed[i] += s;
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    let label = summed
        .iter()
        .enumerate()
        .max_by(|a, b| (*a.1).total_cmp(b.1))
        .map(|(i, _)| bank.labels[i])
        .unwrap_or(0);
    Ok((total, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Cosine,
    Mahalanobis,
}

/// Scores of one evaluation set against each layer's bank separately, plus
/// the z-based column. Used for the layer-wise quality profile.
#[derive(Debug, Clone)]
pub struct LayerwiseScores {
    /// One column per encoder layer, each `n` scores.
    pub layer_cols: Vec<Vec<f64>>,
    pub z_col: Vec<f64>,
}

pub fn layerwise_scores(
    queries: &Embedded,
    bank: &EmbeddingBank,
    kind: ScoreKind,
    ridge: f64,
) -> Result<LayerwiseScores, ScoreError> {
    if bank.is_empty() {
        return Err(ScoreError::EmptyBank);
    }
    let n = queries.len();
    let ll = bank.embedded.layers.len();
    if queries.layers.len() != ll {
        return Err(ScoreError::Mismatch(format!(
            "{} query layers vs {} bank layers",
            queries.layers.len(),
            ll
        )));
    }
    let mut layer_cols = Vec::with_capacity(ll);
    for l in 0..ll {
        let mut col = Vec::with_capacity(n);
        match kind {
            ScoreKind::Cosine => {
                let t = &bank.embedded.layers[l];
                for i in 0..n {
                    let q = unit(queries.layers[l].row(i))?;
                    let mut best = f64::NEG_INFINITY;
                    for j in 0..bank.len() {
                        let row = t.row(j);
                        let norm = l2_norm(row);
                        if norm <= EPS_NORM {
                            return Err(ScoreError::Num(NumError::DegenerateVector));
                        }
                        let s: f64 = q.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / norm;
                        best = best.max(s);
                    }
                    col.push(best);
                }
            }
            ScoreKind::Mahalanobis => {
                let stats = mahalanobis_fit(
                    &bank.embedded.layers[l],
                    &bank.labels,
                    &bank.label_names,
                    ridge,
                )?;
                for i in 0..n {
                    col.push(mahalanobis_score(queries.layers[l].row(i), &stats)?);
                }
            }
        }
        layer_cols.push(col);
    }
    let mut z_col = Vec::with_capacity(n);
    match kind {
        ScoreKind::Cosine => {
            for i in 0..n {
                let (s, _) = cosine_score(queries.z_raw.row(i), bank, SliceMode::Full)?;
                z_col.push(s);
            }
        }
        ScoreKind::Mahalanobis => {
            let stats =
                mahalanobis_fit(&bank.embedded.z_raw, &bank.labels, &bank.label_names, ridge)?;
            for i in 0..n {
                z_col.push(mahalanobis_score(queries.z_raw.row(i), &stats)?);
            }
        }
    }
    Ok(LayerwiseScores { layer_cols, z_col })
}

/// One scored example, as written to the score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: usize,
    pub mode: String,
    /// 1-based encoder layer, or None for the assembled representation.
    pub layer: Option<usize>,
    pub score: f64,
    pub pred_label: Option<usize>,
    pub is_ood: bool,
}

/// Largest threshold keeping at least `tpr` of the given in-distribution
/// scores at or above it. No interpolation: the threshold is always one of
/// the observed scores.
pub fn threshold_at_tpr(ind_scores: &[f64], tpr: f64) -> Result<f64, ScoreError> {
    if ind_scores.is_empty() {
        return Err(ScoreError::BadArg("no in-distribution scores".into()));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(ScoreError::BadArg(format!("tpr {tpr} outside (0, 1]")));
    }
    if ind_scores.iter().any(|s| !s.is_finite()) {
        return Err(ScoreError::BadArg("non-finite score".into()));
    }
    let mut sorted = ind_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = (tpr * sorted.len() as f64).ceil() as usize;
    Ok(sorted[keep.clamp(1, sorted.len()) - 1])
}

/// In-distribution iff the score reaches the threshold.
pub fn decide(score: f64, threshold: f64) -> bool {
    score >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_corpus_str;
    use crate::encoder::EncoderConfig;
    use crate::head::{GclParams, GclSharing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_bank(rows: &[Vec<f64>], labels: &[usize]) -> EmbeddingBank {
        let z_raw = Tensor::from_rows(rows).unwrap();
        let norm_rows: Vec<Vec<f64>> = rows.iter().map(|r| unit(r).unwrap()).collect();
        let names = {
            let k = labels.iter().max().unwrap() + 1;
            (0..k).map(|i| format!("c{i}")).collect()
        };
        EmbeddingBank {
            embedded: Embedded {
                z_raw: z_raw.clone(),
                z_norm: Tensor::from_rows(&norm_rows).unwrap(),
                layers: vec![z_raw],
                seg_width: rows[0].len() / 2,
                n_segments: 2,
            },
            labels: labels.to_vec(),
            label_names: names,
            checkpoint_id: "test".into(),
            corpus_id: "test".into(),
        }
    }

    #[test]
    fn nearest_neighbor_tie_breaks_to_lowest_index() {
        let bank = toy_bank(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let q = vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
        let (s, label) = cosine_score(&q, &bank, SliceMode::Full).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(label, 0);
    }

    #[test]
    fn bank_member_scores_exactly_one() {
        let bank = toy_bank(&[vec![3.0, 4.0], vec![-1.0, 2.0]], &[0, 1]);
        let (s, label) = cosine_score(&[3.0, 4.0], &bank, SliceMode::Full).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(label, 0);
        let empty = EmbeddingBank { labels: vec![], ..bank };
        assert!(matches!(
            cosine_score(&[1.0, 0.0], &empty, SliceMode::Full),
            Err(ScoreError::EmptyBank)
        ));
    }

    #[test]
    fn upper_half_uses_trailing_segments_only() {
        // Two segments of width 1: upper half keeps only the second column.
        let bank = toy_bank(&[vec![5.0, 1.0], vec![-2.0, -1.0]], &[0, 1]);
        let (s, label) = cosine_score(&[100.0, 1.0], &bank, SliceMode::UpperHalf).unwrap();
        assert_eq!((s, label), (1.0, 0));
        let (s, label) = cosine_score(&[100.0, -1.0], &bank, SliceMode::UpperHalf).unwrap();
        assert_eq!((s, label), (1.0, 1));
        let mut no_seg = bank;
        no_seg.embedded.n_segments = 0;
        assert!(cosine_score(&[1.0, 0.0], &no_seg, SliceMode::UpperHalf).is_err());
    }

    #[test]
    fn identity_covariance_is_negated_squared_euclidean() {
        let stats = GaussianStats::from_parts(
            vec![Tensor::vector(vec![0.0, 0.0])],
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        let (s, c) = mahalanobis_classify(&[3.0, 4.0], &stats).unwrap();
        assert!((s + 25.0).abs() < 1e-12);
        assert_eq!(c, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mu: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let st = GaussianStats::from_parts(
                vec![Tensor::vector(mu.clone())],
                Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                0.0,
            )
            .unwrap();
            let want = -(x.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            assert!((mahalanobis_score(&x, &st).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn diagonal_covariance_hand_case() {
        let stats = GaussianStats::from_parts(
            vec![Tensor::vector(vec![0.0, 0.0])],
            Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        let s = mahalanobis_score(&[2.0, 1.0], &stats).unwrap();
        assert!((s + 2.0).abs() < 1e-12, "{s}");
        // At a mean the score peaks at exactly zero.
        assert_eq!(mahalanobis_score(&[0.0, 0.0], &stats).unwrap(), 0.0);
    }

    #[test]
    fn scores_are_never_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> =
            (0..20).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let stats = mahalanobis_fit(
            &Tensor::from_rows(&rows).unwrap(),
            &labels,
            &["a".into(), "b".into()],
            DEFAULT_RIDGE,
        )
        .unwrap();
        for row in &rows {
            assert!(mahalanobis_score(row, &stats).unwrap() <= 0.0);
        }
    }

    #[test]
    fn fit_rejects_small_classes_and_bad_labels() {
        let feats = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let err = mahalanobis_fit(&feats, &[0, 0, 1], &["a".into(), "b".into()], 1e-6).unwrap_err();
        assert!(matches!(err, ScoreError::ClassTooSmall(ref n, 1) if n == "b"), "{err}");
        assert!(mahalanobis_fit(&feats, &[0, 0, 2], &["a".into(), "b".into()], 1e-6).is_err());
    }

    #[test]
    fn affine_invariance_up_to_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let rows: Vec<Vec<f64>> =
            (0..24).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        // Well-conditioned map: identity plus a small random perturbation,
        // and a shift.
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.2..0.2);
            }
        }
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = |x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| b[j] + (0..d).map(|i| x[i] * a[i * d + j]).sum::<f64>())
                .collect()
        };
        let mapped: Vec<Vec<f64>> = rows.iter().map(|r| map(r)).collect();
        let s1 = mahalanobis_fit(&Tensor::from_rows(&rows).unwrap(), &labels, &names, 1e-10).unwrap();
        let s2 =
            mahalanobis_fit(&Tensor::from_rows(&mapped).unwrap(), &labels, &names, 1e-10).unwrap();
        for _ in 0..20 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v1 = mahalanobis_score(&q, &s1).unwrap();
            let v2 = mahalanobis_score(&map(&q), &s2).unwrap();
            let rel = (v1 - v2).abs() / v1.abs().max(1e-3);
            assert!(rel < 1e-6, "{v1} vs {v2}");
        }
    }

    fn layered_bank(layers: Vec<Tensor>, labels: Vec<usize>) -> EmbeddingBank {
        let z = layers.last().unwrap().clone();
        let norm_rows: Vec<Vec<f64>> =
            (0..z.shape()[0]).map(|i| unit(z.row(i)).unwrap()).collect();
        let k = labels.iter().max().unwrap() + 1;
        EmbeddingBank {
            embedded: Embedded {
                z_raw: z.clone(),
                z_norm: Tensor::from_rows(&norm_rows).unwrap(),
                layers,
                seg_width: 0,
                n_segments: 0,
            },
            labels,
            label_names: (0..k).map(|i| format!("c{i}")).collect(),
            checkpoint_id: "test".into(),
            corpus_id: "test".into(),
        }
    }

    #[test]
    fn cosine_ensemble_equals_per_layer_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let d = rng.gen_range(2..5);
            let ll = rng.gen_range(1..4);
            let layers: Vec<Tensor> = (0..ll)
                .map(|_| {
                    Tensor::from_rows(
                        &(0..n)
                            .map(|_| (0..d).map(|_| rng.gen_range(0.1..1.0)).collect::<Vec<_>>())
                            .collect::<Vec<_>>(),
                    )
                    .unwrap()
                })
                .collect();
            let bank = layered_bank(layers.clone(), (0..n).map(|i| i % 2).collect());
            let q: Vec<Vec<f64>> =
                (0..ll).map(|_| (0..d).map(|_| rng.gen_range(0.1..1.0)).collect()).collect();
            let (total, _) = cosine_ensemble_score(&q, &bank).unwrap();
            // Independent per-layer maxima.
            let mut want = 0.0;
            for (l, ql) in q.iter().enumerate() {
                let qn = unit(ql).unwrap();
                let mut best = f64::NEG_INFINITY;
                for j in 0..n {
                    let row = layers[l].row(j);
                    let bn = unit(row).unwrap();
                    best = best.max(qn.iter().zip(&bn).map(|(a, b)| a * b).sum());
                }
                want += best;
            }
            assert!((total - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_ensemble_of_bank_member_scores_layer_count() {
        let layers: Vec<Tensor> = (0..3)
            .map(|l| {
                Tensor::from_rows(&[vec![1.0 + l as f64, 2.0], vec![-1.0, 0.5 + l as f64]]).unwrap()
            })
            .collect();
        let bank = layered_bank(layers.clone(), vec![0, 1]);
        let q: Vec<Vec<f64>> = layers.iter().map(|t| t.row(1).to_vec()).collect();
        let (total, label) = cosine_ensemble_score(&q, &bank).unwrap();
        assert!((total - 3.0).abs() < 1e-12);
        assert_eq!(label, 1);
    }

    #[test]
    fn maha_ensemble_matches_hand_two_layer_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let d = 2;
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_rows(
                &(0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let h1 = mk(&mut rng);
        let h2 = mk(&mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let bank = layered_bank(vec![h1.clone(), h2.clone()], labels.clone());
        let ens = fit_maha_ensemble(&bank, 1e-6).unwrap();
        let names = vec!["c0".to_string(), "c1".to_string()];
        let s_last = mahalanobis_fit(&h2, &labels, &names, 1e-6).unwrap();
        let s_first = mahalanobis_fit(&tanh_rows(&h1), &labels, &names, 1e-6).unwrap();
        for _ in 0..10 {
            let q1: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q2: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (total, _) = maha_ensemble_score(&[q1.clone(), q2.clone()], &ens).unwrap();
            let t1: Vec<f64> = q1.iter().map(|v| v.tanh()).collect();
            let want = mahalanobis_score(&t1, &s_first).unwrap()
                + mahalanobis_score(&q2, &s_last).unwrap();
            assert!((total - want).abs() < 1e-10, "{total} vs {want}");
        }
    }

    #[test]
    fn single_layer_ensemble_degenerates_to_last_layer_score() {
        let rows = vec![vec![0.2, 0.4], vec![0.9, 0.1], vec![0.3, 0.8], vec![0.7, 0.6]];
        let labels = vec![0, 0, 1, 1];
        let bank = layered_bank(vec![Tensor::from_rows(&rows).unwrap()], labels.clone());
        let ens = fit_maha_ensemble(&bank, 1e-6).unwrap();
        let names = vec!["c0".to_string(), "c1".to_string()];
        let single =
            mahalanobis_fit(&Tensor::from_rows(&rows).unwrap(), &labels, &names, 1e-6).unwrap();
        let q = vec![0.5, 0.5];
        let (total, _) = maha_ensemble_score(&[q.clone()], &ens).unwrap();
        assert!((total - mahalanobis_score(&q, &single).unwrap()).abs() < 1e-12);
        let (ct, _) = cosine_ensemble_score(&[q.clone()], &bank).unwrap();
        let (cs, _) = cosine_score(&q, &bank, SliceMode::Full).unwrap();
        assert!((ct - cs).abs() < 1e-12);
    }

    #[test]
    fn threshold_keeps_the_required_fraction() {
        let scores: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        assert_eq!(threshold_at_tpr(&scores, 0.95).unwrap(), 2.0);
        assert_eq!(threshold_at_tpr(&scores, 1.0).unwrap(), 1.0);
        assert_eq!(threshold_at_tpr(&scores, 0.5).unwrap(), 11.0);
        assert!(threshold_at_tpr(&[], 0.95).is_err());
        assert!(threshold_at_tpr(&scores, 0.0).is_err());

        let delta = threshold_at_tpr(&scores, 0.95).unwrap();
        assert!(decide(delta, delta), "boundary scores count as in-distribution");
        assert!(!decide(delta - 0.1, delta));
        // Monotone: raising a score never flips the decision to out.
        for s in [0.0, 1.9, 2.0, 2.1, 30.0] {
            if decide(s, delta) {
                assert!(decide(s + 1.0, delta));
            }
        }
    }

    #[test]
    fn bank_from_trained_shapes_and_determinism() {
        let corpus = load_corpus_str(
            r#"{"train": [
                ["alpha beta gamma", "x"], ["beta gamma alpha", "x"],
                ["delta epsilon zeta", "y"], ["epsilon zeta delta", "y"]
            ]}"#,
        )
        .unwrap();
        let vocab = crate::data::build_vocab(&corpus, 1).unwrap();
        let enc_cfg = EncoderConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ff_mult: 2,
            dropout_p: 0.1,
            max_len: 8,
            vocab_size: vocab.len(),
        };
        let enc = EncoderParams::init(enc_cfg, 1).unwrap();
        let gcl = GclParams::for_encoder(2, 8, None, GclSharing::Shared, 2).unwrap();
        let head = TrainedHead::Lacl { layer_start: 1, gcl };
        let ckpt = crate::checkpoint::Checkpoint::from_parts(
            &enc,
            &head,
            vocab.tokens().to_vec(),
            corpus.label_names.clone(),
            0,
        );
        let bank = build_bank(&ckpt, &corpus).unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.embedded.layers.len(), 2);
        assert_eq!(bank.embedded.z_raw.shape(), [4, 8]);
        for i in 0..4 {
            let norm = l2_norm(bank.embedded.z_norm.row(i));
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert_eq!(bank.labels, vec![0, 0, 1, 1]);
        let again = build_bank(&ckpt, &corpus).unwrap();
        assert_eq!(bank.embedded.z_raw, again.embedded.z_raw);
        assert_eq!(bank.checkpoint_id, again.checkpoint_id);

        let mut wrong = corpus;
        wrong.label_names = vec!["other".into(), "names".into()];
        assert!(matches!(build_bank(&ckpt, &wrong), Err(ScoreError::Mismatch(_))));
    }

    #[test]
    fn layerwise_table_has_layer_plus_z_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10;
        let d = 3;
        let layers: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::from_rows(
                    &(0..n)
                        .map(|_| (0..d).map(|_| rng.gen_range(0.1..1.0)).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        let bank = layered_bank(layers.clone(), (0..n).map(|i| i % 2).collect());
        let queries = Embedded {
            z_raw: layers.last().unwrap().clone(),
            z_norm: bank.embedded.z_norm.clone(),
            layers: layers.clone(),
            seg_width: 0,
            n_segments: 0,
        };
        for kind in [ScoreKind::Cosine, ScoreKind::Mahalanobis] {
            let table = layerwise_scores(&queries, &bank, kind, 1e-6).unwrap();
            assert_eq!(table.layer_cols.len(), 4);
            assert!(table.layer_cols.iter().all(|c| c.len() == n));
            assert_eq!(table.z_col.len(), n);
        }
        // The z column shares the plain scorer's code path.
        let table = layerwise_scores(&queries, &bank, ScoreKind::Cosine, 1e-6).unwrap();
        for i in 0..n {
            let (s, _) = cosine_score(queries.z_raw.row(i), &bank, SliceMode::Full).unwrap();
            assert_eq!(table.z_col[i], s);
        }
    }
}
