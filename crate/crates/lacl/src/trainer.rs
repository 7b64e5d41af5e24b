//! Optimization loop: AdamW with cosine annealing over the contrastive
//! objective, or a cross-entropy baseline sharing the same encoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{make_views, AugmentError, AugmentPolicy};
use crate::checkpoint::{Checkpoint, TrainedHead};
use crate::data::{batch_iter, Corpus, DataError, Vocabulary};
use crate::encoder::{
    forward_on_tape, normal_init, pad_batch, pool_layers, EncoderConfig, EncoderError,
    EncoderNodes, EncoderParams,
};
use crate::head::{
    adjacent_correlation, cr_loss_on_tape, gcl_forward_on_tape, mean_adjacent_correlation,
    scl_loss_on_tape, total_loss, GclParams, GclSharing, HeadError,
};
use crate::numcore::{NodeId, NumError, Tape, Tensor};
use crate::seeds;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("gradient-overflow: non-finite gradient in {0}")]
    GradientOverflow(String),
    #[error("non-finite-objective: total loss at epoch {epoch} batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch} batch {batch}: {source}")]
    At {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Lacl,
    CeBaseline,
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lacl" => Ok(TrainMode::Lacl),
            "ce" | "ce_baseline" => Ok(TrainMode::CeBaseline),
            other => Err(format!("unknown mode {other:?}, expected lacl or ce")),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Lacl => "lacl",
            TrainMode::CeBaseline => "ce_baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainVariant {
    Full,
    /// Only the upper half of the encoder layers feed the compression MLP.
    UpperHalfTrain,
}

impl FromStr for TrainVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(TrainVariant::Full),
            "upper_half_train" | "upper-half-train" => Ok(TrainVariant::UpperHalfTrain),
            other => Err(format!(
                "unknown variant {other:?}, expected full or upper_half_train"
            )),
        }
    }
}

impl fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            TrainVariant::Full => "full",
            TrainVariant::UpperHalfTrain => "upper_half_train",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub margin: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub variant: TrainVariant,
    pub gcl_sharing: GclSharing,
    /// None resolves per the width rule in `head::default_g_hidden`.
    pub g_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_peak: 2e-3,
            weight_decay: 0.01,
            tau: 0.05,
            lambda1: 1.0,
            margin: 0.5,
            seed: 7,
            mode: TrainMode::Lacl,
            variant: TrainVariant::Full,
            gcl_sharing: GclSharing::Shared,
            g_hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak {} must be positive", self.lr_peak));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 {} must be non-negative", self.lambda1));
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return bad(format!("margin {} outside (0, 1]", self.margin));
        }
        Ok(())
    }
}

/// Cosine annealing from lr_peak down to zero, no warmup.
pub fn lr_at(step: usize, total_steps: usize, lr_peak: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam step with bias correction over a flat
/// parameter list. `names` only labels error messages.
pub fn adamw_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    names: &[&str],
    lr: f64,
    h: &AdamHyper,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::BadConfig(format!(
            "{} params vs {} grads vs {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(TrainError::BadConfig(format!(
                "grad {} shape {:?} vs param {:?}",
                names.get(i).copied().unwrap_or("?"),
                g.shape(),
                params[i].shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::GradientOverflow(
                names.get(i).copied().unwrap_or("?").to_string(),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let x = params[i].data_mut();
        for j in 0..g.len() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            x[j] -= lr * m_hat / (v_hat.sqrt() + h.eps) + lr * h.weight_decay * x[j];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_scl: f64,
    pub loss_cr: f64,
    pub mean_adj_cor: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config_echo: Vec<(String, String)>,
    pub checkpoint_path: Option<String>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// Comment lines carry the config echo and checkpoint path so the table
    /// itself stays plain CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config_echo {
            out.push_str(&format!("# {k}={v}\n"));
        }
        if let Some(p) = &self.checkpoint_path {
            out.push_str(&format!("# checkpoint={p}\n"));
        }
        out.push_str("epoch,lr,loss_total,loss_scl,loss_cr,mean_adj_cor\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.loss_total, r.loss_scl, r.loss_cr, r.mean_adj_cor
            ));
        }
        out
    }
}

pub fn config_echo(enc: &EncoderConfig, cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("mode".into(), cfg.mode.to_string()),
        ("variant".into(), cfg.variant.to_string()),
        ("epochs".into(), cfg.epochs.to_string()),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("lr_peak".into(), cfg.lr_peak.to_string()),
        ("weight_decay".into(), cfg.weight_decay.to_string()),
        ("tau".into(), cfg.tau.to_string()),
        ("lambda1".into(), cfg.lambda1.to_string()),
        ("margin".into(), cfg.margin.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        (
            "gcl_sharing".into(),
            match cfg.gcl_sharing {
                GclSharing::Shared => "shared".into(),
                GclSharing::PerLayer => "per_layer".into(),
            },
        ),
        (
            "g_hidden".into(),
            cfg.g_hidden
                .unwrap_or_else(|| crate::head::default_g_hidden(enc.dim))
                .to_string(),
        ),
        ("layers".into(), enc.layers.to_string()),
        ("dim".into(), enc.dim.to_string()),
        ("heads".into(), enc.heads.to_string()),
        ("ff_mult".into(), enc.ff_mult.to_string()),
        ("dropout_p".into(), enc.dropout_p.to_string()),
        ("max_len".into(), enc.max_len.to_string()),
        ("vocab_size".into(), enc.vocab_size.to_string()),
    ]
}

/// First (1-based) encoder layer the compression MLP sees.
pub fn gcl_layer_start(layers: usize, variant: TrainVariant) -> usize {
    match variant {
        TrainVariant::Full => 1,
        TrainVariant::UpperHalfTrain => layers / 2 + 1,
    }
}

fn flat_encoder_nodes(nodes: &EncoderNodes) -> Vec<NodeId> {
    let mut v = vec![nodes.tok_emb, nodes.pos_emb];
    for b in &nodes.blocks {
        v.extend(b.iter().copied());
    }
    v
}

struct StepStats {
    total: f64,
    scl: f64,
    cr: f64,
    mean_adj_cor: f64,
}

pub fn train(
    corpus: &Corpus,
    vocab: &Vocabulary,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    augment: &AugmentPolicy,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    enc_cfg.validate()?;
    cfg.validate()?;
    augment
        .validate()
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;
    if enc_cfg.vocab_size != vocab.len() {
        return Err(TrainError::BadConfig(format!(
            "config vocab_size {} but vocabulary has {} tokens",
            enc_cfg.vocab_size,
            vocab.len()
        )));
    }
    let data = corpus.tokenized(vocab);
    if data.train.is_empty() {
        return Err(TrainError::Data(DataError::EmptySplit("train".into())));
    }

    let mut enc = EncoderParams::init(enc_cfg.clone(), seeds::derive(cfg.seed, &[1]))?;
    let layer_start = gcl_layer_start(enc_cfg.layers, cfg.variant);
    let n_gcl_layers = enc_cfg.layers - layer_start + 1;
    let mut gcl: Option<GclParams> = None;
    let mut ce_head: Option<(Tensor, Tensor)> = None;
    match cfg.mode {
        TrainMode::Lacl => {
            gcl = Some(
                GclParams::init(
                    n_gcl_layers,
                    enc_cfg.dim,
                    enc_cfg.dim / enc_cfg.layers,
                    cfg.g_hidden
                        .unwrap_or_else(|| crate::head::default_g_hidden(enc_cfg.dim)),
                    cfg.gcl_sharing,
                    seeds::derive(cfg.seed, &[2]),
                )?,
            );
        }
        TrainMode::CeBaseline => {
            let classes = data.num_labels();
            if classes == 0 {
                return Err(TrainError::BadConfig("corpus has no labels".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[2]));
            ce_head = Some((
                Tensor::new(
                    vec![enc_cfg.dim, classes],
                    normal_init(&mut rng, enc_cfg.dim * classes, 0.02),
                )
                .expect("finite init"),
                Tensor::zeros(vec![classes]),
            ));
        }
    }

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut opt = {
        let mut refs: Vec<&Tensor> = enc.named().into_iter().map(|(_, t)| t).collect();
        if let Some(g) = &gcl {
            refs.extend(g.named().into_iter().map(|(_, t)| t));
        }
        if let Some((w, b)) = &ce_head {
            refs.push(w);
            refs.push(b);
        }
        AdamState::for_params(&refs)
    };
    let hyper = AdamHyper { weight_decay: cfg.weight_decay, ..AdamHyper::default() };

    let mut report = TrainReport {
        config_echo: config_echo(enc_cfg, cfg),
        checkpoint_path: None,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(n, cfg.batch_size, seeds::derive(cfg.seed, &[3]), epoch)?;
        let mut sums = StepStats { total: 0.0, scl: 0.0, cr: 0.0, mean_adj_cor: 0.0 };
        let mut lr_first = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let lr = lr_at(global_step, total_steps, cfg.lr_peak);
            if bi == 0 {
                lr_first = lr;
            }
            let stats = run_step(
                &mut enc, &mut gcl, &mut ce_head, &mut opt, &data.train, idx, vocab, enc_cfg,
                cfg, augment, layer_start, lr, &hyper, epoch, bi,
            )
            .map_err(|e| match e {
                e @ (TrainError::NonFiniteLoss { .. } | TrainError::At { .. }) => e,
                other => TrainError::At { epoch, batch: bi, source: Box::new(other) },
            })?;
            sums.total += stats.total;
            sums.scl += stats.scl;
            sums.cr += stats.cr;
            sums.mean_adj_cor += stats.mean_adj_cor;
            global_step += 1;
        }
        let nb = batches.len() as f64;
        report.epochs.push(EpochRecord {
            epoch,
            lr: lr_first,
            loss_total: sums.total / nb,
            loss_scl: sums.scl / nb,
            loss_cr: sums.cr / nb,
            mean_adj_cor: sums.mean_adj_cor / nb,
        });
    }

    let head = match cfg.mode {
        TrainMode::Lacl => TrainedHead::Lacl { layer_start, gcl: gcl.expect("lacl head") },
        TrainMode::CeBaseline => {
            let (w, b) = ce_head.expect("ce head");
            TrainedHead::Ce { w, b }
        }
    };
    let ckpt = Checkpoint::from_parts(
        &enc,
        &head,
        vocab.tokens().to_vec(),
        data.label_names.clone(),
        cfg.seed,
    );
    Ok((ckpt, report))
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    enc: &mut EncoderParams,
    gcl: &mut Option<GclParams>,
    ce_head: &mut Option<(Tensor, Tensor)>,
    opt: &mut AdamState,
    train_set: &[crate::data::LabeledExample],
    idx: &[usize],
    vocab: &Vocabulary,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    augment: &AugmentPolicy,
    layer_start: usize,
    lr: f64,
    hyper: &AdamHyper,
    epoch: usize,
    bi: usize,
) -> Result<StepStats, TrainError> {
    let mut tape = Tape::new();
    let enc_nodes = enc.leaf_on(&mut tape);
    let ep = epoch as u64;
    let bu = bi as u64;

    let (root, stats, head_node_ids): (NodeId, StepStats, Vec<NodeId>) = match cfg.mode {
        TrainMode::Lacl => {
            let gcl_params = gcl.as_ref().expect("lacl head");
            let gcl_nodes = gcl_params.leaf_on(&mut tape);
            let mut v1 = Vec::with_capacity(idx.len());
            let mut v2 = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len() * 2);
            for &i in idx {
                let ex = &train_set[i];
                let (a, b) =
                    make_views(ex, augment, vocab, seeds::derive(cfg.seed, &[4, ep, bu, i as u64]))?;
                v1.push(a);
                v2.push(b);
                labels.push(ex.label);
                labels.push(ex.label);
            }
            let mut pooled_views = Vec::with_capacity(2);
            for (view, seqs) in [(1u64, &v1), (2u64, &v2)] {
                let batch = pad_batch(seqs, enc_cfg)?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[5, ep, bu, view]));
                let states =
                    forward_on_tape(enc_cfg, &enc_nodes, &mut tape, &batch, &mut Some(&mut rng))?;
                pooled_views.push(pool_layers(&mut tape, &states)?);
            }
            let (cs1, z1) =
                gcl_forward_on_tape(&mut tape, &gcl_nodes, &pooled_views[0][layer_start - 1..])?;
            let (cs2, z2) =
                gcl_forward_on_tape(&mut tape, &gcl_nodes, &pooled_views[1][layer_start - 1..])?;
            let z = tape.interleave_rows(z1, z2)?;
            let zn = tape.row_l2norm(z)?;
            let scl = scl_loss_on_tape(&mut tape, zn, &labels, cfg.tau)?;
            let mut cs = Vec::with_capacity(cs1.len());
            for (a, b) in cs1.iter().zip(&cs2) {
                cs.push(tape.interleave_rows(*a, *b)?);
            }
            let cr = cr_loss_on_tape(&mut tape, &cs, cfg.margin)?;
            let (root, breakdown) = total_loss(&mut tape, scl, cr, cfg.lambda1)?;
            let c_vals: Vec<Tensor> = cs.iter().map(|&c| tape.value(c).clone()).collect();
            let mac = mean_adjacent_correlation(&c_vals)?;
            (
                root,
                StepStats {
                    total: breakdown.total,
                    scl: breakdown.scl,
                    cr: breakdown.cr,
                    mean_adj_cor: mac,
                },
                gcl_nodes.sets.iter().flatten().copied().collect(),
            )
        }
        TrainMode::CeBaseline => {
            let (w, b) = ce_head.as_ref().expect("ce head");
            let wn = tape.leaf(w.clone());
            let bn = tape.leaf(b.clone());
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| train_set[i].tokens.clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].label).collect();
            let batch = pad_batch(&seqs, enc_cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[5, ep, bu, 0]));
            let states =
                forward_on_tape(enc_cfg, &enc_nodes, &mut tape, &batch, &mut Some(&mut rng))?;
            let pooled = pool_layers(&mut tape, &states)?;
            let last = *pooled.last().expect("at least one layer");
            let logits = tape.matmul(last, wn).and_then(|x| tape.add_bias(x, bn))?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            (
                loss,
                StepStats { total: value, scl: 0.0, cr: 0.0, mean_adj_cor: 0.0 },
                vec![wn, bn],
            )
        }
    };

    if !stats.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
    }
    tape.backward(root)?;

    let mut node_ids = flat_encoder_nodes(&enc_nodes);
    node_ids.extend(head_node_ids);
    let grads: Vec<Tensor> = node_ids.iter().map(|&id| tape.grad(id).clone()).collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();

    let mut names: Vec<String> = enc.named().iter().map(|(k, _)| k.clone()).collect();
    let mut params: Vec<&mut Tensor> = enc.named_mut().into_iter().map(|(_, t)| t).collect();
    if let Some(g) = gcl {
        names.extend(g.named().iter().map(|(k, _)| k.clone()));
        params.extend(g.named_mut().into_iter().map(|(_, t)| t));
    }
    if let Some((w, b)) = ce_head {
        names.push("ce.w".into());
        names.push("ce.b".into());
        params.push(w);
        params.push(b);
    }
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    adamw_step(opt, &mut params, &grad_refs, &name_refs, lr, hyper)?;
    Ok(stats)
}

/// Outcome of the end-to-end finite-difference audit of the contrastive
/// objective.
#[derive(Debug, Clone)]
pub struct ObjectiveCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    /// batches actually compared
    pub checked: usize,
    /// batches skipped because a correlation sat on the margin boundary,
    /// where the selection mask makes the objective non-differentiable
    pub skipped: usize,
}

/// Default step for the end-to-end audit. Smaller than the per-op default
/// because the composed objective leaves more truncation error at 1e-5 while
/// roundoff only bites below 1e-7.
pub const OBJECTIVE_FD_STEP: f64 = 1e-6;

fn fd_test_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        ff_mult: 2,
        dropout_p: 0.0,
        max_len: 8,
        vocab_size: 16,
    }
}

fn nudge(enc: &mut EncoderParams, gcl: &mut GclParams, p: usize, k: usize, delta: f64) {
    let mut named = enc.named_mut();
    if p < named.len() {
        named[p].1.data_mut()[k] += delta;
    } else {
        let off = named.len();
        gcl.named_mut()[p - off].1.data_mut()[k] += delta;
    }
}

/// Compares every analytic parameter gradient of the full objective, tokens
/// through both loss terms, against a central finite difference on a small
/// two-layer model. Relative errors are floored at `REL_ERR_FLOOR` so
/// near-zero gradient entries do not dominate.
pub fn objective_grad_check(
    batches: usize,
    base_seed: u64,
    step: f64,
) -> Result<ObjectiveCheck, TrainError> {
    objective_grad_check_probed(batches, base_seed, step, None)
}

/// Like [`objective_grad_check`], but with an optional cap on probed entries
/// per parameter tensor. Every tensor is still audited each batch: the entry
/// with the largest gradient plus a seeded random sample up to the cap.
pub fn objective_grad_check_probed(
    batches: usize,
    base_seed: u64,
    step: f64,
    per_tensor_cap: Option<usize>,
) -> Result<ObjectiveCheck, TrainError> {
    let enc_cfg = fd_test_config();
    let (tau, margin, lambda1) = (0.05, 0.5, 1.0);
    let out_width = enc_cfg.dim / enc_cfg.layers;
    let g_hidden = 2 * enc_cfg.dim;

    let eval = |enc: &EncoderParams,
                gcl: &GclParams,
                b1: &crate::encoder::PaddedBatch,
                b2: &crate::encoder::PaddedBatch,
                labels: &[usize]|
     -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let enc_nodes = enc.leaf_on(&mut tape);
        let gcl_nodes = gcl.leaf_on(&mut tape);
        let mut pooled_views = Vec::with_capacity(2);
        for batch in [b1, b2] {
            let states = forward_on_tape(&enc_cfg, &enc_nodes, &mut tape, batch, &mut None)?;
            pooled_views.push(pool_layers(&mut tape, &states)?);
        }
        let (cs1, z1) = gcl_forward_on_tape(&mut tape, &gcl_nodes, &pooled_views[0])?;
        let (cs2, z2) = gcl_forward_on_tape(&mut tape, &gcl_nodes, &pooled_views[1])?;
        let z = tape.interleave_rows(z1, z2)?;
        let zn = tape.row_l2norm(z)?;
        let scl = scl_loss_on_tape(&mut tape, zn, labels, tau)?;
        let mut cs = Vec::with_capacity(cs1.len());
        for (a, b) in cs1.iter().zip(&cs2) {
            cs.push(tape.interleave_rows(*a, *b)?);
        }
        let cr = cr_loss_on_tape(&mut tape, &cs, margin)?;
        let (root, _) = total_loss(&mut tape, scl, cr, lambda1)?;
        Ok(tape.value(root).item())
    };

    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    let mut skipped = 0usize;

    for b in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(base_seed, &[6, b as u64]));
        let enc = EncoderParams::init(enc_cfg.clone(), seeds::derive(base_seed, &[7, b as u64]))?;
        let mut gcl = GclParams::init(
            enc_cfg.layers,
            enc_cfg.dim,
            out_width,
            g_hidden,
            GclSharing::Shared,
            seeds::derive(base_seed, &[8, b as u64]),
        )?;
        // Fresh-init compression weights leave the assembled representation
        // with near-zero norm, which makes the normalization Jacobian so
        // ill-conditioned that central differences drown in truncation error.
        // Scaling the weights to unit-order output keeps the comparison about
        // the backward pass instead of float cancellation.
        for (_, t) in gcl.named_mut() {
            for v in t.data_mut() {
                *v *= 25.0;
            }
        }

        use rand::Rng;
        let n = 2;
        let mut v1: Vec<Vec<u32>> = Vec::with_capacity(n);
        let mut v2: Vec<Vec<u32>> = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(2 * n);
        for i in 0..n {
            let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
                let len = rng.gen_range(3..=6);
                (0..len).map(|_| rng.gen_range(3..enc_cfg.vocab_size as u32)).collect()
            };
            v1.push(seq(&mut rng));
            v2.push(seq(&mut rng));
            labels.push(i);
            labels.push(i);
        }
        let b1 = pad_batch(&v1, &enc_cfg)?;
        let b2 = pad_batch(&v2, &enc_cfg)?;

        // Analytic pass, plus the c values for the boundary test.
        let mut tape = Tape::new();
        let enc_nodes = enc.leaf_on(&mut tape);
        let gcl_nodes = gcl.leaf_on(&mut tape);
        let mut pooled_views = Vec::with_capacity(2);
        for batch in [&b1, &b2] {
            let states = forward_on_tape(&enc_cfg, &enc_nodes, &mut tape, batch, &mut None)?;
            pooled_views.push(pool_layers(&mut tape, &states)?);
        }
        let (cs1, z1) = gcl_forward_on_tape(&mut tape, &gcl_nodes, &pooled_views[0])?;
        let (cs2, z2) = gcl_forward_on_tape(&mut tape, &gcl_nodes, &pooled_views[1])?;
        let z = tape.interleave_rows(z1, z2)?;
        let zn = tape.row_l2norm(z)?;
        let scl = scl_loss_on_tape(&mut tape, zn, &labels, tau)?;
        let mut cs = Vec::with_capacity(cs1.len());
        for (a, bb) in cs1.iter().zip(&cs2) {
            cs.push(tape.interleave_rows(*a, *bb)?);
        }
        let cr = cr_loss_on_tape(&mut tape, &cs, margin)?;
        let (root, _) = total_loss(&mut tape, scl, cr, lambda1)?;

        let c_vals: Vec<Tensor> = cs.iter().map(|&c| tape.value(c).clone()).collect();
        let mut on_boundary = false;
        for l in 1..enc_cfg.layers {
            for d in 0..out_width {
                if (adjacent_correlation(&c_vals, l, d)? - margin).abs() < 1e-6 {
                    on_boundary = true;
                }
            }
        }
        if on_boundary {
            skipped += 1;
            continue;
        }

        tape.backward(root)?;
        let mut node_ids = flat_encoder_nodes(&enc_nodes);
        node_ids.extend(gcl_nodes.sets.iter().flatten().copied());
        let grads: Vec<Tensor> = node_ids.iter().map(|&id| tape.grad(id).clone()).collect();
        let mut names: Vec<String> = enc.named().iter().map(|(k, _)| k.clone()).collect();
        names.extend(gcl.named().iter().map(|(k, _)| k.clone()));

        let mut enc_fd = enc.clone();
        let mut gcl_fd = gcl.clone();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(seeds::derive(base_seed, &[9, b as u64]));
        for (p, grad) in grads.iter().enumerate() {
            let entries: Vec<usize> = match per_tensor_cap {
                Some(cap) if grad.numel() > cap => {
                    let top = (0..grad.numel())
                        .max_by(|&i, &j| grad.data()[i].abs().total_cmp(&grad.data()[j].abs()))
                        .unwrap();
                    let mut picked = vec![top];
                    while picked.len() < cap {
                        let k = probe_rng.gen_range(0..grad.numel());
                        if !picked.contains(&k) {
                            picked.push(k);
                        }
                    }
                    picked
                }
                _ => (0..grad.numel()).collect(),
            };
            for k in entries {
                nudge(&mut enc_fd, &mut gcl_fd, p, k, step);
                let plus = eval(&enc_fd, &gcl_fd, &b1, &b2, &labels)?;
                nudge(&mut enc_fd, &mut gcl_fd, p, k, -2.0 * step);
                let minus = eval(&enc_fd, &gcl_fd, &b1, &b2, &labels)?;
                nudge(&mut enc_fd, &mut gcl_fd, p, k, step);
                let fd = (plus - minus) / (2.0 * step);
                let a = grad.data()[k];
                let rel = (a - fd).abs() / (a.abs().max(fd.abs())).max(crate::numcore::REL_ERR_FLOOR);
                if rel > worst {
                    worst = rel;
                    worst_param = format!("{}[{k}]", names[p]);
                }
            }
        }
        checked += 1;
    }

    Ok(ObjectiveCheck { max_rel_err: worst, worst_param, checked, skipped })
}
