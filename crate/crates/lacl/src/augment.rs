//! Token-level augmentations and the two-view recipe used by contrastive
//! training. Dropout is deliberately absent here: it lives in the encoder's
//! stochastic forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::data::{encode, LabeledExample, Vocabulary, MASK_ID};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sidecar root must be an object of text -> paraphrase array")]
    BadSidecarRoot,
    #[error("sidecar entry '{0}': {1}")]
    BadSidecarEntry(String, String),
    #[error("invalid augmentation policy: {0}")]
    BadPolicy(String),
    #[error("unknown augmentation '{0}'")]
    UnknownOp(String),
}

/// Precomputed paraphrases standing in for a translation round trip.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sidecar {
    map: BTreeMap<String, Vec<String>>,
}

impl Sidecar {
    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_json_str(raw: &str) -> Result<Self, AugmentError> {
        let root: Value = serde_json::from_str(raw)?;
        let obj = root.as_object().ok_or(AugmentError::BadSidecarRoot)?;
        let mut map = BTreeMap::new();
        for (text, value) in obj {
            let arr = value.as_array().ok_or_else(|| {
                AugmentError::BadSidecarEntry(text.clone(), "value is not an array".into())
            })?;
            let mut cands = Vec::with_capacity(arr.len());
            for v in arr {
                let s = v.as_str().ok_or_else(|| {
                    AugmentError::BadSidecarEntry(text.clone(), "paraphrase is not a string".into())
                })?;
                cands.push(s.to_string());
            }
            map.insert(text.clone(), cands);
        }
        Ok(Sidecar { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&[String]> {
        self.map.get(text).map(|v| v.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Rsm,
    Cutoff,
    Shuffle,
    Bt,
}

impl FromStr for AugmentOp {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, AugmentError> {
        match s {
            "rsm" => Ok(AugmentOp::Rsm),
            "cutoff" => Ok(AugmentOp::Cutoff),
            "shuffle" => Ok(AugmentOp::Shuffle),
            "bt" => Ok(AugmentOp::Bt),
            other => Err(AugmentError::UnknownOp(other.into())),
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentOp::Rsm => "rsm",
            AugmentOp::Cutoff => "cutoff",
            AugmentOp::Shuffle => "shuffle",
            AugmentOp::Bt => "bt",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub rsm_rate: f64,
    pub rsm_span: usize,
    pub cutoff_rate: f64,
    pub sidecar: Option<Sidecar>,
    pub view1: Vec<AugmentOp>,
    pub view2: Vec<AugmentOp>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rsm_rate: 0.15,
            rsm_span: 2,
            cutoff_rate: 0.15,
            sidecar: None,
            view1: vec![AugmentOp::Rsm],
            view2: vec![AugmentOp::Bt, AugmentOp::Rsm],
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, rate) in [("rsm_rate", self.rsm_rate), ("cutoff_rate", self.cutoff_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(AugmentError::BadPolicy(format!("{name} {rate} outside [0,1]")));
            }
        }
        if self.rsm_span == 0 {
            return Err(AugmentError::BadPolicy("rsm_span must be at least 1".into()));
        }
        Ok(())
    }
}

/// Masks seeded non-overlapping spans until at least ⌈rate·len⌉ positions are
/// covered, capped at len-1 so one real token always survives. Full-length
/// spans are preferred; truncated ones fill in only when nothing else fits.
pub fn random_span_mask(tokens: &[u32], rate: f64, span: usize, seed: u64) -> Vec<u32> {
    let len = tokens.len();
    let mut out = tokens.to_vec();
    if len == 0 || rate <= 0.0 || span == 0 {
        return out;
    }
    let needed = (rate * len as f64).ceil() as usize;
    let cap = len - 1;
    let mut covered = std::collections::BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while covered.len() < needed && covered.len() < cap {
        let full: Vec<usize> = (0..=len.saturating_sub(span))
            .filter(|&i| (i..i + span).all(|j| !covered.contains(&j)))
            .collect();
        let starts: Vec<usize> = if full.is_empty() {
            (0..len).filter(|j| !covered.contains(j)).collect()
        } else {
            full
        };
        if starts.is_empty() {
            break;
        }
        let s = starts[rng.gen_range(0..starts.len())];
        for j in s..(s + span).min(len) {
            if covered.contains(&j) || covered.len() >= cap {
                break;
            }
            covered.insert(j);
        }
    }
    for &j in &covered {
        out[j] = MASK_ID;
    }
    out
}

/// Deletes ⌊rate·len⌋ seeded positions (at most len-1), preserving the order
/// of survivors.
pub fn token_cutoff(tokens: &[u32], rate: f64, seed: u64) -> Vec<u32> {
    let len = tokens.len();
    if len == 0 || rate <= 0.0 {
        return tokens.to_vec();
    }
    let n_remove = ((rate * len as f64).floor() as usize).min(len - 1);
    if n_remove == 0 {
        return tokens.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop: std::collections::BTreeSet<usize> =
        rand::seq::index::sample(&mut rng, len, n_remove).into_iter().collect();
    tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, &t)| t)
        .collect()
}

/// Seeded permutation of the token order.
pub fn token_shuffle(tokens: &[u32], seed: u64) -> Vec<u32> {
    use rand::seq::SliceRandom;
    let mut out = tokens.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Seeded pick among the sidecar's paraphrases that differ from the input and
/// still contain a token; falls back to the original text otherwise.
pub fn back_translate(text: &str, sidecar: Option<&Sidecar>, seed: u64) -> String {
    let Some(cands) = sidecar.and_then(|s| s.get(text)) else {
        return text.to_string();
    };
    let usable: Vec<&String> = cands
        .iter()
        .filter(|c| c.as_str() != text && c.split_whitespace().next().is_some())
        .collect();
    if usable.is_empty() {
        return text.to_string();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    usable[rng.gen_range(0..usable.len())].clone()
}

/// The two training views of one example. Labels are untouched; each
/// augmentation draws an independent sub-seed so the views never share masks.
pub fn make_views(
    example: &LabeledExample,
    policy: &AugmentPolicy,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>), AugmentError> {
    policy.validate()?;
    let run = |recipe: &[AugmentOp], view: u64| -> Vec<u32> {
        let mut text = example.text.clone();
        let mut tokens = example.tokens.clone();
        for (i, op) in recipe.iter().enumerate() {
            let sub = crate::seeds::derive(seed, &[view, i as u64]);
            match op {
                AugmentOp::Bt => {
                    text = back_translate(&text, policy.sidecar.as_ref(), sub);
                    tokens = encode(&text, vocab);
                }
                AugmentOp::Rsm => {
                    tokens = random_span_mask(&tokens, policy.rsm_rate, policy.rsm_span, sub)
                }
                AugmentOp::Cutoff => tokens = token_cutoff(&tokens, policy.cutoff_rate, sub),
                AugmentOp::Shuffle => tokens = token_shuffle(&tokens, sub),
            }
        }
        tokens
    };
    Ok((run(&policy.view1, 1), run(&policy.view2, 2)))
}
