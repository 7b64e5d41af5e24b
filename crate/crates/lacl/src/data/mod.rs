//! Intent corpora: loading, vocabulary, encoding, and IND/OOD split
//! construction.

mod batch;
mod corpus;
mod split;
pub mod synth;

pub use batch::batch_iter;
pub use corpus::{
    build_vocab, encode, load_corpus, load_corpus_str, save_corpus, Corpus, Vocabulary, MASK_ID,
    PAD_ID, UNK_ID,
};
pub use split::{close_split, far_pair, parse_exclusions};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corpus root must be an object of split name -> record array")]
    BadRoot,
    #[error("unknown split key '{0}'")]
    UnknownSplit(String),
    #[error("malformed record {split}[{index}]: {detail}")]
    MalformedRecord { split: String, index: usize, detail: String },
    #[error("empty-split: {0}")]
    EmptySplit(String),
    #[error("degenerate-split: {0}")]
    DegenerateSplit(String),
    #[error("unknown exclusion name(s): {0}")]
    UnknownExclusion(String),
    #[error("invalid argument: {0}")]
    BadArg(String),
}

/// One labeled utterance. `tokens` is empty until the corpus is tokenized
/// against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub tokens: Vec<u32>,
    pub label: usize,
    pub domain: Option<String>,
}

/// An utterance kept label-free for OOD evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OodExample {
    pub text: String,
    pub tokens: Vec<u32>,
}
