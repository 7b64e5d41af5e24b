use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{DataError, LabeledExample, OodExample};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<mask>"];
const LABELED_SPLITS: [&str; 3] = ["train", "val", "test"];
const OOS_SPLITS: [&str; 3] = ["oos_train", "oos_val", "oos_test"];

/// A corpus in CLINC layout: three labeled splits plus up to three label-free
/// OOD splits. Label ids are dense indices into `label_names`, which is
/// sorted so the assignment is stable across reloads.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub label_names: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub oos_train: Vec<OodExample>,
    pub oos_val: Vec<OodExample>,
    pub oos_test: Vec<OodExample>,
}

impl Corpus {
    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    /// New corpus with every example's tokens filled from `vocab`.
    pub fn tokenized(&self, vocab: &Vocabulary) -> Corpus {
        let lab = |xs: &[LabeledExample]| {
            xs.iter()
                .map(|e| LabeledExample { tokens: encode(&e.text, vocab), ..e.clone() })
                .collect()
        };
        let ood = |xs: &[OodExample]| {
            xs.iter()
                .map(|e| OodExample { text: e.text.clone(), tokens: encode(&e.text, vocab) })
                .collect()
        };
        Corpus {
            label_names: self.label_names.clone(),
            train: lab(&self.train),
            val: lab(&self.val),
            test: lab(&self.test),
            oos_train: ood(&self.oos_train),
            oos_val: ood(&self.oos_val),
            oos_test: ood(&self.oos_test),
        }
    }

    /// Texts to score as OOD: the label-free test split if present, otherwise
    /// the labeled test split with labels discarded.
    pub fn ood_eval_texts(&self) -> Vec<OodExample> {
        if !self.oos_test.is_empty() {
            self.oos_test.clone()
        } else {
            self.test
                .iter()
                .map(|e| OodExample { text: e.text.clone(), tokens: e.tokens.clone() })
                .collect()
        }
    }
}

/// Token string to id map with fixed reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(String::from)
        {
            return Err(DataError::BadArg(format!(
                "vocabulary must start with reserved tokens {RESERVED:?}"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(DataError::BadArg(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    /// Token strings in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }
}

/// Builds a vocabulary from the training split: lowercase whitespace tokens
/// seen at least `min_freq` times, in lexicographic order after the reserved
/// ids.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocabulary, DataError> {
    if min_freq == 0 {
        return Err(DataError::BadArg("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &corpus.train {
        for w in e.text.split_whitespace() {
            *counts.entry(w.to_lowercase()).or_insert(0) += 1;
        }
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        counts
            .into_iter()
            .filter(|&(ref t, c)| c >= min_freq && !RESERVED.contains(&t.as_str()))
            .map(|(t, _)| t),
    );
    Vocabulary::from_tokens(tokens)
}

/// Lowercase whitespace tokenization; unseen words map to the UNK id.
pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    text.split_whitespace().map(|w| vocab.id_of(&w.to_lowercase())).collect()
}

pub fn load_corpus(path: &Path) -> Result<Corpus, DataError> {
    load_corpus_str(&std::fs::read_to_string(path)?)
}

/// Parses a CLINC-layout corpus: `{"train": [["text","label"], ...], ...}`.
/// Splits named `oos_*` are kept label-free. A present but empty train split
/// is an error; an absent one is allowed so OOD-only files load.
pub fn load_corpus_str(raw: &str) -> Result<Corpus, DataError> {
    let root: Value = serde_json::from_str(raw)?;
    let obj = root.as_object().ok_or(DataError::BadRoot)?;

    let mut corpus = Corpus::default();
    let mut raw_labeled: BTreeMap<&str, Vec<(String, String)>> = BTreeMap::new();
    for (key, value) in obj {
        let records = parse_records(key, value)?;
        if LABELED_SPLITS.contains(&key.as_str()) {
            raw_labeled.insert(key.as_str(), records);
        } else if OOS_SPLITS.contains(&key.as_str()) {
            let out = records
                .into_iter()
                .map(|(text, _)| OodExample { text, tokens: Vec::new() })
                .collect();
            match key.as_str() {
                "oos_train" => corpus.oos_train = out,
                "oos_val" => corpus.oos_val = out,
                _ => corpus.oos_test = out,
            }
        } else {
            return Err(DataError::UnknownSplit(key.clone()));
        }
    }
    if matches!(raw_labeled.get("train"), Some(r) if r.is_empty()) {
        return Err(DataError::EmptySplit("train".into()));
    }

    let mut names: Vec<String> = raw_labeled
        .values()
        .flatten()
        .map(|(_, label)| label.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    names.sort();
    let ids: BTreeMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    for (split, records) in raw_labeled {
        let out: Vec<LabeledExample> = records
            .iter()
            .map(|(text, label)| LabeledExample {
                text: text.clone(),
                tokens: Vec::new(),
                label: ids[label.as_str()],
                domain: None,
            })
            .collect();
        match split {
            "train" => corpus.train = out,
            "val" => corpus.val = out,
            _ => corpus.test = out,
        }
    }
    corpus.label_names = names;
    Ok(corpus)
}

fn parse_records(split: &str, value: &Value) -> Result<Vec<(String, String)>, DataError> {
    let arr = value.as_array().ok_or_else(|| DataError::MalformedRecord {
        split: split.into(),
        index: 0,
        detail: "split value is not an array".into(),
    })?;
    let mut out = Vec::with_capacity(arr.len());
    for (index, rec) in arr.iter().enumerate() {
        let bad = |detail: &str| DataError::MalformedRecord {
            split: split.into(),
            index,
            detail: detail.into(),
        };
        let pair = rec.as_array().ok_or_else(|| bad("expected [text, label] array"))?;
        if pair.len() != 2 {
            return Err(bad(&format!("expected 2 elements, got {}", pair.len())));
        }
        let text = pair[0].as_str().ok_or_else(|| bad("text is not a string"))?;
        let label = pair[1].as_str().ok_or_else(|| bad("label is not a string"))?;
        if text.split_whitespace().next().is_none() {
            return Err(bad("text has no tokens"));
        }
        out.push((text.to_string(), label.to_string()));
    }
    Ok(out)
}

/// Writes a corpus back in the same layout `load_corpus` reads. Empty splits
/// are omitted; label-free splits are written with the placeholder label
/// "oos".
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), DataError> {
    let mut root = Map::new();
    let lab = |xs: &[LabeledExample]| -> Value {
        Value::Array(
            xs.iter().map(|e| json!([e.text, corpus.label_names[e.label]])).collect(),
        )
    };
    let ood = |xs: &[OodExample]| -> Value {
        Value::Array(xs.iter().map(|e| json!([e.text, "oos"])).collect())
    };
    for (key, value) in [
        ("train", lab(&corpus.train)),
        ("val", lab(&corpus.val)),
        ("test", lab(&corpus.test)),
        ("oos_train", ood(&corpus.oos_train)),
        ("oos_val", ood(&corpus.oos_val)),
        ("oos_test", ood(&corpus.oos_test)),
    ] {
        if !value.as_array().unwrap().is_empty() {
            root.insert(key.to_string(), value);
        }
    }
    let text = serde_json::to_string_pretty(&Value::Object(root))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clinc_style() -> &'static str {
        r#"{
            "train": [["play some jazz", "play_music"], ["what is the weather", "weather"],
                      ["play rock now", "play_music"]],
            "val": [["play a song", "play_music"]],
            "test": [["weather in denver", "weather"]],
            "oos_test": [["fold my laundry", "oos"]]
        }"#
    }

    #[test]
    fn clinc_layout_loads_with_oos_flagged_label_free() {
        let c = load_corpus_str(clinc_style()).unwrap();
        assert_eq!(c.label_names, vec!["play_music", "weather"]);
        assert_eq!(c.train.len(), 3);
        assert_eq!(c.train[0].label, 0);
        assert_eq!(c.train[1].label, 1);
        assert_eq!(c.oos_test.len(), 1);
        assert_eq!(c.oos_test[0].text, "fold my laundry");
    }

    #[test]
    fn empty_train_split_errors() {
        let err = load_corpus_str(r#"{"train": [], "test": [["a b", "x"]]}"#).unwrap_err();
        assert!(err.to_string().contains("empty-split"), "{err}");
    }

    #[test]
    fn missing_train_split_is_fine_for_ood_only_files() {
        let c = load_corpus_str(r#"{"test": [["point me home", "nav"]]}"#).unwrap();
        assert!(c.train.is_empty());
        assert_eq!(c.test.len(), 1);
    }

    #[test]
    fn unknown_split_key_errors() {
        let err = load_corpus_str(r#"{"train": [["a b", "x"]], "dev": []}"#).unwrap_err();
        assert!(err.to_string().contains("dev"), "{err}");
    }

    #[test]
    fn malformed_record_reports_split_and_index() {
        let err =
            load_corpus_str(r#"{"train": [["a b", "x"], ["only text"]]}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train[1]"), "{msg}");
    }

    #[test]
    fn whitespace_only_text_is_malformed() {
        let err = load_corpus_str(r#"{"train": [["   ", "x"]]}"#).unwrap_err();
        assert!(err.to_string().contains("no tokens"), "{err}");
    }

    #[test]
    fn vocab_reserved_ids_and_frequency_cutoff() {
        let c = load_corpus_str(clinc_style()).unwrap();
        let v = build_vocab(&c, 2).unwrap();
        assert_eq!(v.id_of("<pad>"), PAD_ID);
        assert_eq!(v.id_of("<unk>"), UNK_ID);
        assert_eq!(v.id_of("<mask>"), MASK_ID);
        // "play" appears 3x in train, "jazz" once.
        assert!(v.id_of("play") > MASK_ID);
        assert_eq!(v.id_of("jazz"), UNK_ID);
    }

    #[test]
    fn encode_is_lowercase_and_unk_for_oov() {
        let c = load_corpus_str(clinc_style()).unwrap();
        let v = build_vocab(&c, 1).unwrap();
        let ids = encode("Play THE zzzguitar", &v);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], v.id_of("play"));
        assert_eq!(ids[1], v.id_of("the"));
        assert_eq!(ids[2], UNK_ID);
    }

    #[test]
    fn reload_gives_identical_id_assignment() {
        let c1 = load_corpus_str(clinc_style()).unwrap();
        let c2 = load_corpus_str(clinc_style()).unwrap();
        let v1 = build_vocab(&c1, 1).unwrap();
        let v2 = build_vocab(&c2, 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(c1.label_names, c2.label_names);
    }

    #[test]
    fn tokenized_corpus_has_nonempty_tokens_everywhere() {
        let c = load_corpus_str(clinc_style()).unwrap();
        let v = build_vocab(&c, 1).unwrap();
        let t = c.tokenized(&v);
        assert!(t.train.iter().all(|e| !e.tokens.is_empty()));
        assert!(t.oos_test.iter().all(|e| !e.tokens.is_empty()));
    }

    #[test]
    fn save_load_round_trip_preserves_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = load_corpus_str(clinc_style()).unwrap();
        save_corpus(&c, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back.label_names, c.label_names);
        assert_eq!(back.train.len(), c.train.len());
        assert_eq!(back.train[2].text, c.train[2].text);
        assert_eq!(back.oos_test[0].text, c.oos_test[0].text);
    }

    #[test]
    fn min_freq_zero_is_rejected() {
        let c = load_corpus_str(clinc_style()).unwrap();
        assert!(build_vocab(&c, 0).is_err());
    }
}
