use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, DataError, LabeledExample, OodExample};

/// Partitions intent labels into IND and OOD by seeded shuffle, keeping
/// ⌈ratio·K⌉ of K labels in-distribution. The OOD side carries only its test
/// utterances, label-free; any label-free splits of the input are dropped
/// because close-mode OOD is defined by the held-out labels themselves.
pub fn close_split(
    corpus: &Corpus,
    ratio: f64,
    seed: u64,
) -> Result<(Corpus, Corpus), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadArg(format!("ratio {ratio} outside (0,1)")));
    }
    let k = corpus.num_labels();
    let n_ind = (ratio * k as f64).ceil() as usize;
    if k < 2 || n_ind == 0 || n_ind >= k {
        return Err(DataError::DegenerateSplit(format!(
            "{n_ind} IND of {k} labels leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let ind_names: BTreeSet<&str> =
        order[..n_ind].iter().map(|&i| corpus.label_names[i].as_str()).collect();
    let ood_names: BTreeSet<&str> =
        order[n_ind..].iter().map(|&i| corpus.label_names[i].as_str()).collect();

    let ind = filter_relabel(corpus, &ind_names);
    if ind.train.is_empty() {
        return Err(DataError::DegenerateSplit("no training examples on the IND side".into()));
    }
    let ood_test: Vec<OodExample> = corpus
        .test
        .iter()
        .filter(|e| ood_names.contains(corpus.label_names[e.label].as_str()))
        .map(|e| OodExample { text: e.text.clone(), tokens: e.tokens.clone() })
        .collect();
    let ood = Corpus {
        label_names: ood_names.iter().map(|s| s.to_string()).collect(),
        oos_test: ood_test,
        ..Corpus::default()
    };
    Ok((ind, ood))
}

/// Far-OOD pairing: drops the excluded class names from the IND corpus and
/// reduces the OOD corpus to label-free test utterances.
pub fn far_pair(
    ind: &Corpus,
    ood: &Corpus,
    exclusions: &[String],
) -> Result<(Corpus, Vec<OodExample>), DataError> {
    let known: BTreeSet<&str> = ind
        .label_names
        .iter()
        .map(|s| s.as_str())
        .chain(
            ind.train
                .iter()
                .chain(&ind.val)
                .chain(&ind.test)
                .filter_map(|e| e.domain.as_deref()),
        )
        .collect();
    let unknown: Vec<&str> = exclusions
        .iter()
        .map(|s| s.as_str())
        .filter(|name| !known.contains(name))
        .collect();
    if !unknown.is_empty() {
        return Err(DataError::UnknownExclusion(unknown.join(", ")));
    }
    let excluded: BTreeSet<&str> = exclusions.iter().map(|s| s.as_str()).collect();
    let keep: BTreeSet<&str> = ind
        .label_names
        .iter()
        .map(|s| s.as_str())
        .filter(|n| !excluded.contains(n))
        .collect();
    let filtered = filter_relabel(ind, &keep);
    if filtered.train.is_empty() {
        return Err(DataError::EmptySplit("train after exclusions".into()));
    }
    Ok((filtered, ood.ood_eval_texts()))
}

/// One class name per line; `#` starts a comment, blank lines are skipped.
pub fn parse_exclusions(raw: &str) -> Vec<String> {
    raw.lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

fn filter_relabel(corpus: &Corpus, keep: &BTreeSet<&str>) -> Corpus {
    let names: Vec<String> = keep.iter().map(|s| s.to_string()).collect();
    let id_of = |old: usize| {
        names
            .binary_search(&corpus.label_names[old])
            .expect("kept label present in new name list")
    };
    let filter = |xs: &[LabeledExample]| {
        xs.iter()
            .filter(|e| keep.contains(corpus.label_names[e.label].as_str()))
            .map(|e| LabeledExample { label: id_of(e.label), ..e.clone() })
            .collect()
    };
    Corpus {
        label_names: names.clone(),
        train: filter(&corpus.train),
        val: filter(&corpus.val),
        test: filter(&corpus.test),
        oos_train: Vec::new(),
        oos_val: Vec::new(),
        oos_test: Vec::new(),
    }
}
