//! Detection and classification metrics, plus the exportable histogram and
//! layer-wise payloads. All pure functions over score slices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::threshold_at_tpr;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty {0} score set")]
    Empty(&'static str),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    BadArg(String),
}

/// Probability that a random in-distribution score outranks a random
/// out-of-distribution score; ties count half. Exact, no threshold grid.
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<f64, MetricsError> {
    if ind.is_empty() {
        return Err(MetricsError::Empty("in-distribution"));
    }
    if ood.is_empty() {
        return Err(MetricsError::Empty("out-of-distribution"));
    }
    let mut wins = 0.0;
    for &a in ind {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (ind.len() * ood.len()) as f64)
}

/// Fraction of out-of-distribution scores that still pass the threshold
/// keeping 95% of in-distribution scores.
pub fn fpr_at_tpr95(ind: &[f64], ood: &[f64]) -> Result<f64, MetricsError> {
    if ood.is_empty() {
        return Err(MetricsError::Empty("out-of-distribution"));
    }
    let delta = threshold_at_tpr(ind, 0.95).map_err(|e| MetricsError::BadArg(e.to_string()))?;
    let passing = ood.iter().filter(|&&s| s >= delta).count();
    Ok(passing as f64 / ood.len() as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty("prediction"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Binned score counts for the three populations of the separation plot:
/// correctly classified in-distribution, misclassified in-distribution, and
/// out-of-distribution, with the TPR-95 threshold marked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPayload {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub ind_right: Vec<usize>,
    pub ind_wrong: Vec<usize>,
    pub ood: Vec<usize>,
    pub threshold: f64,
}

impl HistogramPayload {
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# threshold={}\n", self.threshold);
        out.push_str("bin_lo,bin_hi,ind_right,ind_wrong,ood\n");
        for i in 0..self.bins {
            let (lo, hi) = self.bin_edges(i);
            out.push_str(&format!(
                "{lo},{hi},{},{},{}\n",
                self.ind_right[i], self.ind_wrong[i], self.ood[i]
            ));
        }
        out
    }
}

pub fn histogram_payload(
    ind_scores: &[f64],
    ind_correct: &[bool],
    ood_scores: &[f64],
    bins: usize,
) -> Result<HistogramPayload, MetricsError> {
    if bins < 2 {
        return Err(MetricsError::BadArg(format!("bins {bins} must be at least 2")));
    }
    if ind_scores.len() != ind_correct.len() {
        return Err(MetricsError::LengthMismatch(ind_scores.len(), ind_correct.len()));
    }
    if ind_scores.is_empty() {
        return Err(MetricsError::Empty("in-distribution"));
    }
    if ood_scores.is_empty() {
        return Err(MetricsError::Empty("out-of-distribution"));
    }
    let all = ind_scores.iter().chain(ood_scores);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(MetricsError::BadArg("non-finite score".into()));
    }
    let width = (hi - lo) / bins as f64;
    let index = |s: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((s - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut ind_right = vec![0usize; bins];
    let mut ind_wrong = vec![0usize; bins];
    let mut ood = vec![0usize; bins];
    for (&s, &ok) in ind_scores.iter().zip(ind_correct) {
        if ok {
            ind_right[index(s)] += 1;
        } else {
            ind_wrong[index(s)] += 1;
        }
    }
    for &s in ood_scores {
        ood[index(s)] += 1;
    }
    let threshold =
        threshold_at_tpr(ind_scores, 0.95).map_err(|e| MetricsError::BadArg(e.to_string()))?;
    Ok(HistogramPayload { lo, hi, bins, ind_right, ind_wrong, ood, threshold })
}

/// Detection and classification numbers for one scorer mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerMetrics {
    pub scorer: String,
    pub acc: f64,
    pub auroc: f64,
    pub fpr_at_tpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAuroc {
    pub kind: String,
    /// "1".."L" for encoder layers, "z" for the assembled representation.
    pub layer: String,
    pub auroc: f64,
}

/// The full evaluation artifact, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub checkpoint_id: String,
    pub corpus_id: String,
    pub variant: String,
    pub scorers: Vec<ScorerMetrics>,
    pub layerwise_auroc: Vec<LayerAuroc>,
    pub histogram: Option<HistogramPayload>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auroc_frozen_cases() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.3], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(matches!(auroc(&[], &[0.1]), Err(MetricsError::Empty(_))));
        assert!(matches!(auroc(&[0.1], &[]), Err(MetricsError::Empty(_))));
    }

    fn random_scores(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<f64> {
        (0..n)
            .map(|_| {
                if ties {
                    // Coarse grid forces collisions across sets.
                    (rng.gen_range(0..10) as f64) / 10.0
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect()
    }

    /// Trapezoidal area under the empirical ROC curve; independent of the
    /// rank-based implementation.
    fn auroc_trapezoid(ind: &[f64], ood: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = ind.iter().chain(ood).cloned().collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let frac_ge = |set: &[f64], t: f64| {
            set.iter().filter(|&&s| s >= t).count() as f64 / set.len() as f64
        };
        let mut pts = vec![(0.0, 0.0)];
        for t in thresholds {
            pts.push((frac_ge(ood, t), frac_ge(ind, t)));
        }
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
        }
        area
    }

    #[test]
    fn rank_auroc_equals_trapezoid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for case in 0..200 {
            let ties = case % 2 == 0;
            let n = rng.gen_range(1..40);
            let m = rng.gen_range(1..40);
            let ind = random_scores(&mut rng, n, ties);
            let ood = random_scores(&mut rng, m, ties);
            let a = auroc(&ind, &ood).unwrap();
            let b = auroc_trapezoid(&ind, &ood);
            assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn auroc_symmetry_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let ind = random_scores(&mut rng, 15, false);
            let ood = random_scores(&mut rng, 11, false);
            let a = auroc(&ind, &ood).unwrap();
            let rev = auroc(&ood, &ind).unwrap();
            assert!((a + rev - 1.0).abs() < 1e-12);
            let squash = |v: &[f64]| v.iter().map(|s| (3.0 * s).exp()).collect::<Vec<_>>();
            let b = auroc(&squash(&ind), &squash(&ood)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fpr_frozen_cases() {
        let ind: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        assert_eq!(fpr_at_tpr95(&ind, &[0.0, 1.5, 3.0, 10.0]).unwrap(), 0.5);
        assert_eq!(fpr_at_tpr95(&ind, &[0.0, 0.5]).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr95(&ind, &[30.0, 40.0]).unwrap(), 1.0);
        assert!(fpr_at_tpr95(&ind, &[]).is_err());
    }

    #[test]
    fn fpr_never_rises_when_an_ood_score_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let ind = random_scores(&mut rng, 20, false);
            let mut ood = random_scores(&mut rng, 10, false);
            let before = fpr_at_tpr95(&ind, &ood).unwrap();
            let i = rng.gen_range(0..ood.len());
            ood[i] -= rng.gen_range(0.0..1.0);
            let after = fpr_at_tpr95(&ind, &ood).unwrap();
            assert!(after <= before + 1e-15);
        }
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(
            accuracy(&[1], &[1, 2]),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn histogram_masses_and_degenerate_range() {
        let ind = vec![0.1, 0.5, 0.9, 0.7];
        let correct = vec![true, false, true, true];
        let ood = vec![0.0, 0.2];
        let h = histogram_payload(&ind, &correct, &ood, 4).unwrap();
        assert_eq!(h.ind_right.iter().sum::<usize>(), 3);
        assert_eq!(h.ind_wrong.iter().sum::<usize>(), 1);
        assert_eq!(h.ood.iter().sum::<usize>(), 2);
        assert_eq!(h.lo, 0.0);
        assert_eq!(h.hi, 0.9);
        assert_eq!(h.threshold, 0.1);

        // One shared value: everything lands in a single bin.
        let h = histogram_payload(&[0.4, 0.4], &[true, true], &[0.4], 3).unwrap();
        assert_eq!(h.ind_right[0], 2);
        assert_eq!(h.ood[0], 1);
        assert_eq!(h.ind_right[1..].iter().sum::<usize>(), 0);

        assert!(histogram_payload(&ind, &correct, &ood, 1).is_err());
        assert!(histogram_payload(&ind, &correct[..2], &ood, 4).is_err());
    }

    #[test]
    fn histogram_csv_lists_threshold_then_bins() {
        let h = histogram_payload(&[0.0, 1.0], &[true, false], &[0.5], 2).unwrap();
        let csv = h.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# threshold=0");
        assert_eq!(lines.next().unwrap(), "bin_lo,bin_hi,ind_right,ind_wrong,ood");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn report_serializes_deterministically() {
        let report = MetricsReport {
            checkpoint_id: "abc".into(),
            corpus_id: "def".into(),
            variant: "full".into(),
            scorers: vec![ScorerMetrics {
                scorer: "cosine-single".into(),
                acc: 0.5,
                auroc: 0.75,
                fpr_at_tpr95: 0.25,
            }],
            layerwise_auroc: vec![LayerAuroc { kind: "cosine".into(), layer: "z".into(), auroc: 0.9 }],
            histogram: None,
        };
        let a = serde_json::to_string(&report).unwrap();
        let b = serde_json::to_string(&report).unwrap();
        assert_eq!(a, b);
        let back: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back, report);
    }
}
