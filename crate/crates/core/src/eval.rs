//! Open-set evaluation: ROC curves and AUC per test source, cross-run
//! statistics, and per-pair human accuracy.
//!
//! The positive class is "synthetic"; scores are its softmax probability.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Label;

/// Number of TPR grid points used for cross-run FPR bands.
pub const TPR_GRID_POINTS: usize = 1001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub source_tag: String,
    pub scores: Vec<(f64, Label)>,
}

impl ScoreSet {
    pub fn new(source_tag: impl Into<String>, scores: Vec<(f64, Label)>) -> Result<Self> {
        if scores.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::validation("scores must be finite"));
        }
        Ok(ScoreSet {
            source_tag: source_tag.into(),
            scores,
        })
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let pos = self.scores.iter().filter(|(_, l)| *l == Label::Synthetic).count();
        let neg = self.scores.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::UndefinedAuc);
        }
        if self.scores.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::validation("scores must be finite"));
        }
        Ok((pos, neg))
    }

    /// The same scores with labels swapped.
    pub fn flipped(&self) -> ScoreSet {
        ScoreSet {
            source_tag: self.source_tag.clone(),
            scores: self
                .scores
                .iter()
                .map(|&(s, l)| {
                    let l = match l {
                        Label::Real => Label::Synthetic,
                        Label::Synthetic => Label::Real,
                    };
                    (s, l)
                })
                .collect(),
        }
    }
}

/// Mann–Whitney AUC: `P(pos > neg) + ½ P(tie)`, computed from midranks.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (n_pos, n_neg) = set.class_counts()?;
    let mut sorted: Vec<(f64, Label)> = set.scores.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = sorted[i..=j].iter().filter(|(_, l)| *l == Label::Synthetic).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `+∞` for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over the distinct scores, from `+∞` down to the lowest
/// score (which admits everything, the `(1, 1)` corner).
pub fn roc(set: &ScoreSet) -> Result<RocCurve> {
    let (n_pos, n_neg) = set.class_counts()?;
    let mut sorted: Vec<(f64, Label)> = set.scores.clone();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            match sorted[i].1 {
                Label::Synthetic => tp += 1,
                Label::Real => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }
    let auc = trapezoid(&points);
    Ok(RocCurve { points, auc })
}

/// Trapezoidal area under `(fpr, tpr)` points.
pub fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// FPR reached when the curve first attains `tpr`, interpolated linearly
/// along the crossing segment.
pub fn fpr_at_tpr(curve: &RocCurve, tpr: f64) -> f64 {
    let pts = &curve.points;
    if tpr <= pts[0].tpr {
        return pts[0].fpr;
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.tpr >= tpr {
            if b.tpr == a.tpr {
                return a.fpr;
            }
            let t = (tpr - a.tpr) / (b.tpr - a.tpr);
            return a.fpr + t * (b.fpr - a.fpr);
        }
    }
    pts.last().map_or(1.0, |p| p.fpr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub tpr: f64,
    pub mean_fpr: f64,
    pub std_fpr: f64,
}

/// Mean and sample standard deviation of FPR across runs on a fixed grid of
/// `points` TPR values spanning `[0, 1]`.
pub fn roc_band(curves: &[RocCurve], points: usize) -> Result<Vec<BandPoint>> {
    if curves.is_empty() || points < 2 {
        return Err(Error::validation("band needs >= 1 curve and >= 2 grid points"));
    }
    Ok((0..points)
        .map(|i| {
            let tpr = i as f64 / (points - 1) as f64;
            let fprs: Vec<f64> = curves.iter().map(|c| fpr_at_tpr(c, tpr)).collect();
            let (mean_fpr, std_fpr) = mean_std(&fprs);
            BandPoint {
                tpr,
                mean_fpr,
                std_fpr,
            }
        })
        .collect())
}

/// Mean and sample (n − 1) standard deviation; std is 0 for a single value.
/// Values are summed in sorted order so the result ignores input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub source: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub runs: usize,
}

/// Per-source mean ± sample std of AUC across runs, one row per source in
/// name order.
pub fn aggregate_runs(per_source: &BTreeMap<String, Vec<f64>>) -> Result<Vec<AucSummary>> {
    per_source
        .iter()
        .map(|(source, aucs)| {
            if aucs.is_empty() {
                return Err(Error::validation(format!("source {source:?} has no runs")));
            }
            if aucs.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::validation(format!("source {source:?} has an AUC outside [0, 1]")));
            }
            let (mean_auc, std_auc) = mean_std(aucs);
            Ok(AucSummary {
                source: source.clone(),
                mean_auc,
                std_auc,
                runs: aucs.len(),
            })
        })
        .collect()
}

/// Decisions for one image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub family: String,
    /// `true` for a correct answer.
    pub decisions: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairRecordSet {
    pub pairs: Vec<PairRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub pair_id: String,
    pub family: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracyStats {
    pub per_pair: Vec<PairAccuracy>,
    pub bins: usize,
    /// Pair counts per accuracy bin over `[0, 1]`, per family.
    pub histograms: BTreeMap<String, Vec<usize>>,
    pub family_means: BTreeMap<String, f64>,
    pub overall_mean: f64,
}

pub fn pair_accuracy_stats(records: &PairRecordSet, bins: usize) -> Result<PairAccuracyStats> {
    if records.pairs.is_empty() {
        return Err(Error::validation("empty pair record set"));
    }
    if bins == 0 {
        return Err(Error::validation("need at least one histogram bin"));
    }
    let mut seen = BTreeSet::new();
    let mut per_pair = Vec::with_capacity(records.pairs.len());
    for p in &records.pairs {
        if !seen.insert((p.family.as_str(), p.pair_id.as_str())) {
            return Err(Error::validation(format!(
                "duplicate pair {:?} in family {:?}",
                p.pair_id, p.family
            )));
        }
        if p.decisions.is_empty() {
            return Err(Error::validation(format!("pair {:?} has no decisions", p.pair_id)));
        }
        let correct = p.decisions.iter().filter(|&&d| d).count();
        per_pair.push(PairAccuracy {
            pair_id: p.pair_id.clone(),
            family: p.family.clone(),
            accuracy: correct as f64 / p.decisions.len() as f64,
        });
    }
    let mut histograms: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut by_family: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &per_pair {
        let bin = ((p.accuracy * bins as f64).floor() as usize).min(bins - 1);
        histograms.entry(p.family.clone()).or_insert_with(|| vec![0; bins])[bin] += 1;
        by_family.entry(p.family.clone()).or_default().push(p.accuracy);
    }
    let family_means = by_family
        .iter()
        .map(|(f, v)| (f.clone(), mean_std(v).0))
        .collect();
    let all: Vec<f64> = per_pair.iter().map(|p| p.accuracy).collect();
    Ok(PairAccuracyStats {
        per_pair,
        bins,
        histograms,
        family_means,
        overall_mean: mean_std(&all).0,
    })
}

/// `fpr,tpr,threshold` rows.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pos: &[f64], neg: &[f64]) -> ScoreSet {
        let scores = pos
            .iter()
            .map(|&s| (s, Label::Synthetic))
            .chain(neg.iter().map(|&s| (s, Label::Real)))
            .collect();
        ScoreSet::new("t", scores).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.5, 0.5], &[0.5])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.9, 0.4], &[0.5, 0.1])).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&set(&[0.1, 0.2], &[])), Err(Error::UndefinedAuc)));
        assert!(matches!(roc(&set(&[], &[0.3])), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn roc_examples() {
        let c = roc(&set(&[0.9], &[0.1])).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);

        let c = roc(&set(&[0.3, 0.3], &[0.3])).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(c.auc, 0.5);
    }

    #[test]
    fn flipping_labels_complements_auc() {
        let s = set(&[0.9, 0.4, 0.35], &[0.5, 0.1, 0.35]);
        let a = auc(&s).unwrap();
        assert!((auc(&s.flipped()).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![0.6, 0.8]);
        m.insert("b".to_string(), vec![0.7]);
        let rows = aggregate_runs(&m).unwrap();
        assert!((rows[0].mean_auc - 0.7).abs() < 1e-12);
        assert!((rows[0].std_auc - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert_eq!(rows[1].std_auc, 0.0);

        let mut shuffled = BTreeMap::new();
        shuffled.insert("a".to_string(), vec![0.8, 0.6]);
        shuffled.insert("b".to_string(), vec![0.7]);
        assert_eq!(aggregate_runs(&shuffled).unwrap(), rows);
    }

    #[test]
    fn band_for_identical_curves_has_zero_spread() {
        let c = roc(&set(&[0.9, 0.6, 0.3], &[0.5, 0.2])).unwrap();
        let band = roc_band(&[c.clone(), c.clone()], TPR_GRID_POINTS).unwrap();
        assert_eq!(band.len(), TPR_GRID_POINTS);
        assert!(band.iter().all(|b| b.std_fpr == 0.0));
        assert_eq!(band[0].mean_fpr, 0.0);
        assert_eq!(band.last().unwrap().tpr, 1.0);
    }

    #[test]
    fn pair_stats_counting() {
        let recs = PairRecordSet {
            pairs: vec![
                PairRecord {
                    pair_id: "p1".into(),
                    family: "f".into(),
                    decisions: vec![true, false],
                },
                PairRecord {
                    pair_id: "p2".into(),
                    family: "f".into(),
                    decisions: vec![false, true],
                },
            ],
        };
        let stats = pair_accuracy_stats(&recs, 10).unwrap();
        assert_eq!(stats.overall_mean, 0.5);
        assert_eq!(stats.histograms["f"][5], 2);
    }

    #[test]
    fn pair_stats_all_correct_in_top_bin() {
        let recs = PairRecordSet {
            pairs: (0..3)
                .map(|i| PairRecord {
                    pair_id: format!("p{i}"),
                    family: "g".into(),
                    decisions: vec![true; 4],
                })
                .collect(),
        };
        let stats = pair_accuracy_stats(&recs, 10).unwrap();
        assert_eq!(stats.family_means["g"], 1.0);
        assert_eq!(stats.histograms["g"][9], 3);
    }

    #[test]
    fn pair_stats_rejects_bad_input() {
        assert!(pair_accuracy_stats(&PairRecordSet::default(), 10).is_err());
        let dup = PairRecordSet {
            pairs: vec![
                PairRecord {
                    pair_id: "p".into(),
                    family: "f".into(),
                    decisions: vec![true],
                };
                2
            ],
        };
        assert!(pair_accuracy_stats(&dup, 10).is_err());
    }
}
