//! Ranking metrics, threshold calibration and false-positive tables.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Label, Result};

pub const DEFAULT_PERCENTILE: f64 = 95.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Accel,
    Audio,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Accel => "accel",
            Modality::Audio => "audio",
        })
    }
}

/// How raw reconstruction errors map to detector scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// The positive class is the one the model was trained on, so it
    /// reconstructs with low error: score = -error.
    #[default]
    LowerErrorPositive,
    /// score = error.
    HigherErrorPositive,
}

impl Orientation {
    pub fn apply(self, error: f64) -> f64 {
        match self {
            Orientation::LowerErrorPositive => -error,
            Orientation::HigherErrorPositive => error,
        }
    }
}

/// Per-sample reconstruction errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score_acc: Option<f64>,
    pub score_aud: Option<f64>,
    pub label: Label,
    pub category: String,
}

impl ScoreRecord {
    pub fn error(&self, m: Modality) -> Option<f64> {
        match m {
            Modality::Accel => self.score_acc,
            Modality::Audio => self.score_aud,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn modalities(&self) -> Vec<Modality> {
        [Modality::Accel, Modality::Audio]
            .into_iter()
            .filter(|&m| self.records.iter().all(|r| r.error(m).is_some()) && !self.records.is_empty())
            .collect()
    }

    /// Oriented scores and positive-class flags for one modality.
    pub fn oriented(&self, m: Modality, orientation: Orientation, positive: Label) -> Result<(Vec<f64>, Vec<bool>)> {
        let mut scores = Vec::with_capacity(self.records.len());
        let mut labels = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let e = r
                .error(m)
                .ok_or_else(|| Error::invalid(format!("sample {} has no {m} score", r.id)))?;
            scores.push(orientation.apply(e));
            labels.push(r.label == positive);
        }
        Ok((scores, labels))
    }
}

fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative samples".into()));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC with midranks for ties: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let pairs = (pos * neg) as f64;
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    // Dividing the smaller of U and its complement keeps auc(s) + auc(-s)
    // exactly 1.
    let complement = pairs - u;
    Ok(if u <= complement { u / pairs } else { 1.0 - complement / pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Decision thresholds (`score >= t` is positive); the first is `+inf`.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal area under a polyline.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}

/// One operating point per distinct score, from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        tpr.push(tp as f64 / pos as f64);
        fpr.push(fp as f64 / neg as f64);
    }
    let auc = auc(scores, labels)?;
    Ok(RocCurve {
        thresholds,
        tpr,
        fpr,
        auc,
    })
}

/// Linear-interpolation percentile (the "linear" method: rank
/// `p/100 * (n-1)` between order statistics).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Threshold at `percentile` of calibration (background) scores.
pub fn calibrate_threshold(background_scores: &[f64], percentile_value: f64) -> Result<f64> {
    percentile(background_scores, percentile_value)
}

pub fn max_strategy(auc_acc: f64, auc_aud: f64) -> f64 {
    auc_acc.max(auc_aud)
}

/// False positives per background category: background samples whose
/// oriented score exceeds `threshold`. Every background category present
/// gets a row; rows are sorted by count (descending), then name.
pub fn fp_report(
    set: &ScoreSet,
    modality: Modality,
    orientation: Orientation,
    threshold: f64,
) -> Result<Vec<(String, usize)>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in set.records.iter().filter(|r| !r.label.is_damage()) {
        let e = r
            .error(modality)
            .ok_or_else(|| Error::invalid(format!("sample {} has no {modality} score", r.id)))?;
        let c = counts.entry(r.category.as_str()).or_default();
        if orientation.apply(e) > threshold {
            *c += 1;
        }
    }
    let mut rows: Vec<(String, usize)> = counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[1.0, 2.0], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn roc_passes_through_corner() {
        let c = roc_curve(&[1.0, 0.0], &[true, false]).unwrap();
        assert!(c.fpr.iter().zip(&c.tpr).any(|(&f, &t)| f == 0.0 && t == 1.0));
        assert_eq!((c.fpr[0], c.tpr[0]), (0.0, 0.0));
        assert_eq!((*c.fpr.last().unwrap(), *c.tpr.last().unwrap()), (1.0, 1.0));
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 95.0).unwrap() - 95.05).abs() < 1e-12);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 100.0).unwrap(), 3.0);
        assert_eq!(calibrate_threshold(&[4.2; 7], 95.0).unwrap(), 4.2);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn max_strategy_examples() {
        assert_eq!(max_strategy(0.67, 0.92), 0.92);
        assert_eq!(max_strategy(0.80, 0.80), 0.80);
        assert_eq!(max_strategy(0.46, 0.74), 0.74);
    }

    fn bg(id: usize, cat: &str, err: f64) -> ScoreRecord {
        ScoreRecord {
            id: id.to_string(),
            score_acc: Some(err),
            score_aud: None,
            label: Label::Background,
            category: cat.into(),
        }
    }

    #[test]
    fn fp_table_counts_exceedances() {
        // Higher-is-positive orientation so raw errors act as scores.
        let mut records: Vec<ScoreRecord> = (0..10).map(|i| bg(i, "Door Close", i as f64)).collect();
        records.push(bg(10, "Pothole", 0.5));
        let set = ScoreSet { records };
        let rows = fp_report(&set, Modality::Accel, Orientation::HigherErrorPositive, 6.5).unwrap();
        assert_eq!(rows, vec![("Door Close".to_string(), 3), ("Pothole".to_string(), 0)]);
        let none = fp_report(&set, Modality::Accel, Orientation::HigherErrorPositive, 100.0).unwrap();
        assert!(none.iter().all(|(_, c)| *c == 0));
        let all = fp_report(&set, Modality::Accel, Orientation::HigherErrorPositive, -1.0).unwrap();
        assert_eq!(all, vec![("Door Close".to_string(), 10), ("Pothole".to_string(), 1)]);
        assert!(fp_report(&set, Modality::Audio, Orientation::HigherErrorPositive, 0.0).is_err());
    }
}
