//! Ranking, calibration, operating-point and first-alert metrics over scored prefixes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrefix {
    pub trajectory_id: String,
    /// 1-based prefix length.
    pub t: usize,
    /// Full trajectory length.
    pub length: usize,
    pub failed: bool,
    pub label: u8,
    pub score: f64,
    #[serde(default)]
    pub abstain: bool,
}

/// Per-trajectory score series with aligned warning labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScores {
    pub trajectory_id: String,
    pub failed: bool,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub abstain: Vec<bool>,
}

impl TrajectoryScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn abstains(&self, i: usize) -> bool {
        self.abstain.get(i).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrefixSet {
    pub records: Vec<ScoredPrefix>,
}

impl ScoredPrefixSet {
    pub fn from_series(series: &[TrajectoryScores]) -> Result<Self> {
        let mut records = Vec::new();
        for s in series {
            if s.scores.len() != s.labels.len() {
                return Err(Error::invalid(format!(
                    "trajectory {}: {} scores vs {} labels",
                    s.trajectory_id,
                    s.scores.len(),
                    s.labels.len()
                )));
            }
            for (i, (&score, &label)) in s.scores.iter().zip(&s.labels).enumerate() {
                records.push(ScoredPrefix {
                    trajectory_id: s.trajectory_id.clone(),
                    t: i + 1,
                    length: s.len(),
                    failed: s.failed,
                    label,
                    score,
                    abstain: s.abstains(i),
                });
            }
        }
        let set = ScoredPrefixSet { records };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !(0.0..=1.0).contains(&r.score) {
                return Err(Error::invalid(format!("score {} outside [0,1] at {}:{}", r.score, r.trajectory_id, r.t)));
            }
            if r.label > 1 {
                return Err(Error::invalid(format!("label {} at {}:{}", r.label, r.trajectory_id, r.t)));
            }
            if !seen.insert((r.trajectory_id.as_str(), r.t)) {
                return Err(Error::invalid(format!("duplicate prefix {}:{}", r.trajectory_id, r.t)));
            }
        }
        Ok(())
    }

    /// Scores and labels of the non-abstained prefixes.
    pub fn ranked(&self) -> (Vec<f64>, Vec<u8>) {
        self.records.iter().filter(|r| !r.abstain).map(|r| (r.score, r.label)).unzip()
    }

    pub fn abstained(&self) -> usize {
        self.records.iter().filter(|r| r.abstain).count()
    }
}

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

fn both_classes(labels: &[u8], metric: &str) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("{metric} needs both classes ({pos} positive, {neg} negative)")));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Step-interpolated average precision; tied scores enter the ranking as one block.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let (pos, _) = both_classes(labels, "average precision")?;
    let order = descending(scores);
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Pairwise ranking statistic with half credit for ties, via midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let (pos, neg) = both_classes(labels, "AUROC")?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j share the midrank
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

pub const ECE_BINS: usize = 15;

/// Bin of `s` among `bins` equal-width right-closed bins on [0,1]; 0 falls in the first bin.
pub fn ece_bin(s: f64, bins: usize) -> usize {
    (1..=bins).find(|&m| s <= m as f64 / bins as f64).map_or(bins - 1, |m| m - 1)
}

/// Expected calibration error with equal-width right-closed bins.
pub fn ece(scores: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    check_pair(scores, labels)?;
    if scores.is_empty() || bins == 0 {
        return Err(Error::UndefinedMetric("ECE of an empty set".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ece_bin(s, bins);
        count[b] += 1;
        conf[b] += s;
        acc[b] += l as f64;
    }
    let n = scores.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (acc[b] / c - conf[b] / c).abs()
        })
        .sum())
}

pub fn brier(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("Brier score of an empty set".into()));
    }
    Ok(scores.iter().zip(labels).map(|(&s, &l)| (s - l as f64).powi(2)).sum::<f64>() / scores.len() as f64)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Counts and ratios at a threshold; `None` marks an undefined ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
}

/// Alerts fire when `score >= threshold`; `f64::INFINITY` never alerts.
pub fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<OperatingPoint> {
    check_pair(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(OperatingPoint {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, scores.len()),
        precision,
        recall,
        f1,
        fpr: ratio(fp, fp + tn),
    })
}

/// Trajectory-level alert statistics at a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstAlertReport {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub horizon: usize,
    pub n_success: usize,
    pub n_failed: usize,
    pub far: Option<f64>,
    pub fail_alert_recall: Option<f64>,
    pub early_fail_recall: Option<f64>,
    pub alert_precision: Option<f64>,
    pub mean_lead_time: Option<f64>,
}

/// 1-based index of the first step with `score >= threshold`.
pub fn first_alert(scores: &[f64], threshold: f64) -> Option<usize> {
    scores.iter().position(|&s| s >= threshold).map(|i| i + 1)
}

pub fn first_alert_diagnostics(series: &[TrajectoryScores], threshold: f64, horizon: usize) -> FirstAlertReport {
    let (mut n_success, mut n_failed, mut false_alarms, mut fail_alerts, mut early, mut lead) = (0, 0, 0, 0, 0, 0.0);
    for s in series {
        let a = first_alert(&s.scores, threshold);
        let t_len = s.len();
        if s.failed {
            n_failed += 1;
            if let Some(a) = a {
                fail_alerts += 1;
                if a + horizon < t_len {
                    early += 1;
                }
                lead += (t_len - a) as f64 / t_len as f64;
            }
        } else {
            n_success += 1;
            if a.is_some() {
                false_alarms += 1;
            }
        }
    }
    FirstAlertReport {
        threshold,
        horizon,
        n_success,
        n_failed,
        far: ratio(false_alarms, n_success),
        fail_alert_recall: ratio(fail_alerts, n_failed),
        early_fail_recall: ratio(early, n_failed),
        alert_precision: ratio(fail_alerts, fail_alerts + false_alarms),
        mean_lead_time: (n_failed > 0).then(|| lead / n_failed as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Precision-recall points (x = recall, y = precision), one per distinct score, descending threshold.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    check_pair(scores, labels)?;
    let (pos, _) = both_classes(labels, "PR curve")?;
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(v, tp, fp)| CurvePoint { threshold: v, x: tp as f64 / pos as f64, y: tp as f64 / (tp + fp) as f64 })
        .collect())
}

/// ROC points (x = FPR, y = TPR) starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    check_pair(scores, labels)?;
    let (pos, neg) = both_classes(labels, "ROC curve")?;
    let mut out = vec![CurvePoint { threshold: f64::INFINITY, x: 0.0, y: 0.0 }];
    out.extend(
        sweep(scores, labels)
            .into_iter()
            .map(|(v, tp, fp)| CurvePoint { threshold: v, x: fp as f64 / neg as f64, y: tp as f64 / pos as f64 }),
    );
    Ok(out)
}

fn sweep(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let order = descending(scores);
    let (mut tp, mut fp) = (0, 0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((v, tp, fp));
    }
    out
}

pub fn curve_csv(points: &[CurvePoint], x_name: &str, y_name: &str) -> String {
    let mut s = format!("threshold,{x_name},{y_name}\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.x, p.y));
    }
    s
}

/// Prefix-level summary at one operating threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub n_abstained: usize,
    pub positive_rate: f64,
    pub ap: f64,
    pub auroc: f64,
    pub ece: f64,
    pub brier: f64,
    pub operating_point: OperatingPoint,
}

pub fn metrics_report(set: &ScoredPrefixSet, threshold: f64) -> Result<MetricsReport> {
    set.validate()?;
    let (scores, labels) = set.ranked();
    let (pos, _) = class_counts(&labels);
    Ok(MetricsReport {
        n: scores.len(),
        n_abstained: set.abstained(),
        positive_rate: pos as f64 / scores.len().max(1) as f64,
        ap: average_precision(&scores, &labels)?,
        auroc: auroc(&scores, &labels)?,
        ece: ece(&scores, &labels, ECE_BINS)?,
        brier: brier(&scores, &labels)?,
        operating_point: confusion_at(&scores, &labels, threshold)?,
    })
}

/// Serializes `+inf` as JSON `null` and back.
pub mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
