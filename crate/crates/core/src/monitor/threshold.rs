use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{threshold_serde, TrajectoryScores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Maximize prefix-level F1.
    F1,
    /// Smallest threshold whose successful-trajectory false-alarm rate stays within `cap`.
    FarCap { cap: f64 },
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdPolicy::F1 => write!(f, "f1"),
            ThresholdPolicy::FarCap { cap } => write!(f, "far_cap({cap})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub policy: ThresholdPolicy,
    /// `+inf` (serialized as null) means the monitor never alerts.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn distinct_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Threshold from calibration series. Alerts fire at `score >= threshold`; candidates are the
/// observed scores and the midpoints between consecutive distinct scores.
pub fn select_threshold(calibration: &[TrajectoryScores], policy: ThresholdPolicy) -> Result<ThresholdChoice> {
    let all: Vec<f64> = calibration.iter().flat_map(|s| s.scores.iter().copied()).collect();
    if all.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration scores".into()));
    }
    let has_fail = calibration.iter().any(|s| s.failed);
    let has_success = calibration.iter().any(|s| !s.failed);
    if !has_fail || !has_success {
        return Err(Error::invalid("threshold selection needs calibration trajectories of both outcomes"));
    }
    let values = distinct_sorted(all);
    match policy {
        ThresholdPolicy::F1 => select_f1(calibration, &values),
        ThresholdPolicy::FarCap { cap } => select_far_cap(calibration, &values, cap),
    }
}

fn select_f1(calibration: &[TrajectoryScores], values: &[f64]) -> Result<ThresholdChoice> {
    let mut pairs: Vec<(f64, u8)> = Vec::new();
    for s in calibration {
        if s.labels.len() != s.scores.len() {
            return Err(Error::invalid(format!("trajectory {}: scores and labels differ in length", s.trajectory_id)));
        }
        pairs.extend(s.scores.iter().copied().zip(s.labels.iter().copied()));
    }
    let pos = pairs.iter().filter(|p| p.1 == 1).count();
    if pos == 0 {
        return Err(Error::invalid("f1 threshold needs at least one positive calibration prefix"));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Sweep distinct scores from high to low; the alert set {s >= v} is also produced by any
    // threshold in (next lower distinct score, v], whose smallest candidate is the midpoint.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (tp + fp + pos) as f64;
        let k = values.partition_point(|&x| x < v);
        let gamma = if k == 0 { v } else { 0.5 * (values[k - 1] + v) };
        if f1 >= best.0 {
            best = (f1, gamma);
        }
    }
    Ok(ThresholdChoice { policy: ThresholdPolicy::F1, threshold: best.1, warning: None })
}

fn select_far_cap(calibration: &[TrajectoryScores], values: &[f64], cap: f64) -> Result<ThresholdChoice> {
    if !(0.0..=1.0).contains(&cap) {
        return Err(Error::invalid(format!("FAR cap {cap} outside [0,1]")));
    }
    let policy = ThresholdPolicy::FarCap { cap };
    let mut maxima: Vec<f64> = calibration
        .iter()
        .filter(|s| !s.failed && !s.scores.is_empty())
        .map(|s| s.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    maxima.sort_by(|a, b| b.total_cmp(a));
    let n_success = calibration.iter().filter(|s| !s.failed).count();
    let allowed = (cap * n_success as f64 + 1e-9).floor() as usize;
    if allowed >= maxima.len() {
        return Ok(ThresholdChoice { policy, threshold: values[0], warning: None });
    }
    // Every success whose max reaches the threshold alerts; push the threshold just above
    // the (allowed+1)-th largest maximum.
    let pivot = maxima[allowed];
    let k = values.partition_point(|&x| x <= pivot);
    if k == values.len() {
        return Ok(ThresholdChoice {
            policy,
            threshold: f64::INFINITY,
            warning: Some(format!(
                "FAR cap {cap} unattainable below the maximum calibration score; monitor will never alert"
            )),
        });
    }
    Ok(ThresholdChoice { policy, threshold: 0.5 * (pivot + values[k]), warning: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{confusion_at, first_alert_diagnostics};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(failed: bool, scores: &[f64], labels: &[u8]) -> TrajectoryScores {
        TrajectoryScores {
            trajectory_id: format!("t{}", scores.len()),
            failed,
            scores: scores.to_vec(),
            labels: labels.to_vec(),
            abstain: vec![],
        }
    }

    #[test]
    fn f1_on_separated_scores_is_perfect() {
        let cal = [series(true, &[0.1, 0.8, 0.9], &[0, 1, 1]), series(false, &[0.2, 0.3], &[0, 0])];
        let c = select_threshold(&cal, ThresholdPolicy::F1).unwrap();
        assert_eq!(c.threshold, 0.55);
        let (s, l): (Vec<f64>, Vec<u8>) =
            cal.iter().flat_map(|t| t.scores.iter().copied().zip(t.labels.iter().copied())).unzip();
        assert_eq!(confusion_at(&s, &l, c.threshold).unwrap().f1, Some(1.0));
    }

    #[test]
    fn far_cap_zero_sits_just_above_success_max() {
        let cal = [
            series(false, &[0.1, 0.3], &[0, 0]),
            series(false, &[0.3, 0.2], &[0, 0]),
            series(true, &[0.2, 0.5, 0.9], &[0, 1, 1]),
        ];
        let c = select_threshold(&cal, ThresholdPolicy::FarCap { cap: 0.0 }).unwrap();
        assert_eq!(c.threshold, 0.4);
        let r = first_alert_diagnostics(&cal, c.threshold, 3);
        assert_eq!(r.far, Some(0.0));
    }

    #[test]
    fn far_cap_unattainable_returns_sentinel() {
        let cal = [series(false, &[0.9], &[0]), series(true, &[0.5], &[1])];
        let c = select_threshold(&cal, ThresholdPolicy::FarCap { cap: 0.0 }).unwrap();
        assert_eq!(c.threshold, f64::INFINITY);
        assert!(c.warning.is_some());
    }

    #[test]
    fn single_outcome_rejected() {
        let cal = [series(false, &[0.9], &[0])];
        assert!(select_threshold(&cal, ThresholdPolicy::F1).is_err());
    }

    proptest! {
        #[test]
        fn far_cap_respected_on_calibration(seed in any::<u64>(), cap in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cal: Vec<TrajectoryScores> = (0..40)
                .map(|i| {
                    let failed = i % 3 == 0;
                    let n = rng.random_range(1..8);
                    let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
                    series(failed, &scores, &vec![u8::from(failed); n])
                })
                .collect();
            let c = select_threshold(&cal, ThresholdPolicy::FarCap { cap }).unwrap();
            let r = first_alert_diagnostics(&cal, c.threshold, 3);
            prop_assert!(r.far.unwrap() <= cap + 1e-12);
        }
    }
}
