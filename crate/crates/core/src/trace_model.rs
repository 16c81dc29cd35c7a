//! Trajectories, prefix warning labels, dataset splits and the synthetic
//! precursor corpus.
//!
//! A trajectory succeeds when `outcome == Outcome::Success` (encoded `1` on
//! disk). The warning label of prefix `t` (1-based) is positive iff the
//! trajectory failed and at most `H` steps remain, i.e. `t >= T - H`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Terminal verifier outcome. Serialized as `1` (success) / `0` (failure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Outcome {
    Failure,
    Success,
}

impl Outcome {
    pub fn failed(self) -> bool {
        self == Outcome::Failure
    }
}

impl TryFrom<u8> for Outcome {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Outcome::Failure),
            1 => Ok(Outcome::Success),
            other => Err(format!("outcome must be 0 or 1, got {other}")),
        }
    }
}

impl From<Outcome> for u8 {
    fn from(o: Outcome) -> u8 {
        match o {
            Outcome::Failure => 0,
            Outcome::Success => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub trajectory_id: String,
    pub task_id: String,
    pub outcome: Outcome,
    /// Opaque raw step documents, in execution order.
    pub steps: Vec<Value>,
}

impl RawTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixLabelSet {
    pub trajectory_id: String,
    pub horizon: usize,
    /// `labels[t - 1]` is the warning label of prefix `t`.
    pub labels: Vec<u8>,
}

impl PrefixLabelSet {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Warning labels for a trajectory of `len` steps.
pub fn warning_labels(len: usize, failed: bool, horizon: usize) -> Vec<u8> {
    (1..=len)
        .map(|t| u8::from(failed && t + horizon >= len))
        .collect()
}

pub fn label_prefixes(trajectory: &RawTrajectory, horizon: usize) -> Result<PrefixLabelSet> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if trajectory.is_empty() {
        return Err(Error::invalid(format!(
            "trajectory {} has no steps",
            trajectory.trajectory_id
        )));
    }
    Ok(PrefixLabelSet {
        trajectory_id: trajectory.trajectory_id.clone(),
        horizon,
        labels: warning_labels(trajectory.len(), trajectory.outcome.failed(), horizon),
    })
}

/// Fraction of positive prefixes over all prefixes; the AUPRC of a random scorer.
pub fn positive_prefix_rate(labelsets: &[PrefixLabelSet]) -> Result<f64> {
    let total: usize = labelsets.iter().map(|l| l.labels.len()).sum();
    if total == 0 {
        return Err(Error::invalid("no prefixes to compute a positive rate over"));
    }
    let positives: usize = labelsets.iter().map(PrefixLabelSet::positives).sum();
    Ok(positives as f64 / total as f64)
}

/// Permutes label sequences across trajectories, aligned by step index.
///
/// Trajectory `i` receives the labels of another trajectory, truncated or
/// zero-padded to its own length. This destroys any link between content and
/// label while keeping the positional label geometry, and is used as a null
/// control for monitor training.
pub fn shuffle_label_sets(labelsets: &[PrefixLabelSet], seed: u64) -> Vec<PrefixLabelSet> {
    let mut order: Vec<usize> = (0..labelsets.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labelsets
        .iter()
        .zip(order)
        .map(|(target, donor)| {
            let donor = &labelsets[donor].labels;
            let labels = (0..target.labels.len())
                .map(|i| donor.get(i).copied().unwrap_or(0))
                .collect();
            PrefixLabelSet {
                trajectory_id: target.trajectory_id.clone(),
                horizon: target.horizon,
                labels,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Calibration,
    Validation,
    Test,
}

impl std::str::FromStr for SplitRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitRole::Train),
            "calibration" | "cal" => Ok(SplitRole::Calibration),
            "validation" | "val" => Ok(SplitRole::Validation),
            "test" => Ok(SplitRole::Test),
            other => Err(Error::invalid(format!("unknown split role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub calibration_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn ids(&self, role: SplitRole) -> &[String] {
        match role {
            SplitRole::Train => &self.train_ids,
            SplitRole::Calibration => &self.calibration_ids,
            SplitRole::Validation => &self.validation_ids,
            SplitRole::Test => &self.test_ids,
        }
    }

    pub fn role_of(&self, id: &str) -> Option<SplitRole> {
        [
            SplitRole::Train,
            SplitRole::Calibration,
            SplitRole::Validation,
            SplitRole::Test,
        ]
        .into_iter()
        .find(|&role| self.ids(role).iter().any(|x| x == id))
    }

    /// Checks pairwise disjointness of the four id sets.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for role in [
            SplitRole::Train,
            SplitRole::Calibration,
            SplitRole::Validation,
            SplitRole::Test,
        ] {
            for id in self.ids(role) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::invalid(format!("id {id} appears in more than one split")));
                }
            }
        }
        Ok(())
    }

    /// Trajectories of `corpus` belonging to `role`, in corpus order.
    pub fn select<'a>(&self, corpus: &'a [RawTrajectory], role: SplitRole) -> Vec<&'a RawTrajectory> {
        let ids: HashSet<&str> = self.ids(role).iter().map(String::as_str).collect();
        corpus
            .iter()
            .filter(|t| ids.contains(t.trajectory_id.as_str()))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SplitSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    /// Fraction of the training pool carved out as calibration.
    pub calibration: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
            calibration: 0.1,
        }
    }
}

/// Stratified, seeded split. Calibration ids are carved from the training pool
/// and removed from `train_ids`.
pub fn make_splits(corpus: &[RawTrajectory], ratios: SplitRatios, seed: u64) -> Result<SplitSpec> {
    let sum = ratios.train + ratios.validation + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.validation, ratios.test].iter().any(|&r| r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be nonnegative and sum to 1, got {sum}")));
    }
    if !(ratios.calibration > 0.0 && ratios.calibration < 1.0) {
        return Err(Error::invalid("calibration fraction must lie in (0, 1)"));
    }
    let n = corpus.len();
    if n < 10 {
        return Err(Error::invalid(format!("corpus of {n} trajectories is too small to split (need >= 10)")));
    }
    let mut seen = HashSet::new();
    for t in corpus {
        if !seen.insert(t.trajectory_id.as_str()) {
            return Err(Error::invalid(format!("duplicate trajectory id {}", t.trajectory_id)));
        }
    }

    // Sort ids first so the result does not depend on corpus order.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for t in corpus {
        by_class[usize::from(u8::from(t.outcome))].push(&t.trajectory_id);
    }
    for class in &mut by_class {
        class.sort_unstable();
        class.shuffle(&mut rng);
    }
    let ordered = stratified_interleave(&by_class);

    let n_test = ((ratios.test * n as f64).round() as usize).max(usize::from(ratios.test > 0.0));
    let n_val = ((ratios.validation * n as f64).round() as usize).max(usize::from(ratios.validation > 0.0));
    if n_test + n_val + 2 > n {
        return Err(Error::invalid("ratios leave no room for training and calibration"));
    }
    let pool = &ordered[n_test + n_val..];
    let n_cal = ((ratios.calibration * pool.len() as f64).round() as usize).clamp(1, pool.len() - 1);

    let collect = |ids: &[&str]| {
        let mut v: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    Ok(SplitSpec {
        test_ids: collect(&ordered[..n_test]),
        validation_ids: collect(&ordered[n_test..n_test + n_val]),
        calibration_ids: collect(&pool[..n_cal]),
        train_ids: collect(&pool[n_cal..]),
        seed,
    })
}

/// Merges per-class lists so every contiguous block keeps roughly the class
/// proportions of the whole.
fn stratified_interleave<'a>(classes: &[Vec<&'a str>]) -> Vec<&'a str> {
    let mut keyed: Vec<(f64, usize, &str)> = Vec::new();
    for (c, ids) in classes.iter().enumerate() {
        let len = ids.len() as f64;
        for (i, id) in ids.iter().enumerate() {
            keyed.push(((i as f64 + 0.5) / len, c, id));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, id)| id).collect()
}

/// Returns a copy of the first `t` steps of `trajectory` in a seeded random order.
pub fn scramble_prefix(trajectory: &RawTrajectory, t: usize, seed: u64) -> Result<RawTrajectory> {
    if t == 0 || t > trajectory.len() {
        return Err(Error::invalid(format!(
            "prefix length {t} outside 1..={} for trajectory {}",
            trajectory.len(),
            trajectory.trajectory_id
        )));
    }
    let mut steps = trajectory.steps[..t].to_vec();
    steps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(RawTrajectory {
        trajectory_id: trajectory.trajectory_id.clone(),
        task_id: trajectory.task_id.clone(),
        outcome: trajectory.outcome,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub trajectory_count: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Mean of the (shifted, geometric) length distribution.
    pub mean_length: f64,
    pub failure_rate: f64,
    /// Per-step probability that a step inside the injection window of a
    /// failed trajectory carries a precursor.
    pub precursor_probability: f64,
    /// Number of trailing steps of a failed trajectory eligible for precursors.
    pub precursor_window: usize,
    pub precursor_tokens: Vec<String>,
    pub noise_vocabulary: Vec<String>,
    pub tools: Vec<String>,
    pub task_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        SynthConfig {
            trajectory_count: 2000,
            min_length: 4,
            max_length: 60,
            mean_length: 16.0,
            failure_rate: 0.3,
            precursor_probability: 0.9,
            precursor_window: 4,
            precursor_tokens: words("permission_denied timeout_exceeded traceback_raised quota_exhausted"),
            noise_vocabulary: words(
                "page item cart order price search result list filter button link form \
                 field value table row column header menu account profile review rating \
                 product category checkout address shipping payment summary detail image \
                 title section panel query record report file folder branch commit config \
                 module package version request response content message update status_bar",
            ),
            tools: words("search click type_text open_page read_file run_command scroll submit"),
            task_count: 24,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trajectory_count == 0 {
            return bad("trajectory_count must be positive".into());
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return bad(format!("invalid length range {}..={}", self.min_length, self.max_length));
        }
        if !(self.mean_length >= self.min_length as f64) {
            return bad("mean_length must be at least min_length".into());
        }
        if !(self.failure_rate > 0.0 && self.failure_rate < 1.0) {
            return bad(format!("failure_rate {} outside (0, 1)", self.failure_rate));
        }
        if !(0.0..=1.0).contains(&self.precursor_probability) {
            return bad("precursor_probability outside [0, 1]".into());
        }
        if self.precursor_window == 0 || self.precursor_window > self.min_length {
            return bad(format!(
                "precursor_window {} must be in 1..=min_length ({})",
                self.precursor_window, self.min_length
            ));
        }
        if self.precursor_tokens.is_empty() || self.noise_vocabulary.is_empty() || self.tools.is_empty() {
            return bad("precursor, noise and tool vocabularies must be nonempty".into());
        }
        if self.task_count == 0 {
            return bad("task_count must be positive".into());
        }
        Ok(())
    }
}

/// Generates a corpus where failures are announced by lexical precursors
/// (error status plus a precursor token) inside the trailing window.
///
/// Lengths follow a geometric law shifted by `min_length` (resampled above
/// `max_length`), so step position alone carries almost no warning signal.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<Vec<RawTrajectory>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let extra_mean = config.mean_length - config.min_length as f64;
    let continue_p = extra_mean / (1.0 + extra_mean);
    let width = config.trajectory_count.to_string().len().max(4);

    let mut corpus = Vec::with_capacity(config.trajectory_count);
    for i in 0..config.trajectory_count {
        let failed = rng.random_bool(config.failure_rate);
        let len = loop {
            let mut len = config.min_length;
            while rng.random_bool(continue_p) {
                len += 1;
                if len > config.max_length {
                    break;
                }
            }
            if len <= config.max_length {
                break len;
            }
        };
        let task = rng.random_range(0..config.task_count);
        let site = ["shop", "forum", "repo", "admin"][task % 4];
        let window_start = len - config.precursor_window;
        let steps = (0..len)
            .map(|s| {
                let precursor =
                    failed && s >= window_start && rng.random_bool(config.precursor_probability);
                synth_step(config, &mut rng, task, site, s, precursor)
            })
            .collect();
        corpus.push(RawTrajectory {
            trajectory_id: format!("traj_{i:0width$}"),
            task_id: format!("task_{task:02}"),
            outcome: if failed { Outcome::Failure } else { Outcome::Success },
            steps,
        });
    }
    Ok(corpus)
}

fn synth_step(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    task: usize,
    site: &str,
    index: usize,
    precursor: bool,
) -> Value {
    let mut words = |n: usize| -> String {
        (0..n)
            .map(|_| config.noise_vocabulary[rng.random_range(0..config.noise_vocabulary.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let observation = format!("{}\n{}", words(3), words(3));
    let query = words(2);
    let mut result = words(4);
    let tool = config.tools[rng.random_range(0..config.tools.len())].clone();
    let status = if precursor {
        let token = &config.precursor_tokens[rng.random_range(0..config.precursor_tokens.len())];
        result = format!("{token} {result}");
        "error"
    } else {
        "ok"
    };
    json!({
        "step": index,
        "role": "assistant",
        "meta": { "task": format!("task_{task:02}"), "site": site },
        "observation": observation,
        "action": format!("{tool}({query})"),
        "tool": tool,
        "args": { "query": query },
        "result": result,
        "status": status,
    })
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawTrajectory>> {
    read_jsonl(path)
}

pub fn write_corpus(path: &Path, corpus: &[RawTrajectory]) -> Result<()> {
    write_jsonl(path, corpus)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: &str, len: usize, outcome: Outcome) -> RawTrajectory {
        RawTrajectory {
            trajectory_id: id.to_string(),
            task_id: "t".into(),
            outcome,
            steps: (0..len).map(|i| json!({ "i": i })).collect(),
        }
    }

    fn positions(l: &PrefixLabelSet) -> Vec<usize> {
        l.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i + 1)
            .collect()
    }

    #[test]
    fn label_examples() {
        let l = label_prefixes(&traj("a", 10, Outcome::Failure), 3).unwrap();
        assert_eq!(positions(&l), vec![7, 8, 9, 10]);
        let l = label_prefixes(&traj("a", 10, Outcome::Success), 3).unwrap();
        assert_eq!(l.labels, vec![0; 10]);
        let l = label_prefixes(&traj("a", 2, Outcome::Failure), 3).unwrap();
        assert_eq!(positions(&l), vec![1, 2]);
    }

    #[test]
    fn label_rejects_empty_and_zero_horizon() {
        assert!(label_prefixes(&traj("a", 0, Outcome::Failure), 3).is_err());
        assert!(label_prefixes(&traj("a", 3, Outcome::Failure), 0).is_err());
    }

    #[test]
    fn positive_rate_examples() {
        let f = label_prefixes(&traj("a", 4, Outcome::Failure), 3).unwrap();
        assert_eq!(positive_prefix_rate(&[f]).unwrap(), 1.0);
        let s = label_prefixes(&traj("b", 4, Outcome::Success), 3).unwrap();
        assert_eq!(positive_prefix_rate(&[s]).unwrap(), 0.0);
        assert!(positive_prefix_rate(&[]).is_err());
    }

    fn corpus(n: usize) -> Vec<RawTrajectory> {
        (0..n)
            .map(|i| traj(&format!("id{i:03}"), 5, if i % 3 == 0 { Outcome::Failure } else { Outcome::Success }))
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = corpus(100);
        let s = make_splits(&c, SplitRatios::default(), 7).unwrap();
        assert_eq!(
            (s.train_ids.len(), s.calibration_ids.len(), s.validation_ids.len(), s.test_ids.len()),
            (72, 8, 10, 10)
        );
        s.validate().unwrap();
        assert_eq!(s, make_splits(&c, SplitRatios::default(), 7).unwrap());

        let other = make_splits(&c, SplitRatios::default(), 8).unwrap();
        assert_ne!(s.test_ids, other.test_ids);
        assert_eq!(other.test_ids.len(), 10);
    }

    #[test]
    fn split_keeps_both_classes_everywhere() {
        let c = corpus(40);
        let s = make_splits(&c, SplitRatios::default(), 1).unwrap();
        for role in [SplitRole::Train, SplitRole::Validation, SplitRole::Test] {
            let sel = s.select(&c, role);
            assert!(sel.iter().any(|t| t.outcome.failed()), "{role:?}");
            assert!(sel.iter().any(|t| !t.outcome.failed()), "{role:?}");
        }
    }

    #[test]
    fn split_rejects_small_corpus_and_bad_ratios() {
        assert!(make_splits(&corpus(9), SplitRatios::default(), 0).is_err());
        let bad = SplitRatios { train: 0.5, ..SplitRatios::default() };
        assert!(make_splits(&corpus(50), bad, 0).is_err());
    }

    #[test]
    fn synth_failure_fraction() {
        let cfg = SynthConfig { trajectory_count: 1000, seed: 3, ..SynthConfig::default() };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let failed = c.iter().filter(|t| t.outcome.failed()).count() as f64 / 1000.0;
        assert!((failed - 0.3).abs() <= 0.05, "failure fraction {failed}");
        assert_eq!(c, generate_synthetic_corpus(&cfg).unwrap());
    }

    #[test]
    fn synth_precursor_placement() {
        let cfg = SynthConfig {
            trajectory_count: 300,
            precursor_probability: 1.0,
            seed: 5,
            ..SynthConfig::default()
        };
        for t in generate_synthetic_corpus(&cfg).unwrap() {
            let n = t.len();
            assert!((cfg.min_length..=cfg.max_length).contains(&n));
            for (i, step) in t.steps.iter().enumerate() {
                let is_err = step["status"] == "error";
                let in_window = i >= n - cfg.precursor_window;
                assert_eq!(is_err, t.outcome.failed() && in_window, "{} step {i}", t.trajectory_id);
            }
        }
    }

    #[test]
    fn synth_config_validation() {
        let cfg = SynthConfig { precursor_window: 9, min_length: 4, ..SynthConfig::default() };
        assert!(generate_synthetic_corpus(&cfg).is_err());
        let cfg = SynthConfig { failure_rate: 1.0, ..SynthConfig::default() };
        assert!(generate_synthetic_corpus(&cfg).is_err());
    }

    #[test]
    fn scramble_examples() {
        let t = traj("x", 6, Outcome::Failure);
        assert_eq!(scramble_prefix(&t, 1, 9).unwrap().steps, t.steps[..1]);
        assert_eq!(scramble_prefix(&t, 3, 9).unwrap(), scramble_prefix(&t, 3, 9).unwrap());
        assert!(scramble_prefix(&t, 0, 9).is_err());
        assert!(scramble_prefix(&t, 7, 9).is_err());
    }

    #[test]
    fn shuffled_labels_keep_lengths() {
        let sets: Vec<_> = corpus(30).iter().map(|t| label_prefixes(t, 3).unwrap()).collect();
        let shuffled = shuffle_label_sets(&sets, 4);
        for (a, b) in sets.iter().zip(&shuffled) {
            assert_eq!(a.labels.len(), b.labels.len());
            assert_eq!(a.trajectory_id, b.trajectory_id);
        }
    }

    #[test]
    fn outcome_serde() {
        let t = traj("x", 1, Outcome::Success);
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"outcome\":1"));
        assert!(serde_json::from_str::<RawTrajectory>(&s.replace("\"outcome\":1", "\"outcome\":2")).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn positive_count_formula(len in 1usize..40, horizon in 1usize..8, failed in any::<bool>()) {
                let labels = warning_labels(len, failed, horizon);
                let expected = if failed { (horizon + 1).min(len) } else { 0 };
                prop_assert_eq!(labels.iter().filter(|&&l| l == 1).count(), expected);
            }

            #[test]
            fn rate_invariant_under_reordering(lens in prop::collection::vec((1usize..15, any::<bool>()), 1..20), seed in any::<u64>()) {
                let sets: Vec<_> = lens.iter().enumerate().map(|(i, &(len, failed))| PrefixLabelSet {
                    trajectory_id: i.to_string(), horizon: 3, labels: warning_labels(len, failed, 3),
                }).collect();
                let mut shuffled = sets.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(positive_prefix_rate(&sets).unwrap(), positive_prefix_rate(&shuffled).unwrap());
            }

            #[test]
            fn scramble_never_leaks(len in 1usize..20, seed in any::<u64>(), frac in 0.0f64..1.0) {
                let t = traj("p", len, Outcome::Failure);
                let k = 1 + ((len - 1) as f64 * frac) as usize;
                let s = scramble_prefix(&t, k, seed).unwrap();
                let mut got: Vec<String> = s.steps.iter().map(|v| v.to_string()).collect();
                let mut want: Vec<String> = t.steps[..k].iter().map(|v| v.to_string()).collect();
                got.sort();
                want.sort();
                prop_assert_eq!(got, want);
            }

            #[test]
            fn splits_partition(n in 10usize..80, seed in any::<u64>()) {
                let c = corpus(n);
                let s = make_splits(&c, SplitRatios::default(), seed).unwrap();
                s.validate().unwrap();
                let total = s.train_ids.len() + s.calibration_ids.len() + s.validation_ids.len() + s.test_ids.len();
                prop_assert_eq!(total, n);
            }
        }
    }
}
