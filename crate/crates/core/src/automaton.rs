//! Passive DFA extraction over hard symbol sequences (RPNI with red-blue merging), per-state
//! risk calibration with trust filtering, abstaining scoring, audits, and per-route automata.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TrajectoryScores;
use crate::trace_model::warning_labels;

pub const DEFAULT_MIN_COUNT: usize = 10;

/// A symbol sequence labeled for induction (`positive` = failure).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub symbols: Vec<usize>,
    pub positive: bool,
}

/// Hard symbols of one trajectory with its outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTrajectory {
    pub trajectory_id: String,
    pub failed: bool,
    pub symbols: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
}

impl SymbolTrajectory {
    pub fn labels(&self, horizon: usize) -> Vec<u8> {
        warning_labels(self.symbols.len(), self.failed, horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// One string per trajectory, labeled by outcome.
    #[default]
    FullTrajectory,
    /// One string per prefix, labeled by its warning label.
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRisk {
    #[default]
    GlobalPrevalence,
    Zero,
}

/// Builds induction strings from trajectories.
pub fn induction_sample(trajectories: &[SymbolTrajectory], mode: SampleMode, horizon: usize) -> Vec<LabeledSequence> {
    let mut out = Vec::new();
    for t in trajectories {
        match mode {
            SampleMode::FullTrajectory => {
                out.push(LabeledSequence { symbols: t.symbols.clone(), positive: t.failed });
            }
            SampleMode::Prefix => {
                for (i, l) in t.labels(horizon).into_iter().enumerate() {
                    out.push(LabeledSequence { symbols: t.symbols[..=i].to_vec(), positive: l == 1 });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguityFilterReport {
    pub input: usize,
    pub retained: usize,
    /// Distinct sequences that appeared with both labels.
    pub conflicting_sequences: usize,
    pub removed: usize,
}

/// Drops every copy of a sequence that occurs with both labels.
pub fn ambiguity_filter(sample: &[LabeledSequence]) -> (Vec<LabeledSequence>, AmbiguityFilterReport) {
    let mut seen: HashMap<&[usize], (bool, bool)> = HashMap::new();
    for s in sample {
        let e = seen.entry(&s.symbols).or_default();
        if s.positive {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    let conflicting: BTreeSet<&[usize]> = seen.iter().filter(|(_, &(p, n))| p && n).map(|(k, _)| *k).collect();
    let retained: Vec<LabeledSequence> =
        sample.iter().filter(|s| !conflicting.contains(s.symbols.as_slice())).cloned().collect();
    let report = AmbiguityFilterReport {
        input: sample.len(),
        retained: retained.len(),
        conflicting_sequences: conflicting.len(),
        removed: sample.len() - retained.len(),
    };
    (retained, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfaState {
    /// Label inherited from the induction sample, if any string ended here.
    pub label: Option<StateLabel>,
    pub risk: f64,
    pub count: usize,
    pub positives: usize,
    pub trusted: bool,
}

/// Complete DFA: every (state, symbol) pair has a target; unseen transitions lead to `sink`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dfa {
    pub alphabet_size: usize,
    pub initial: usize,
    pub sink: usize,
    pub transitions: Vec<Vec<usize>>,
    pub states: Vec<DfaState>,
    pub min_count: usize,
    pub fallback: FallbackRisk,
    pub global_prevalence: f64,
    pub calibrated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model_hash: Option<String>,
    /// Symbol names when symbols come from a fixed vocabulary instead of a monitor.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symbol_names: Vec<String>,
}

/// Mutable automaton during merging; `None` is a missing transition.
struct Work {
    k: usize,
    trans: Vec<Vec<Option<usize>>>,
    label: Vec<Option<StateLabel>>,
    log: Vec<Change>,
}

enum Change {
    Trans(usize, usize, Option<usize>),
    Label(usize, Option<StateLabel>),
}

impl Work {
    fn set_trans(&mut self, s: usize, a: usize, to: Option<usize>) {
        self.log.push(Change::Trans(s, a, self.trans[s][a]));
        self.trans[s][a] = to;
    }

    fn rollback(&mut self, mark: usize) {
        while self.log.len() > mark {
            match self.log.pop().expect("log entry") {
                Change::Trans(s, a, old) => self.trans[s][a] = old,
                Change::Label(s, old) => self.label[s] = old,
            }
        }
    }

    /// Folds the (tree-shaped) subautomaton rooted at `b` into `r`. Returns false on a label conflict.
    fn fold(&mut self, r: usize, b: usize) -> bool {
        let mut stack = vec![(r, b)];
        while let Some((r, b)) = stack.pop() {
            if let Some(lb) = self.label[b] {
                match self.label[r] {
                    Some(lr) if lr != lb => return false,
                    Some(_) => {}
                    None => {
                        self.log.push(Change::Label(r, None));
                        self.label[r] = Some(lb);
                    }
                }
            }
            for a in 0..self.k {
                if let Some(bc) = self.trans[b][a] {
                    match self.trans[r][a] {
                        Some(rc) => stack.push((rc, bc)),
                        None => self.set_trans(r, a, Some(bc)),
                    }
                }
            }
        }
        true
    }
}

/// Prefix-tree acceptor with states numbered breadth-first, children in symbol order, so state
/// ids follow (length, lexicographic) order of their access strings.
fn prefix_tree(sample: &[LabeledSequence], k: usize) -> Result<Work> {
    let mut trans: Vec<Vec<Option<usize>>> = vec![vec![None; k]];
    let mut label: Vec<Option<StateLabel>> = vec![None];
    for s in sample {
        let mut q = 0;
        for &a in &s.symbols {
            if a >= k {
                return Err(Error::invalid(format!("symbol {a} outside alphabet of size {k}")));
            }
            q = match trans[q][a] {
                Some(n) => n,
                None => {
                    trans.push(vec![None; k]);
                    label.push(None);
                    let n = trans.len() - 1;
                    trans[q][a] = Some(n);
                    n
                }
            };
        }
        label[q] = Some(if s.positive { StateLabel::Positive } else { StateLabel::Negative });
    }
    // Renumber breadth-first.
    let mut order = Vec::with_capacity(trans.len());
    let mut new_id = vec![usize::MAX; trans.len()];
    let mut queue = VecDeque::from([0]);
    while let Some(q) = queue.pop_front() {
        new_id[q] = order.len();
        order.push(q);
        queue.extend(trans[q].iter().flatten().copied());
    }
    let trans = order.iter().map(|&q| trans[q].iter().map(|c| c.map(|c| new_id[c])).collect()).collect();
    let label = order.iter().map(|&q| label[q]).collect();
    Ok(Work { k, trans, label, log: Vec::new() })
}

/// RPNI over a labeled sample after the ambiguity filter. The result is uncalibrated.
pub fn induce_dfa(sample: &[LabeledSequence], alphabet_size: usize) -> Result<(Dfa, AmbiguityFilterReport)> {
    if alphabet_size == 0 {
        return Err(Error::invalid("alphabet must be nonempty"));
    }
    let (retained, report) = ambiguity_filter(sample);
    if retained.is_empty() {
        return Err(Error::invalid("induction sample is empty after the ambiguity filter"));
    }
    let mut w = prefix_tree(&retained, alphabet_size)?;
    let k = alphabet_size;
    let mut red: Vec<usize> = vec![0];
    let mut is_red = vec![false; w.trans.len()];
    is_red[0] = true;
    loop {
        // Blue states: non-red targets of red states; pick the smallest id.
        let blue = red
            .iter()
            .flat_map(|&r| w.trans[r].iter().flatten().copied())
            .filter(|&q| !is_red[q])
            .min();
        let Some(b) = blue else { break };
        let (parent, sym) = red
            .iter()
            .find_map(|&r| (0..k).find(|&a| w.trans[r][a] == Some(b)).map(|a| (r, a)))
            .expect("blue state has a red parent");
        let mut merged = false;
        for &r in &red {
            let mark = w.log.len();
            w.set_trans(parent, sym, Some(r));
            if w.fold(r, b) {
                merged = true;
                break;
            }
            w.rollback(mark);
        }
        w.log.clear();
        if !merged {
            let pos = red.partition_point(|&x| x < b);
            red.insert(pos, b);
            is_red[b] = true;
        }
    }
    Ok((finish(&w), report))
}

/// Canonical breadth-first renumbering of the reachable part plus an explicit sink.
fn finish(w: &Work) -> Dfa {
    let mut new_id: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([0]);
    new_id.insert(0, 0);
    while let Some(q) = queue.pop_front() {
        order.push(q);
        for c in w.trans[q].iter().flatten() {
            if !new_id.contains_key(c) {
                new_id.insert(*c, new_id.len());
                queue.push_back(*c);
            }
        }
    }
    let sink = order.len();
    let mut transitions: Vec<Vec<usize>> = order
        .iter()
        .map(|&q| w.trans[q].iter().map(|c| c.map_or(sink, |c| new_id[&c])).collect())
        .collect();
    transitions.push(vec![sink; w.k]);
    let mut states: Vec<DfaState> = order
        .iter()
        .map(|&q| DfaState { label: w.label[q], risk: 0.0, count: 0, positives: 0, trusted: false })
        .collect();
    states.push(DfaState { label: None, risk: 0.0, count: 0, positives: 0, trusted: false });
    Dfa {
        alphabet_size: w.k,
        initial: 0,
        sink,
        transitions,
        states,
        min_count: DEFAULT_MIN_COUNT,
        fallback: FallbackRisk::GlobalPrevalence,
        global_prevalence: 0.0,
        calibrated: false,
        source_model_hash: None,
        symbol_names: Vec::new(),
    }
}

impl Dfa {
    /// States excluding the sink.
    pub fn live_states(&self) -> usize {
        self.states.len() - 1
    }

    pub fn step(&self, state: usize, symbol: usize) -> usize {
        if symbol >= self.alphabet_size {
            return self.sink;
        }
        self.transitions[state][symbol]
    }

    pub fn run(&self, symbols: &[usize]) -> usize {
        symbols.iter().fold(self.initial, |q, &a| self.step(q, a))
    }

    /// State reached after each prefix.
    pub fn trace(&self, symbols: &[usize]) -> Vec<usize> {
        let mut q = self.initial;
        symbols
            .iter()
            .map(|&a| {
                q = self.step(q, a);
                q
            })
            .collect()
    }

    /// Whether the sample label of the reached state is positive.
    pub fn accepts(&self, symbols: &[usize]) -> bool {
        self.states[self.run(symbols)].label == Some(StateLabel::Positive)
    }

    pub fn fallback_risk(&self) -> f64 {
        match self.fallback {
            FallbackRisk::GlobalPrevalence => self.global_prevalence,
            FallbackRisk::Zero => 0.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dfa: Dfa = serde_json::from_str(&text)
            .map_err(|e| Error::Artifact { path: path.to_path_buf(), reason: e.to_string() })?;
        dfa.validate().map_err(|e| Error::Artifact { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(dfa)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if self.transitions.len() != n || self.initial >= n || self.sink >= n {
            return Err(Error::invalid("DFA state tables disagree"));
        }
        for row in &self.transitions {
            if row.len() != self.alphabet_size || row.iter().any(|&q| q >= n) {
                return Err(Error::invalid("DFA transition table is not closed"));
            }
        }
        if self.states.iter().any(|s| !(0.0..=1.0).contains(&s.risk)) {
            return Err(Error::invalid("DFA state risk outside [0,1]"));
        }
        Ok(())
    }
}

/// Routes every calibration prefix to its end state and sets per-state risk and trust.
pub fn calibrate_state_risks(
    dfa: &Dfa,
    calibration: &[SymbolTrajectory],
    horizon: usize,
    min_count: usize,
    fallback: FallbackRisk,
) -> Dfa {
    let mut out = dfa.clone();
    for s in &mut out.states {
        s.count = 0;
        s.positives = 0;
    }
    let (mut total, mut pos) = (0usize, 0usize);
    for t in calibration {
        for (q, l) in dfa.trace(&t.symbols).into_iter().zip(t.labels(horizon)) {
            out.states[q].count += 1;
            out.states[q].positives += l as usize;
            total += 1;
            pos += l as usize;
        }
    }
    out.global_prevalence = if total > 0 { pos as f64 / total as f64 } else { 0.0 };
    out.min_count = min_count;
    out.fallback = fallback;
    out.calibrated = true;
    let fb = out.fallback_risk();
    let sink = out.sink;
    for (i, s) in out.states.iter_mut().enumerate() {
        s.trusted = i != sink && s.count >= min_count;
        s.risk = if s.count > 0 { s.positives as f64 / s.count as f64 } else { fb };
    }
    out
}

/// Risk per prefix; prefixes ending in untrusted states abstain and receive the fallback risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfaRiskSeries {
    pub trajectory_id: String,
    pub states: Vec<usize>,
    pub scores: Vec<f64>,
    pub abstain: Vec<bool>,
}

pub fn dfa_score_prefix(dfa: &Dfa, trajectory_id: &str, symbols: &[usize]) -> DfaRiskSeries {
    let states = dfa.trace(symbols);
    let fb = dfa.fallback_risk();
    let (scores, abstain) = states
        .iter()
        .map(|&q| {
            let s = &dfa.states[q];
            if s.trusted {
                (s.risk, false)
            } else {
                (fb, true)
            }
        })
        .unzip();
    DfaRiskSeries { trajectory_id: trajectory_id.to_string(), states, scores, abstain }
}

/// DFA scores as metric input, with abstention flags.
pub fn dfa_trajectory_scores(dfa: &Dfa, trajectories: &[SymbolTrajectory], horizon: usize) -> Vec<TrajectoryScores> {
    trajectories
        .iter()
        .map(|t| {
            let r = dfa_score_prefix(dfa, &t.trajectory_id, &t.symbols);
            TrajectoryScores {
                trajectory_id: t.trajectory_id.clone(),
                failed: t.failed,
                scores: r.scores,
                labels: t.labels(horizon),
                abstain: r.abstain,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfaAuditReport {
    pub state_count: usize,
    pub prefix_count: usize,
    pub trusted_prefix_share: f64,
    pub warning_state_count: usize,
    pub top5_routed_share: f64,
    pub max_state_risk: f64,
    pub abstention_rate: f64,
    #[serde(with = "crate::metrics::threshold_serde")]
    pub warning_threshold: f64,
}

/// Coverage and concentration statistics of test prefixes routed through a calibrated DFA.
pub fn audit_dfa(dfa: &Dfa, test: &[SymbolTrajectory], warning_threshold: f64) -> DfaAuditReport {
    let mut counts = vec![0usize; dfa.states.len()];
    for t in test {
        for q in dfa.trace(&t.symbols) {
            counts[q] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let trusted: usize = counts.iter().zip(&dfa.states).filter(|(_, s)| s.trusted).map(|(c, _)| c).sum();
    let mut sorted = counts.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top5: usize = sorted.iter().take(5).sum();
    let share = |x: usize| if n > 0 { x as f64 / n as f64 } else { 0.0 };
    let trusted_share = share(trusted);
    DfaAuditReport {
        state_count: dfa.live_states(),
        prefix_count: n,
        trusted_prefix_share: trusted_share,
        warning_state_count: dfa.states.iter().filter(|s| s.trusted && s.risk >= warning_threshold).count(),
        top5_routed_share: if n > 0 { share(top5) } else { 0.0 },
        max_state_risk: dfa.states.iter().filter(|s| s.trusted).map(|s| s.risk).fold(0.0, f64::max),
        abstention_rate: if n > 0 { 1.0 - trusted_share } else { 0.0 },
        warning_threshold,
    }
}

/// One route's automaton and its calibration positive rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteModel {
    pub dfa: Option<Dfa>,
    pub prior: f64,
    pub calibration_prefixes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedDfa {
    pub route_key: String,
    pub routes: BTreeMap<String, RouteModel>,
    pub global_prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InductionOptions {
    pub horizon: usize,
    pub min_count: usize,
    pub sample_mode: SampleMode,
    pub fallback: FallbackRisk,
}

impl Default for InductionOptions {
    fn default() -> Self {
        InductionOptions {
            horizon: 3,
            min_count: DEFAULT_MIN_COUNT,
            sample_mode: SampleMode::FullTrajectory,
            fallback: FallbackRisk::GlobalPrevalence,
        }
    }
}

/// Induce on `train` and calibrate on `calibration`.
pub fn extract_dfa(
    train: &[SymbolTrajectory],
    calibration: &[SymbolTrajectory],
    alphabet_size: usize,
    opts: &InductionOptions,
) -> Result<(Dfa, AmbiguityFilterReport)> {
    let sample = induction_sample(train, opts.sample_mode, opts.horizon);
    let (dfa, report) = induce_dfa(&sample, alphabet_size)?;
    Ok((calibrate_state_risks(&dfa, calibration, opts.horizon, opts.min_count, opts.fallback), report))
}

fn by_route(ts: &[SymbolTrajectory]) -> BTreeMap<String, Vec<SymbolTrajectory>> {
    let mut m: BTreeMap<String, Vec<SymbolTrajectory>> = BTreeMap::new();
    for t in ts {
        m.entry(t.route.clone().unwrap_or_default()).or_default().push(t.clone());
    }
    m
}

fn prevalence(ts: &[SymbolTrajectory], horizon: usize) -> (f64, usize) {
    let (mut n, mut p) = (0usize, 0usize);
    for t in ts {
        let l = t.labels(horizon);
        n += l.len();
        p += l.iter().map(|&x| x as usize).sum::<usize>();
    }
    (if n > 0 { p as f64 / n as f64 } else { 0.0 }, n)
}

/// One DFA per route value (route taken from [`SymbolTrajectory::route`]).
pub fn induce_routed_dfa(
    route_key: &str,
    train: &[SymbolTrajectory],
    calibration: &[SymbolTrajectory],
    alphabet_size: usize,
    opts: &InductionOptions,
) -> Result<RoutedDfa> {
    let train_routes = by_route(train);
    let cal_routes = by_route(calibration);
    let (global_prior, _) = prevalence(calibration, opts.horizon);
    let mut routes = BTreeMap::new();
    for (route, cal) in &cal_routes {
        let (prior, n) = prevalence(cal, opts.horizon);
        let dfa = match train_routes.get(route) {
            Some(tr) => match extract_dfa(tr, cal, alphabet_size, opts) {
                Ok((d, _)) => Some(d),
                Err(Error::InvalidInput(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        routes.insert(route.clone(), RouteModel { dfa, prior, calibration_prefixes: n });
    }
    Ok(RoutedDfa { route_key: route_key.to_string(), routes, global_prior })
}

impl RoutedDfa {
    pub fn total_states(&self) -> usize {
        self.routes.values().filter_map(|r| r.dfa.as_ref()).map(Dfa::live_states).sum()
    }

    /// Routed-DFA scores; unseen routes get the global prior and abstain.
    pub fn score(&self, t: &SymbolTrajectory, horizon: usize) -> TrajectoryScores {
        let n = t.symbols.len();
        let route = t.route.clone().unwrap_or_default();
        let (scores, abstain) = match self.routes.get(&route) {
            Some(RouteModel { dfa: Some(d), .. }) => {
                let r = dfa_score_prefix(d, &t.trajectory_id, &t.symbols);
                (r.scores, r.abstain)
            }
            Some(m) => (vec![m.prior; n], vec![false; n]),
            None => (vec![self.global_prior; n], vec![true; n]),
        };
        TrajectoryScores { trajectory_id: t.trajectory_id.clone(), failed: t.failed, scores, labels: t.labels(horizon), abstain }
    }

    /// Constant per-route calibration rate for every prefix.
    pub fn prior_score(&self, t: &SymbolTrajectory, horizon: usize) -> TrajectoryScores {
        let n = t.symbols.len();
        let route = t.route.clone().unwrap_or_default();
        let (p, abstain) = match self.routes.get(&route) {
            Some(m) => (m.prior, false),
            None => (self.global_prior, true),
        };
        TrajectoryScores {
            trajectory_id: t.trajectory_id.clone(),
            failed: t.failed,
            scores: vec![p; n],
            labels: t.labels(horizon),
            abstain: vec![abstain; n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(s: &str, positive: bool) -> LabeledSequence {
        LabeledSequence { symbols: s.bytes().map(|b| (b - b'a') as usize).collect(), positive }
    }

    fn all_strings(k: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for a in 0..k {
                    let mut t: Vec<usize> = s.clone();
                    t.push(a);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Smallest complete DFA (with accepting set) consistent with the sample, by exhaustive search.
    fn brute_min_consistent(sample: &[LabeledSequence], k: usize, max_states: usize) -> Option<usize> {
        for n in 1..=max_states {
            let cells = n * k;
            let total = n.pow(cells as u32);
            for code in 0..total {
                let mut c = code;
                let table: Vec<usize> = (0..cells)
                    .map(|_| {
                        let v = c % n;
                        c /= n;
                        v
                    })
                    .collect();
                for acc in 0..(1usize << n) {
                    let ok = sample.iter().all(|s| {
                        let q = s.symbols.iter().fold(0, |q, &a| table[q * k + a]);
                        ((acc >> q) & 1 == 1) == s.positive
                    });
                    if ok {
                        return Some(n);
                    }
                }
            }
        }
        None
    }

    #[test]
    fn textbook_sample_gives_minimal_automaton() {
        let sample = [seq("ab", true), seq("a", false), seq("b", false), seq("", false)];
        let (dfa, _) = induce_dfa(&sample, 2).unwrap();
        assert_eq!(dfa.live_states(), 3);
        assert_eq!(brute_min_consistent(&sample, 2, 4), Some(3));
        for s in &sample {
            assert_eq!(dfa.accepts(&s.symbols), s.positive);
        }
    }

    #[test]
    fn ambiguity_filter_removes_conflicts() {
        let sample = [seq("ab", true), seq("ab", false), seq("ab", true), seq("b", false)];
        let (kept, r) = ambiguity_filter(&sample);
        assert_eq!(kept, vec![seq("b", false)]);
        assert_eq!((r.conflicting_sequences, r.removed, r.retained), (1, 3, 1));
        let only = [seq("ab", true), seq("ab", false)];
        assert!(induce_dfa(&only, 2).is_err());
    }

    /// Failure iff a `c` occurs and is later followed by a `b`; minimal DFA has 3 states.
    fn planted(s: &[usize]) -> bool {
        let mut q = 0;
        for &a in s {
            q = match (q, a) {
                (0, 2) => 1,
                (1, 1) => 2,
                (q, _) => q,
            };
        }
        q == 2
    }

    #[test]
    fn planted_language_is_recovered() {
        let sample: Vec<LabeledSequence> =
            all_strings(3, 5).into_iter().map(|s| LabeledSequence { positive: planted(&s), symbols: s }).collect();
        let (dfa, _) = induce_dfa(&sample, 3).unwrap();
        assert_eq!(dfa.live_states(), 3);
        for s in all_strings(3, 8) {
            assert_eq!(dfa.accepts(&s), planted(&s), "{s:?}");
        }
    }

    #[test]
    fn induction_is_deterministic_under_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample: Vec<LabeledSequence> = (0..200)
            .map(|_| {
                let n = rng.random_range(0..7);
                let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
                LabeledSequence { positive: planted(&s), symbols: s }
            })
            .collect();
        let (a, _) = induce_dfa(&sample, 3).unwrap();
        let mut rev = sample.clone();
        rev.reverse();
        let (b, _) = induce_dfa(&rev, 3).unwrap();
        assert_eq!(a, b);
        for s in &sample {
            assert_eq!(a.accepts(&s.symbols), s.positive);
        }
    }

    fn traj(id: &str, failed: bool, symbols: Vec<usize>) -> SymbolTrajectory {
        SymbolTrajectory { trajectory_id: id.into(), failed, symbols, route: None }
    }

    #[test]
    fn calibration_counts_and_trust() {
        // One-state automaton over {0}: every prefix lands in state 0.
        let (dfa, _) = induce_dfa(&[seq("", false), seq("a", false)], 1).unwrap();
        assert_eq!(dfa.live_states(), 1);
        // 10 prefixes, 3 positive (failed T=10 with H=2 gives positions 8..10).
        let cal = vec![traj("f", true, vec![0; 10])];
        let c = calibrate_state_risks(&dfa, &cal, 2, 10, FallbackRisk::GlobalPrevalence);
        assert_eq!((c.states[0].count, c.states[0].trusted), (10, true));
        assert!((c.states[0].risk - 0.3).abs() < 1e-15);
        let cal9 = vec![traj("f", true, vec![0; 9])];
        let c9 = calibrate_state_risks(&dfa, &cal9, 2, 10, FallbackRisk::GlobalPrevalence);
        assert!(!c9.states[0].trusted);
        let r = dfa_score_prefix(&c9, "f", &[0, 0]);
        assert_eq!(r.abstain, vec![true, true]);
        assert_eq!(r.scores[0], c9.global_prevalence);
    }

    #[test]
    fn out_of_alphabet_goes_to_sink() {
        let (dfa, _) = induce_dfa(&[seq("ab", true), seq("a", false)], 2).unwrap();
        let cal = vec![traj("x", false, vec![0; 20])];
        let c = calibrate_state_risks(&dfa, &cal, 3, 10, FallbackRisk::GlobalPrevalence);
        let r = dfa_score_prefix(&c, "y", &[7]);
        assert_eq!(r.states, vec![c.sink]);
        assert!(r.abstain[0]);
    }

    #[test]
    fn single_state_audit() {
        let (dfa, _) = induce_dfa(&[seq("a", false)], 1).unwrap();
        let cal = vec![traj("a", false, vec![0; 12])];
        let c = calibrate_state_risks(&dfa, &cal, 3, 10, FallbackRisk::GlobalPrevalence);
        let r = audit_dfa(&c, &[traj("t", false, vec![0; 5])], 0.5);
        assert_eq!(r.top5_routed_share, 1.0);
        assert_eq!(r.abstention_rate, 0.0);
        assert_eq!(r.trusted_prefix_share + r.abstention_rate, 1.0);
    }

    #[test]
    fn routed_single_route_matches_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut ChaCha8Rng, i: usize| {
            let n = rng.random_range(1..8);
            let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            SymbolTrajectory { trajectory_id: format!("t{i}"), failed: planted(&s), symbols: s, route: Some("r".into()) }
        };
        let train: Vec<_> = (0..150).map(|i| mk(&mut rng, i)).collect();
        let cal: Vec<_> = (0..150).map(|i| mk(&mut rng, 1000 + i)).collect();
        let opts = InductionOptions::default();
        let (global, _) = extract_dfa(&train, &cal, 3, &opts).unwrap();
        let routed = induce_routed_dfa("site", &train, &cal, 3, &opts).unwrap();
        assert_eq!(routed.total_states(), global.live_states());
        for t in &cal {
            let a = dfa_trajectory_scores(&global, std::slice::from_ref(t), 3).remove(0);
            assert_eq!(routed.score(t, 3), a);
        }
        let unseen = SymbolTrajectory { route: Some("other".into()), ..cal[0].clone() };
        assert!(routed.score(&unseen, 3).abstain.iter().all(|&a| a));
    }

    #[test]
    fn route_prior_separates_when_route_determines_outcome() {
        let mk = |i: usize, failed: bool| SymbolTrajectory {
            trajectory_id: format!("t{i}"),
            failed,
            symbols: vec![0; 5],
            route: Some(if failed { "bad" } else { "good" }.into()),
        };
        let cal: Vec<_> = (0..20).map(|i| mk(i, i % 2 == 0)).collect();
        let routed = induce_routed_dfa("site", &cal, &cal, 1, &InductionOptions::default()).unwrap();
        let series: Vec<_> = cal.iter().map(|t| routed.prior_score(t, 3)).collect();
        let (s, l): (Vec<f64>, Vec<u8>) =
            series.iter().flat_map(|t| t.scores.iter().copied().zip(t.labels.iter().copied())).unzip();
        // All 40 positives sit in the tied top block of 50 "bad"-route prefixes.
        let ap = crate::metrics::average_precision(&s, &l).unwrap();
        assert!((ap - 0.8).abs() < 1e-12, "{ap}");
        assert!((routed.routes["bad"].prior - 0.8).abs() < 1e-12);
        assert_eq!(routed.routes["good"].prior, 0.0);
    }

    #[test]
    fn artifact_round_trip() {
        let (dfa, _) = induce_dfa(&[seq("ab", true), seq("a", false), seq("b", false)], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dfa.json");
        dfa.save(&p).unwrap();
        assert_eq!(Dfa::load(&p).unwrap(), dfa);
    }

    proptest! {
        #[test]
        fn consistency_and_partition(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ts: Vec<SymbolTrajectory> = (0..60).map(|i| {
                let n = rng.random_range(1..9);
                let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
                traj(&format!("t{i}"), rng.random_bool(0.4), s)
            }).collect();
            let sample = induction_sample(&ts[..30], SampleMode::FullTrajectory, 3);
            let (retained, _) = ambiguity_filter(&sample);
            if retained.is_empty() { return Ok(()); }
            let (dfa, _) = induce_dfa(&sample, 3).unwrap();
            for s in &retained {
                prop_assert_eq!(dfa.accepts(&s.symbols), s.positive);
            }
            let cal = calibrate_state_risks(&dfa, &ts[30..], 3, 5, FallbackRisk::GlobalPrevalence);
            let total: usize = ts[30..].iter().map(|t| t.symbols.len()).sum();
            prop_assert_eq!(cal.states.iter().map(|s| s.count).sum::<usize>(), total);
            let r = audit_dfa(&cal, &ts[30..], 0.5);
            prop_assert!((r.trusted_prefix_share + r.abstention_rate - 1.0).abs() == 0.0);
            prop_assert!((0.0..=1.0).contains(&r.top5_routed_share));
        }

        #[test]
        fn prefix_mode_sample_is_consistent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ts: Vec<SymbolTrajectory> = (0..20).map(|i| {
                let n = rng.random_range(1..7);
                let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
                traj(&format!("t{i}"), rng.random_bool(0.5), s)
            }).collect();
            let sample = induction_sample(&ts, SampleMode::Prefix, 2);
            prop_assert_eq!(sample.len(), ts.iter().map(|t| t.symbols.len()).sum::<usize>());
            let (retained, _) = ambiguity_filter(&sample);
            if let Ok((dfa, _)) = induce_dfa(&sample, 2) {
                for s in &retained {
                    prop_assert_eq!(dfa.accepts(&s.symbols), s.positive);
                }
            }
        }
    }
}
