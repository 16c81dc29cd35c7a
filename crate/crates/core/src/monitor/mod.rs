//! Learned prefix monitor: a Gumbel-softmax event symbolizer feeding a GRU or soft-FSM risk
//! backend, trained jointly on warning labels and scored causally.

mod artifact;
mod threshold;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use artifact::{load_model, save_model, ModelManifest, TensorEntry};
pub use threshold::{select_threshold, ThresholdChoice, ThresholdPolicy};

use crate::diffcore::{
    adamw_step, balance_loss_tape, fsm_update_tape, gelu, gru_cell_tape, gumbel_softmax_rows, sample_gumbel,
    sigmoid, softmax_in_place, softplus, AdamWConfig, CsrMatrix, GruVars, OptimizerState, Tape,
    Tensor, Var,
};
use crate::encoder::{SparseVec, VectorizerModel};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, TrajectoryScores};
use crate::stepview::StepViewTrajectory;
use crate::trace_model::warning_labels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Gru,
    Fsm,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Backend::Gru),
            "fsm" => Ok(Backend::Fsm),
            other => Err(Error::Config(format!("unknown backend {other:?} (expected gru or fsm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub alphabet_size: usize,
    /// Number of backend states; `None` uses the alphabet size.
    pub state_budget: Option<usize>,
    pub hidden_width: usize,
    pub temperature: f64,
    pub lambda_pred: f64,
    pub lambda_balance: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub max_seq_len: usize,
    pub horizon: usize,
    pub backend: Backend,
    pub seed: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            alphabet_size: 16,
            state_budget: None,
            hidden_width: 128,
            temperature: 0.5,
            lambda_pred: 1.0,
            lambda_balance: 0.1,
            beta: 1.0,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 24,
            eval_every: 1,
            max_seq_len: 64,
            horizon: 3,
            backend: Backend::Gru,
            seed: 0,
        }
    }
}

impl MonitorConfig {
    pub fn states(&self) -> usize {
        self.state_budget.unwrap_or(self.alphabet_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.alphabet_size < 2 || self.states() < 2 {
            return bad("alphabet_size and state_budget must be at least 2");
        }
        if self.hidden_width == 0 || self.batch_size == 0 || self.max_seq_len == 0 || self.eval_every == 0 {
            return bad("hidden_width, batch_size, max_seq_len and eval_every must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        let rates = [self.temperature, self.learning_rate, self.lambda_pred];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("temperature, learning_rate and lambda_pred must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.lambda_balance >= 0.0 && self.beta >= 0.0) {
            return bad("weight_decay, lambda_balance and beta must be non-negative");
        }
        Ok(())
    }
}

/// Encoded steps of one trajectory with its warning labels (computed on the full length).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTrajectory {
    pub trajectory_id: String,
    pub failed: bool,
    pub steps: Vec<SparseVec>,
    pub labels: Vec<u8>,
}

impl EncodedTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A set of encoded trajectories tagged with the vectorizer that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    pub vectorizer_hash: String,
    pub dim: usize,
    pub trajectories: Vec<EncodedTrajectory>,
}

impl EncodedCorpus {
    pub fn encode(vectorizer: &VectorizerModel, corpus: &[&StepViewTrajectory], horizon: usize) -> Self {
        let trajectories = corpus
            .iter()
            .map(|t| EncodedTrajectory {
                trajectory_id: t.trajectory_id.clone(),
                failed: t.outcome.failed(),
                steps: t.canonical_texts().iter().map(|s| vectorizer.encode(s)).collect(),
                labels: warning_labels(t.len(), t.outcome.failed(), horizon),
            })
            .collect();
        EncodedCorpus { vectorizer_hash: vectorizer.hash(), dim: vectorizer.dim(), trajectories }
    }

    /// Same inputs with labels replaced, e.g. by a shuffled control.
    pub fn with_labels(&self, labels: Vec<Vec<u8>>) -> Result<Self> {
        if labels.len() != self.trajectories.len() {
            return Err(Error::invalid("label set count differs from trajectory count"));
        }
        let mut out = self.clone();
        for (t, l) in out.trajectories.iter_mut().zip(labels) {
            if l.len() != t.len() {
                return Err(Error::invalid(format!("label length mismatch for {}", t.trajectory_id)));
            }
            t.labels = l;
        }
        Ok(out)
    }

    pub fn positive_rate(&self) -> f64 {
        let (pos, n) = self.trajectories.iter().fold((0usize, 0usize), |(p, n), t| {
            (p + t.labels.iter().filter(|&&l| l == 1).count(), n + t.len())
        });
        pos as f64 / n.max(1) as f64
    }
}

/// Scores and hard symbols for every prefix of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSeries {
    pub trajectory_id: String,
    pub scores: Vec<f64>,
    pub symbols: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub pred_loss: f64,
    pub balance_loss: f64,
    pub validation_auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_validation_auprc: f64,
    pub best_checkpoint_id: String,
    pub calibration_threshold: Option<ThresholdChoice>,
}

/// Trained weights plus everything needed to score.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorModel {
    pub config: MonitorConfig,
    pub input_dim: usize,
    pub vectorizer_hash: String,
    /// Parameters in the order of [`MonitorModel::param_names`].
    pub params: Vec<Tensor>,
}

const GRU_NAMES: [&str; 11] = [
    "symbolizer.w1",
    "symbolizer.w2",
    "gru.proj",
    "gru.w_z",
    "gru.b_z",
    "gru.w_r",
    "gru.b_r",
    "gru.w_h",
    "gru.b_h",
    "head.w",
    "head.b",
];
const FSM_NAMES: [&str; 6] =
    ["symbolizer.w1", "symbolizer.w2", "fsm.transitions", "fsm.theta0", "head.w", "head.b"];

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

impl MonitorModel {
    /// Fresh parameters. Symbolizer and projection use Glorot-uniform bounds, recurrent weights
    /// use `1/sqrt(Q)`, and the head bias starts at the logit of `prior`.
    pub fn init(config: &MonitorConfig, input_dim: usize, vectorizer_hash: &str, prior: f64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("vectorizer has an empty vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, hw, k, q) = (input_dim, config.hidden_width, config.alphabet_size, config.states());
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let rec = 1.0 / (q as f64).sqrt();
        let prior = prior.clamp(1e-4, 1.0 - 1e-4);
        let head_b = Tensor::scalar((prior / (1.0 - prior)).ln());
        let mut params = vec![uniform(&mut rng, d, hw, glorot(d, hw)), uniform(&mut rng, hw, k, glorot(hw, k))];
        match config.backend {
            Backend::Gru => {
                params.push(uniform(&mut rng, k, q, glorot(k, q)));
                for _ in 0..3 {
                    params.push(uniform(&mut rng, 2 * q, q, rec));
                    params.push(uniform(&mut rng, 1, q, rec));
                }
                params.push(uniform(&mut rng, q, 1, rec));
                params.push(head_b);
            }
            Backend::Fsm => {
                // Transition logits lean towards staying put so early training keeps state mass.
                let mut t = uniform(&mut rng, k, q * q, 0.5);
                for s in 0..k {
                    for i in 0..q {
                        t.row_mut(s)[i * q + i] += 1.0;
                    }
                }
                params.push(t);
                params.push(Tensor::zeros(1, q));
                params.push(uniform(&mut rng, q, 1, rec));
                params.push(head_b);
            }
        }
        Ok(MonitorModel { config: config.clone(), input_dim, vectorizer_hash: vectorizer_hash.to_string(), params })
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self.config.backend {
            Backend::Gru => &GRU_NAMES,
            Backend::Fsm => &FSM_NAMES,
        }
    }

    pub fn expected_shapes(config: &MonitorConfig, input_dim: usize) -> Vec<(usize, usize)> {
        let (hw, k, q) = (config.hidden_width, config.alphabet_size, config.states());
        let mut v = vec![(input_dim, hw), (hw, k)];
        match config.backend {
            Backend::Gru => {
                v.push((k, q));
                for _ in 0..3 {
                    v.push((2 * q, q));
                    v.push((1, q));
                }
            }
            Backend::Fsm => {
                v.push((k, q * q));
                v.push((1, q));
            }
        }
        v.push((q, 1));
        v.push((1, 1));
        v
    }

    pub fn check_vectorizer(&self, hash: &str) -> Result<()> {
        if hash != self.vectorizer_hash {
            return Err(Error::VectorizerMismatch { expected: self.vectorizer_hash.clone(), actual: hash.to_string() });
        }
        Ok(())
    }

    /// Symbol logits of one encoded step.
    pub fn step_logits(&self, x: &SparseVec) -> Vec<f64> {
        let (w1, w2) = (&self.params[0], &self.params[1]);
        let mut h = vec![0.0; w1.cols()];
        for &(j, v) in x {
            for (o, &w) in h.iter_mut().zip(w1.row(j as usize)) {
                *o += v * w;
            }
        }
        let mut logits = vec![0.0; w2.cols()];
        for (j, &hj) in h.iter().enumerate() {
            let a = gelu(hj);
            if a == 0.0 {
                continue;
            }
            for (o, &w) in logits.iter_mut().zip(w2.row(j)) {
                *o += a * w;
            }
        }
        logits
    }

    fn soft_symbols(&self, logits: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = logits.iter().map(|x| x / self.config.temperature).collect();
        softmax_in_place(&mut a);
        a
    }

    fn head(&self, state: &[f64]) -> f64 {
        let n = self.params.len();
        let (w, b) = (&self.params[n - 2], &self.params[n - 1]);
        sigmoid(b.item() + state.iter().zip(w.data()).map(|(s, w)| s * w).sum::<f64>())
    }

    fn initial_state(&self) -> Vec<f64> {
        match self.config.backend {
            Backend::Gru => vec![0.0; self.config.states()],
            Backend::Fsm => {
                let mut q = self.params[3].data().to_vec();
                softmax_in_place(&mut q);
                q
            }
        }
    }

    fn advance(&self, state: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        let q = self.config.states();
        match self.config.backend {
            Backend::Gru => {
                let proj = &self.params[2];
                let mut x = vec![0.0; q];
                for (k, &a) in alpha.iter().enumerate() {
                    for (o, &w) in x.iter_mut().zip(proj.row(k)) {
                        *o += a * w;
                    }
                }
                x.iter_mut().for_each(|v| *v = gelu(*v));
                let p = &self.params;
                let lin = |w: &Tensor, b: &Tensor, inp: &[f64]| -> Vec<f64> {
                    let mut o = vec![0.0; q];
                    for (i, &v) in inp.iter().enumerate() {
                        for (oj, &wj) in o.iter_mut().zip(w.row(i)) {
                            *oj += v * wj;
                        }
                    }
                    o.iter_mut().zip(b.data()).for_each(|(oj, bj)| *oj += bj);
                    o
                };
                let xh: Vec<f64> = x.iter().chain(state).copied().collect();
                let z: Vec<f64> = lin(&p[3], &p[4], &xh).into_iter().map(sigmoid).collect();
                let r: Vec<f64> = lin(&p[5], &p[6], &xh).into_iter().map(sigmoid).collect();
                let xrh: Vec<f64> = x.iter().copied().chain(r.iter().zip(state).map(|(a, b)| a * b)).collect();
                let c: Vec<f64> = lin(&p[7], &p[8], &xrh).into_iter().map(f64::tanh).collect();
                Ok((0..q).map(|j| state[j] + z[j] * (c[j] - state[j])).collect())
            }
            Backend::Fsm => {
                let t = &self.params[2];
                let mut mixed = vec![0.0; q * q];
                for (k, &a) in alpha.iter().enumerate() {
                    for (m, &v) in mixed.iter_mut().zip(t.row(k)) {
                        *m += a * softplus(v);
                    }
                }
                let mut next = vec![0.0; q];
                for (i, &qi) in state.iter().enumerate() {
                    for (o, &m) in next.iter_mut().zip(&mixed[i * q..(i + 1) * q]) {
                        *o += qi * m;
                    }
                }
                let s: f64 = next.iter().map(|v| v.abs()).sum();
                if !(s >= crate::diffcore::NORM_EPS) {
                    return Err(Error::Degenerate("state distribution l1 norm below epsilon"));
                }
                Ok(next.into_iter().map(|v| v / s).collect())
            }
        }
    }

    /// Score of the last step after running the backend over `alphas` from the initial state.
    fn run(&self, alphas: &[Vec<f64>], mut on_step: impl FnMut(f64)) -> Result<()> {
        let mut state = self.initial_state();
        for a in alphas {
            state = self.advance(&state, a)?;
            on_step(self.head(&state));
        }
        Ok(())
    }

    /// Causal prefix scores and hard symbols. Prefixes longer than `max_seq_len` are scored on
    /// their most recent `max_seq_len` steps.
    pub fn score_prefix(&self, vectorizer_hash: &str, steps: &[SparseVec]) -> Result<(Vec<f64>, Vec<usize>)> {
        self.check_vectorizer(vectorizer_hash)?;
        let logits: Vec<Vec<f64>> = steps.iter().map(|x| self.step_logits(x)).collect();
        let symbols = logits.iter().map(|l| argmax(l)).collect();
        let alphas: Vec<Vec<f64>> = logits.iter().map(|l| self.soft_symbols(l)).collect();
        let w = self.config.max_seq_len;
        let mut scores = Vec::with_capacity(steps.len());
        self.run(&alphas[..alphas.len().min(w)], |s| scores.push(s))?;
        for end in w + 1..=alphas.len() {
            let mut last = 0.0;
            self.run(&alphas[end - w..end], |s| last = s)?;
            scores.push(last);
        }
        Ok((scores, symbols))
    }

    pub fn score_trajectory(&self, vectorizer_hash: &str, t: &EncodedTrajectory) -> Result<RiskSeries> {
        let (scores, symbols) = self.score_prefix(vectorizer_hash, &t.steps)?;
        Ok(RiskSeries { trajectory_id: t.trajectory_id.clone(), scores, symbols })
    }

    pub fn score_corpus(&self, corpus: &EncodedCorpus) -> Result<Vec<RiskSeries>> {
        corpus.trajectories.iter().map(|t| self.score_trajectory(&corpus.vectorizer_hash, t)).collect()
    }

    /// Score series aligned with the corpus labels, for metrics and threshold selection.
    pub fn trajectory_scores(&self, corpus: &EncodedCorpus) -> Result<Vec<TrajectoryScores>> {
        corpus
            .trajectories
            .iter()
            .map(|t| {
                let (scores, _) = self.score_prefix(&corpus.vectorizer_hash, &t.steps)?;
                Ok(TrajectoryScores {
                    trajectory_id: t.trajectory_id.clone(),
                    failed: t.failed,
                    scores,
                    labels: t.labels.clone(),
                    abstain: vec![],
                })
            })
            .collect()
    }

    /// Pooled prefix AUPRC over a corpus.
    pub fn pooled_auprc(&self, corpus: &EncodedCorpus) -> Result<f64> {
        let series = self.trajectory_scores(corpus)?;
        let scores: Vec<f64> = series.iter().flat_map(|s| s.scores.iter().copied()).collect();
        let labels: Vec<u8> = series.iter().flat_map(|s| s.labels.iter().copied()).collect();
        average_precision(&scores, &labels)
    }

    pub fn hard_symbolize(&self, vectorizer_hash: &str, steps: &[SparseVec]) -> Result<Vec<usize>> {
        self.check_vectorizer(vectorizer_hash)?;
        Ok(steps.iter().map(|x| argmax(&self.step_logits(x))).collect())
    }

    /// Mean deterministic soft assignment over all steps of a corpus.
    pub fn symbol_marginal(&self, corpus: &EncodedCorpus) -> Result<Vec<f64>> {
        self.check_vectorizer(&corpus.vectorizer_hash)?;
        let mut m = vec![0.0; self.config.alphabet_size];
        let mut n = 0usize;
        for t in &corpus.trajectories {
            for x in &t.steps {
                for (o, a) in m.iter_mut().zip(self.soft_symbols(&self.step_logits(x))) {
                    *o += a;
                }
                n += 1;
            }
        }
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        Ok(m)
    }

    /// Training loss of a batch and its gradient with respect to every parameter.
    ///
    /// `noise_seed = None` uses the deterministic symbol path.
    pub fn batch_loss(&self, batch: &[&EncodedTrajectory], noise_seed: Option<u64>) -> Result<BatchLoss> {
        let packed = Packed::new(batch, self.config.max_seq_len, self.input_dim)?;
        let cfg = &self.config;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let hidden = tape.sparse_matmul(packed.x.clone(), vars[0])?;
        let hidden = tape.gelu(hidden);
        let logits = tape.matmul(hidden, vars[1])?;
        let noise = noise_seed.map(|s| {
            let v = tape.value(logits);
            sample_gumbel(&mut ChaCha8Rng::seed_from_u64(s), v.rows(), v.cols())
        });
        let alpha = gumbel_softmax_rows(&mut tape, logits, cfg.temperature, noise.as_ref())?;
        let balance = balance_loss_tape(&mut tape, alpha, cfg.beta)?;

        let q = cfg.states();
        let n = vars.len();
        let (head_w, head_b) = (vars[n - 2], vars[n - 1]);
        let ts = match cfg.backend {
            Backend::Fsm => Some(tape.softplus(vars[2])),
            Backend::Gru => None,
        };
        let n0 = packed.rows_at[0];
        let mut state = match cfg.backend {
            Backend::Gru => tape.constant(Tensor::zeros(n0, q)),
            Backend::Fsm => {
                let q0 = tape.softmax_rows(vars[3]);
                tape.gather_rows(q0, vec![0; n0])?
            }
        };
        let gru = (cfg.backend == Backend::Gru).then(|| GruVars {
            w_z: vars[3],
            b_z: vars[4],
            w_r: vars[5],
            b_r: vars[6],
            w_h: vars[7],
            b_h: vars[8],
        });
        let mut pred: Option<Var> = None;
        for (t, &rows) in packed.rows_at.iter().enumerate() {
            let off = packed.offsets[t];
            let a_t = tape.gather_rows(alpha, (off..off + rows).collect())?;
            if tape.value(state).rows() > rows {
                state = tape.slice_rows(state, rows)?;
            }
            state = match cfg.backend {
                Backend::Gru => {
                    let x = tape.matmul(a_t, vars[2])?;
                    let x = tape.gelu(x);
                    gru_cell_tape(&mut tape, x, state, gru.as_ref().expect("gru weights"))?
                }
                Backend::Fsm => fsm_update_tape(&mut tape, state, a_t, ts.expect("fsm transitions"))?,
            };
            let z = tape.matmul(state, head_w)?;
            let z = tape.add_row(z, head_b)?;
            let s = tape.sigmoid(z);
            let term = tape.weighted_bce(s, packed.labels[t].clone(), packed.weights[t].clone())?;
            pred = Some(match pred {
                Some(p) => tape.add(p, term)?,
                None => term,
            });
        }
        let pred = pred.ok_or_else(|| Error::invalid("empty batch"))?;
        let wp = tape.scale(pred, cfg.lambda_pred);
        let wb = tape.scale(balance, cfg.lambda_balance);
        let total = tape.add(wp, wb)?;
        let grads = tape.backward(total)?;
        let grads = vars.iter().zip(&self.params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();
        Ok(BatchLoss {
            total: tape.value(total).item(),
            pred: tape.value(pred).item(),
            balance: tape.value(balance).item(),
            grads,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: f64,
    pub pred: f64,
    pub balance: f64,
    pub grads: Vec<Tensor>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Time-major packing of a batch: trajectories sorted by (truncated) length descending, so the
/// rows active at step `t` are the first `rows_at[t]` of the batch.
struct Packed {
    x: CsrMatrix,
    rows_at: Vec<usize>,
    offsets: Vec<usize>,
    labels: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl Packed {
    fn new(batch: &[&EncodedTrajectory], max_len: usize, dim: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for t in batch {
            if t.is_empty() || t.labels.len() != t.len() {
                return Err(Error::invalid(format!("trajectory {} is empty or mislabeled", t.trajectory_id)));
            }
        }
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(batch[i].len().min(max_len)));
        let window = |i: usize| {
            let t = batch[i];
            let start = t.len().saturating_sub(max_len);
            (&t.steps[start..], &t.labels[start..])
        };
        let t_max = batch[order[0]].len().min(max_len);
        let b = batch.len() as f64;
        let mut rows = Vec::new();
        let (mut rows_at, mut offsets, mut labels, mut weights) = (vec![], vec![], vec![], vec![]);
        for t in 0..t_max {
            offsets.push(rows.len());
            let (mut l, mut w) = (vec![], vec![]);
            for &i in &order {
                let (steps, labs) = window(i);
                if steps.len() <= t {
                    break;
                }
                rows.push(&steps[t]);
                l.push(labs[t] as f64);
                w.push(1.0 / (b * steps.len() as f64));
            }
            rows_at.push(l.len());
            labels.push(l);
            weights.push(w);
        }
        Ok(Packed { x: CsrMatrix::from_rows(rows, dim)?, rows_at, offsets, labels, weights })
    }
}

/// Trainable parameter count.
pub fn parameter_count(model: &MonitorModel) -> usize {
    model.params.iter().map(|p| p.data().len()).sum()
}

/// Joint training of symbolizer and backend; returns the checkpoint with the best pooled
/// validation AUPRC.
pub fn train_monitor(
    train: &EncodedCorpus,
    calibration: Option<&EncodedCorpus>,
    validation: &EncodedCorpus,
    config: &MonitorConfig,
) -> Result<(MonitorModel, TrainReport)> {
    config.validate()?;
    for c in [Some(train), calibration, Some(validation)].into_iter().flatten() {
        if c.vectorizer_hash != train.vectorizer_hash {
            return Err(Error::VectorizerMismatch {
                expected: train.vectorizer_hash.clone(),
                actual: c.vectorizer_hash.clone(),
            });
        }
    }
    if train.trajectories.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let val_labels: Vec<u8> = validation.trajectories.iter().flat_map(|t| t.labels.iter().copied()).collect();
    if !(val_labels.contains(&0) && val_labels.contains(&1)) {
        return Err(Error::UndefinedMetric("validation split has a single class; AUPRC is undefined".into()));
    }

    let mut model = MonitorModel::init(config, train.dim, &train.vectorizer_hash, train.positive_rate())?;
    let names = model.param_names();
    let hyper = AdamWConfig { lr: config.learning_rate, weight_decay: config.weight_decay, ..AdamWConfig::default() };
    let mut opt = OptimizerState::new(&model.params.iter().collect::<Vec<_>>(), hyper);
    // The init stream seeds the model; shuffling and noise use a separate stream.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train.trajectories.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut pred, mut bal, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedTrajectory> = chunk.iter().map(|&i| &train.trajectories[i]).collect();
            let loss = model.batch_loss(&batch, Some(rng.random()))?;
            tot += loss.total;
            pred += loss.pred;
            bal += loss.balance;
            nb += 1;
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
            adamw_step(&mut refs, &loss.grads, names, &mut opt)?;
        }
        let nb = nb as f64;
        let evaluate = epoch % config.eval_every == 0 || epoch == config.epochs;
        let auprc = if evaluate { Some(model.pooled_auprc(validation)?) } else { None };
        if let Some(a) = auprc {
            if best.as_ref().is_none_or(|b| a > b.1) {
                best = Some((epoch, a, model.params.clone()));
            }
        }
        log::info!("epoch {epoch}: loss {:.6} validation AUPRC {:?}", tot / nb, auprc);
        epochs.push(EpochReport {
            epoch,
            train_loss: tot / nb,
            pred_loss: pred / nb,
            balance_loss: bal / nb,
            validation_auprc: auprc,
        });
    }
    let (best_epoch, best_auprc, params) = best.expect("at least one evaluated epoch");
    model.params = params;
    let calibration_threshold = match calibration {
        Some(c) if !c.trajectories.is_empty() => {
            let series = model.trajectory_scores(c)?;
            select_threshold(&series, ThresholdPolicy::F1).ok()
        }
        _ => None,
    };
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            best_validation_auprc: best_auprc,
            best_checkpoint_id: format!("epoch-{best_epoch:03}"),
            calibration_threshold,
        },
    ))
}
