//! Diagnostic classifiers that never see monitor scores or weights: an l2-regularized logistic
//! probe, a pooled step-vector MLP, position/oracle/task-prior confound controls, a
//! content-scrambled retrain, and the prefix audit sets used for mixture-proportion estimation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffcore::{adamw_step, sigmoid, softplus, AdamWConfig, CsrMatrix, OptimizerState, Tape, Tensor, Var};
use crate::encoder::{fit_probe_vectorizer, fit_vectorizer, EncoderConfig, SparseVec, VectorizerModel};
use crate::error::{Error, Result};
use crate::metrics::{auroc, average_precision};
use crate::monitor::{train_monitor, EncodedCorpus, MonitorConfig};
use crate::observability::{mpe_bootstrap, MpeResult};
use crate::stepview::{StepViewRecord, StepViewTrajectory};
use crate::trace_model::{scramble_prefix, warning_labels, RawTrajectory};

pub const DEFAULT_C: f64 = 0.5;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const AUDIT_STEP_CHARS: usize = 1200;
pub const AUDIT_PREFIX_CHARS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    /// Inverse regularization strength.
    pub c: f64,
    pub balanced: bool,
    pub seed: u64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { c: DEFAULT_C, balanced: true, seed: 0, tolerance: GRADIENT_TOL, max_iterations: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub balanced: bool,
    pub seed: u64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

impl LogisticModel {
    pub fn decision(&self, x: &SparseVec) -> f64 {
        self.bias + x.iter().filter(|(i, _)| (*i as usize) < self.weights.len()).map(|&(i, v)| self.weights[i as usize] * v).sum::<f64>()
    }

    pub fn predict(&self, x: &SparseVec) -> f64 {
        sigmoid(self.decision(x))
    }
}

/// Class-weighted logistic loss plus `||w||^2 / (2C)`; the bias is not penalized.
/// Parameters are packed as `[w_0 .. w_{d-1}, b]`.
pub(crate) struct LogisticObjective<'a> {
    x: &'a [SparseVec],
    y: Vec<f64>,
    sample_weight: Vec<f64>,
    dim: usize,
    inv_c: f64,
}

impl<'a> LogisticObjective<'a> {
    pub(crate) fn new(x: &'a [SparseVec], dim: usize, labels: &[u8], c: f64, balanced: bool) -> Result<Self> {
        if x.len() != labels.len() {
            return Err(Error::invalid(format!("{} feature rows vs {} labels", x.len(), labels.len())));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("inverse regularization C = {c} must be positive")));
        }
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::invalid(format!("logistic probe needs both classes ({pos} positive, {neg} negative)")));
        }
        if x.iter().flatten().any(|&(i, v)| i as usize >= dim || !v.is_finite()) {
            return Err(Error::invalid("feature index outside dimension or non-finite value"));
        }
        let n = labels.len() as f64;
        let sample_weight = labels
            .iter()
            .map(|&l| match (balanced, l) {
                (false, _) => 1.0,
                (true, 1) => n / (2.0 * pos as f64),
                (true, _) => n / (2.0 * neg as f64),
            })
            .collect();
        Ok(LogisticObjective { x, y: labels.iter().map(|&l| l as f64).collect(), sample_weight, dim, inv_c: 1.0 / c })
    }

    fn margins(&self, p: &[f64]) -> Vec<f64> {
        let b = p[self.dim];
        self.x.iter().map(|row| b + row.iter().map(|&(i, v)| p[i as usize] * v).sum::<f64>()).collect()
    }

    pub(crate) fn value(&self, p: &[f64]) -> f64 {
        let z = self.margins(p);
        let data: f64 = z
            .iter()
            .zip(&self.y)
            .zip(&self.sample_weight)
            .map(|((&z, &y), &c)| c * (softplus(z) - y * z))
            .sum();
        data + 0.5 * self.inv_c * p[..self.dim].iter().map(|w| w * w).sum::<f64>()
    }

    /// Gradient and the per-sample curvature weights `c_i s_i (1 - s_i)`.
    pub(crate) fn gradient(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = self.margins(p);
        let mut g = vec![0.0; self.dim + 1];
        let mut curv = Vec::with_capacity(z.len());
        for (((row, &z), &y), &c) in self.x.iter().zip(&z).zip(&self.y).zip(&self.sample_weight) {
            let s = sigmoid(z);
            let r = c * (s - y);
            for &(i, v) in row {
                g[i as usize] += r * v;
            }
            g[self.dim] += r;
            curv.push(c * s * (1.0 - s));
        }
        for (gi, wi) in g.iter_mut().zip(&p[..self.dim]) {
            *gi += self.inv_c * wi;
        }
        (g, curv)
    }

    fn hess_vec(&self, curv: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim + 1];
        for (row, &d) in self.x.iter().zip(curv) {
            let xv = v[self.dim] + row.iter().map(|&(i, x)| v[i as usize] * x).sum::<f64>();
            let a = d * xv;
            for &(i, x) in row {
                out[i as usize] += a * x;
            }
            out[self.dim] += a;
        }
        for (o, vi) in out.iter_mut().zip(&v[..self.dim]) {
            *o += self.inv_c * vi;
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradients for `H d = -g`, stopped at residual `tol`.
fn newton_direction(hv: impl Fn(&[f64]) -> Vec<f64>, g: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let mut x = vec![0.0; g.len()];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for _ in 0..max_iter {
        if rs.sqrt() <= tol {
            break;
        }
        let hp = hv(&p);
        let php = dot(&p, &hp);
        if php <= 0.0 {
            break;
        }
        let alpha = rs / php;
        for j in 0..x.len() {
            x[j] += alpha * p[j];
            r[j] -= alpha * hp[j];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for j in 0..p.len() {
            p[j] = r[j] + beta * p[j];
        }
        rs = rs_new;
    }
    if x.iter().all(|&v| v == 0.0) {
        return g.iter().map(|v| -v).collect();
    }
    x
}

/// Truncated-Newton minimization of the probe objective until the gradient norm drops below
/// the configured tolerance.
pub fn fit_logistic(features: &[SparseVec], dim: usize, labels: &[u8], config: &LogisticConfig) -> Result<LogisticModel> {
    let obj = LogisticObjective::new(features, dim, labels, config.c, config.balanced)?;
    let mut p = vec![0.0; dim + 1];
    let mut f = obj.value(&p);
    let mut iterations = 0;
    let (mut g, mut curv) = obj.gradient(&p);
    let mut gnorm = norm(&g);
    while gnorm >= config.tolerance && iterations < config.max_iterations {
        iterations += 1;
        let cg_tol = gnorm.sqrt().min(0.5) * gnorm;
        let d = newton_direction(|v| obj.hess_vec(&curv, v), &g, cg_tol, 500.min(dim + 1).max(20));
        let slope = dot(&g, &d);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let ft = obj.value(&trial);
            if ft <= f + 1e-4 * step * slope {
                p = trial;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        (g, curv) = obj.gradient(&p);
        gnorm = norm(&g);
        if !accepted {
            break;
        }
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic probe weights".into()));
    }
    let converged = gnorm < config.tolerance;
    if !converged {
        log::warn!("logistic probe stopped after {iterations} iterations with gradient norm {gnorm:.3e}");
    }
    let bias = p.pop().expect("bias entry");
    Ok(LogisticModel {
        weights: p,
        bias,
        c: config.c,
        balanced: config.balanced,
        seed: config.seed,
        iterations,
        gradient_norm: gnorm,
        converged,
    })
}

/// Content-free position features of a 1-based prefix length.
pub fn position_features(t: usize) -> [f64; 4] {
    let t = t as f64;
    [t, t * t, (1.0 + t).ln(), t.sqrt()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControlKind {
    #[serde(rename = "t_only")]
    TOnly,
    #[serde(rename = "t_plus_T_oracle")]
    TPlusTOracle,
    #[serde(rename = "task_prior")]
    TaskPrior,
    #[serde(rename = "tfidf_lr")]
    TfidfLr,
    #[serde(rename = "pooled_mlp")]
    PooledMlp,
    #[serde(rename = "scrambled")]
    Scrambled,
}

impl ControlKind {
    pub const ALL: [ControlKind; 6] = [
        ControlKind::TOnly,
        ControlKind::TPlusTOracle,
        ControlKind::TaskPrior,
        ControlKind::TfidfLr,
        ControlKind::PooledMlp,
        ControlKind::Scrambled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlKind::TOnly => "t_only",
            ControlKind::TPlusTOracle => "t_plus_T_oracle",
            ControlKind::TaskPrior => "task_prior",
            ControlKind::TfidfLr => "tfidf_lr",
            ControlKind::PooledMlp => "pooled_mlp",
            ControlKind::Scrambled => "scrambled",
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ControlKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown control kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden_width: 128, epochs: 8, batch_size: 64, learning_rate: 1e-3, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub horizon: usize,
    pub logistic: LogisticConfig,
    pub mlp: MlpConfig,
    pub monitor: MonitorConfig,
    pub seed: u64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            horizon: 3,
            logistic: LogisticConfig::default(),
            mlp: MlpConfig::default(),
            monitor: MonitorConfig::default(),
            seed: 0,
        }
    }
}

/// Splits a control runs on. Controls only read StepView content and outcome labels.
pub struct ControlData<'a> {
    pub train: Vec<&'a StepViewTrajectory>,
    pub validation: Vec<&'a StepViewTrajectory>,
    pub test: Vec<&'a StepViewTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub kind: ControlKind,
    pub ap: f64,
    pub auroc: f64,
    pub positive_rate: f64,
    pub n_train_prefixes: usize,
    pub n_test_prefixes: usize,
    /// For the scrambled control: AP of the monitor trained and scored on ordered content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_ap: Option<f64>,
}

/// Per-prefix labels of a split in trajectory order.
fn prefix_labels(split: &[&StepViewTrajectory], horizon: usize) -> Vec<u8> {
    split.iter().flat_map(|t| warning_labels(t.len(), t.outcome.failed(), horizon)).collect()
}

/// Z-scoring of dense feature columns fitted on the training rows.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> SparseVec {
        row.iter().enumerate().map(|(j, &v)| (j as u32, (v - self.mean[j]) / self.scale[j])).collect()
    }
}

fn dense_features(split: &[&StepViewTrajectory], oracle: bool) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for tr in split {
        let big_t = tr.len();
        for t in 1..=big_t {
            let mut row = position_features(t).to_vec();
            if oracle {
                row.extend(position_features(big_t));
                row.extend(position_features(big_t - t + 1));
            }
            out.push(row);
        }
    }
    out
}

/// Task identity plus first-step metadata lines, available before any observation.
fn task_context(tr: &StepViewTrajectory) -> Vec<String> {
    let mut keys = vec![format!("task={}", tr.task_id)];
    if let Some(first) = tr.stepview.first() {
        keys.extend(first.metadata_lines.iter().map(|l| format!("meta={l}")));
    }
    keys
}

fn task_prior_features(
    split: &[&StepViewTrajectory],
    vocab: &BTreeMap<String, u32>,
) -> Vec<SparseVec> {
    let mut out = Vec::new();
    for tr in split {
        let mut row: SparseVec = task_context(tr).iter().filter_map(|k| vocab.get(k).map(|&i| (i, 1.0))).collect();
        row.sort_unstable_by_key(|&(i, _)| i);
        row.dedup_by_key(|(i, _)| *i);
        out.extend(std::iter::repeat_n(row, tr.len()));
    }
    out
}

/// Chronological concatenation of the canonical texts of every prefix.
fn prefix_texts(split: &[&StepViewTrajectory]) -> Vec<String> {
    let mut out = Vec::new();
    for tr in split {
        let mut acc = String::new();
        for text in tr.canonical_texts() {
            if !acc.is_empty() {
                acc.push('\n');
            }
            acc.push_str(&text);
            out.push(acc.clone());
        }
    }
    out
}

fn score_report(kind: ControlKind, scores: &[f64], labels: &[u8], n_train: usize) -> Result<ControlReport> {
    Ok(ControlReport {
        kind,
        ap: average_precision(scores, labels)?,
        auroc: auroc(scores, labels)?,
        positive_rate: labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len().max(1) as f64,
        n_train_prefixes: n_train,
        n_test_prefixes: labels.len(),
        reference_ap: None,
    })
}

fn logistic_control(
    kind: ControlKind,
    train_x: &[SparseVec],
    test_x: &[SparseVec],
    dim: usize,
    train_y: &[u8],
    test_y: &[u8],
    cfg: &LogisticConfig,
) -> Result<ControlReport> {
    let model = fit_logistic(train_x, dim, train_y, cfg)?;
    let scores: Vec<f64> = test_x.iter().map(|x| model.predict(x)).collect();
    score_report(kind, &scores, test_y, train_y.len())
}

/// Runs one confound control or supervised probe and reports test-prefix AP and AUROC.
pub fn run_control(kind: ControlKind, data: &ControlData<'_>, config: &ControlConfig) -> Result<ControlReport> {
    let h = config.horizon;
    let train_y = prefix_labels(&data.train, h);
    let test_y = prefix_labels(&data.test, h);
    match kind {
        ControlKind::TOnly | ControlKind::TPlusTOracle => {
            let oracle = kind == ControlKind::TPlusTOracle;
            let train_rows = dense_features(&data.train, oracle);
            let std = Standardizer::fit(&train_rows);
            let tx: Vec<SparseVec> = train_rows.iter().map(|r| std.apply(r)).collect();
            let ex: Vec<SparseVec> = dense_features(&data.test, oracle).iter().map(|r| std.apply(r)).collect();
            let dim = std.mean.len();
            logistic_control(kind, &tx, &ex, dim, &train_y, &test_y, &config.logistic)
        }
        ControlKind::TaskPrior => {
            let keys: std::collections::BTreeSet<String> = data.train.iter().flat_map(|t| task_context(t)).collect();
            let vocab: BTreeMap<String, u32> = keys.into_iter().enumerate().map(|(i, k)| (k, i as u32)).collect();
            let tx = task_prior_features(&data.train, &vocab);
            let ex = task_prior_features(&data.test, &vocab);
            logistic_control(kind, &tx, &ex, vocab.len(), &train_y, &test_y, &config.logistic)
        }
        ControlKind::TfidfLr => {
            let train_text = prefix_texts(&data.train);
            let vec = fit_probe_vectorizer(&train_text)?;
            let tx: Vec<SparseVec> = train_text.iter().map(|s| vec.encode(s)).collect();
            let ex: Vec<SparseVec> = prefix_texts(&data.test).iter().map(|s| vec.encode(s)).collect();
            logistic_control(kind, &tx, &ex, vec.dim(), &train_y, &test_y, &config.logistic)
        }
        ControlKind::PooledMlp => {
            let docs: Vec<String> = data.train.iter().flat_map(|t| t.canonical_texts()).collect();
            let vec = fit_vectorizer(&docs, EncoderConfig::main())?;
            let tx = pooled_features(&vec, &data.train);
            let vx = pooled_features(&vec, &data.validation);
            let ex = pooled_features(&vec, &data.test);
            let val_y = prefix_labels(&data.validation, h);
            let mlp = train_pooled_mlp(&tx, &train_y, &vx, &val_y, vec.dim(), &config.mlp)?;
            let scores = mlp.predict(&ex)?;
            score_report(kind, &scores, &test_y, train_y.len())
        }
        ControlKind::Scrambled => scrambled_control(data, config),
    }
}

/// Mean of the step vectors of each prefix.
fn pooled_features(vec: &VectorizerModel, split: &[&StepViewTrajectory]) -> Vec<SparseVec> {
    let mut out = Vec::new();
    for tr in split {
        let mut sum: BTreeMap<u32, f64> = BTreeMap::new();
        for (t, text) in tr.canonical_texts().iter().enumerate() {
            for (i, v) in vec.encode(text) {
                *sum.entry(i).or_insert(0.0) += v;
            }
            let n = (t + 1) as f64;
            out.push(sum.iter().map(|(&i, &v)| (i, v / n)).collect());
        }
    }
    out
}

/// Mean-pooled step vectors through one GELU hidden layer and a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMlp {
    pub dim: usize,
    pub params: Vec<Tensor>,
}

const MLP_NAMES: [&str; 4] = ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];

impl PooledMlp {
    fn init(dim: usize, hidden: usize, prior: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |r: usize, c: usize| {
            let bound = (6.0 / (r + c) as f64).sqrt();
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect()).expect("shape")
        };
        let w1 = uniform(dim, hidden);
        let w2 = uniform(hidden, 1);
        let prior = prior.clamp(1e-4, 1.0 - 1e-4);
        PooledMlp { dim, params: vec![w1, Tensor::zeros(1, hidden), w2, Tensor::scalar((prior / (1.0 - prior)).ln())] }
    }

    fn forward(&self, tape: &mut Tape, x: &[SparseVec]) -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let csr = CsrMatrix::from_rows(x.iter(), self.dim)?;
        let a = tape.sparse_matmul(csr, vars[0])?;
        let a = tape.add_row(a, vars[1])?;
        let hdn = tape.gelu(a);
        let o = tape.matmul(hdn, vars[2])?;
        let o = tape.add_row(o, vars[3])?;
        Ok((vars, tape.sigmoid(o)))
    }

    pub fn predict(&self, x: &[SparseVec]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(512) {
            let mut tape = Tape::new();
            let (_, s) = self.forward(&mut tape, chunk)?;
            out.extend_from_slice(tape.value(s).data());
        }
        Ok(out)
    }
}

/// Trains the pooled MLP with AdamW on mean BCE; keeps the epoch with the best validation AP.
pub fn train_pooled_mlp(
    train_x: &[SparseVec],
    train_y: &[u8],
    val_x: &[SparseVec],
    val_y: &[u8],
    dim: usize,
    config: &MlpConfig,
) -> Result<PooledMlp> {
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(Error::invalid("feature and label counts differ"));
    }
    if config.batch_size == 0 || config.epochs == 0 || config.hidden_width == 0 {
        return Err(Error::Config("MLP batch size, epochs and width must be positive".into()));
    }
    let prior = train_y.iter().filter(|&&l| l == 1).count() as f64 / train_y.len().max(1) as f64;
    let mut model = PooledMlp::init(dim, config.hidden_width, prior, config.seed);
    let hyper = AdamWConfig { lr: config.learning_rate, weight_decay: config.weight_decay, ..AdamWConfig::default() };
    let mut state = OptimizerState::new(&model.params.iter().collect::<Vec<_>>(), hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best: Option<(f64, PooledMlp)> = None;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<SparseVec> = batch.iter().map(|&i| train_x[i].clone()).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| train_y[i] as f64).collect();
            let mut tape = Tape::new();
            let (vars, s) = model.forward(&mut tape, &xs)?;
            let w = vec![1.0 / batch.len() as f64; batch.len()];
            let loss = tape.weighted_bce(s, ys, w)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().zip(&model.params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();
            let mut ps: Vec<&mut Tensor> = model.params.iter_mut().collect();
            adamw_step(&mut ps, &g, &MLP_NAMES, &mut state)?;
        }
        let ap = average_precision(&model.predict(val_x)?, val_y)?;
        if best.as_ref().is_none_or(|(b, _)| ap > *b) {
            best = Some((ap, model.clone()));
        }
    }
    Ok(best.expect("at least one epoch").1)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// First `t` StepView records of `tr` in the order [`scramble_prefix`] produces.
pub fn scrambled_records(tr: &StepViewTrajectory, t: usize, seed: u64) -> Result<Vec<StepViewRecord>> {
    let stub = RawTrajectory {
        trajectory_id: tr.trajectory_id.clone(),
        task_id: tr.task_id.clone(),
        outcome: tr.outcome,
        steps: (0..tr.len()).map(Value::from).collect(),
    };
    let perm = scramble_prefix(&stub, t, seed)?;
    Ok(perm.steps.iter().map(|v| tr.stepview[v.as_u64().expect("index") as usize].clone()).collect())
}

fn scramble_seed(base: u64, index: usize, t: usize) -> u64 {
    mix(base ^ mix(index as u64) ^ (t as u64).rotate_left(32))
}

fn scrambled_split(split: &[&StepViewTrajectory], base: u64) -> Result<Vec<StepViewTrajectory>> {
    split
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            Ok(StepViewTrajectory {
                stepview: scrambled_records(tr, tr.len(), scramble_seed(base, i, tr.len()))?,
                ..(*tr).clone()
            })
        })
        .collect()
}

/// Monitor trained on ordered content versus one trained on step-shuffled trajectories and
/// scored on independently shuffled prefixes.
fn scrambled_control(data: &ControlData<'_>, config: &ControlConfig) -> Result<ControlReport> {
    let h = config.horizon;
    let mut mcfg = config.monitor.clone();
    mcfg.horizon = h;
    let docs: Vec<String> = data.train.iter().flat_map(|t| t.canonical_texts()).collect();
    let vec = fit_vectorizer(&docs, EncoderConfig::main())?;
    let test_y = prefix_labels(&data.test, h);

    let enc = |s: &[&StepViewTrajectory]| EncodedCorpus::encode(&vec, s, h);
    let (reference, _) = train_monitor(&enc(&data.train), None, &enc(&data.validation), &mcfg)?;
    let ref_scores: Vec<f64> = reference
        .trajectory_scores(&enc(&data.test))?
        .into_iter()
        .flat_map(|s| s.scores)
        .collect();
    let reference_ap = average_precision(&ref_scores, &test_y)?;

    let train_s = scrambled_split(&data.train, config.seed)?;
    let val_s = scrambled_split(&data.validation, config.seed.wrapping_add(1))?;
    let train_refs: Vec<&StepViewTrajectory> = train_s.iter().collect();
    let val_refs: Vec<&StepViewTrajectory> = val_s.iter().collect();
    let (model, _) = train_monitor(&enc(&train_refs), None, &enc(&val_refs), &mcfg)?;
    let hash = vec.hash();
    let mut scores = Vec::with_capacity(test_y.len());
    for (i, tr) in data.test.iter().enumerate() {
        for t in 1..=tr.len() {
            let recs = scrambled_records(tr, t, scramble_seed(config.seed.wrapping_add(2), i, t))?;
            let steps: Vec<SparseVec> =
                recs.iter().map(|r| vec.encode(&crate::stepview::serialize_record(r))).collect();
            let (s, _) = model.score_prefix(&hash, &steps)?;
            scores.push(*s.last().expect("nonempty prefix"));
        }
    }
    let mut report = score_report(ControlKind::Scrambled, &scores, &test_y, prefix_labels(&data.train, h).len())?;
    report.reference_ap = Some(reference_ap);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditProtocol {
    AllPrefix,
    MatchedNonterminal,
}

impl FromStr for AuditProtocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_prefix" => Ok(AuditProtocol::AllPrefix),
            "matched_nonterminal" => Ok(AuditProtocol::MatchedNonterminal),
            other => Err(Error::invalid(format!("unknown audit protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditPrefix {
    pub trajectory_id: String,
    pub t: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpeAuditSet {
    pub protocol: AuditProtocol,
    pub horizon: usize,
    pub positives: Vec<AuditPrefix>,
    pub negatives: Vec<AuditPrefix>,
}

fn truncate_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Visible text of one step: status, action and result only, capped per step.
pub fn audit_step_text(record: &StepViewRecord) -> String {
    let joined = [record.status.as_str(), record.action_text.as_str(), record.result_text.as_str()]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ");
    truncate_chars(&joined, AUDIT_STEP_CHARS).to_string()
}

/// Audit prefixes under the given protocol, with texts built from observed fields only.
pub fn build_mpe_audit_set(dataset: &[&StepViewTrajectory], protocol: AuditProtocol, horizon: usize) -> Result<MpeAuditSet> {
    let mut set = MpeAuditSet { protocol, horizon, positives: Vec::new(), negatives: Vec::new() };
    for tr in dataset {
        let big_t = tr.len();
        let failed = tr.outcome.failed();
        let labels = warning_labels(big_t, failed, horizon);
        let mut text = String::new();
        for t in 1..=big_t {
            if t > 1 {
                text.push('\n');
            }
            text.push_str(&audit_step_text(&tr.stepview[t - 1]));
            let positive = match protocol {
                AuditProtocol::AllPrefix => labels[t - 1] == 1,
                AuditProtocol::MatchedNonterminal => {
                    if t == big_t || t + horizon < big_t {
                        continue;
                    }
                    failed
                }
            };
            let item = AuditPrefix {
                trajectory_id: tr.trajectory_id.clone(),
                t,
                text: truncate_chars(&text, AUDIT_PREFIX_CHARS).to_string(),
            };
            if positive {
                set.positives.push(item);
            } else {
                set.negatives.push(item);
            }
        }
    }
    if set.positives.is_empty() || set.negatives.is_empty() {
        return Err(Error::invalid(format!(
            "{protocol:?} audit set has an empty class ({} positive, {} negative prefixes)",
            set.positives.len(),
            set.negatives.len()
        )));
    }
    Ok(set)
}

impl MpeAuditSet {
    pub fn texts_and_labels(&self) -> (Vec<&str>, Vec<u8>) {
        let texts = self.positives.iter().chain(&self.negatives).map(|p| p.text.as_str()).collect();
        let labels = std::iter::repeat_n(1u8, self.positives.len()).chain(std::iter::repeat_n(0u8, self.negatives.len())).collect();
        (texts, labels)
    }

    pub fn positive_rate(&self) -> f64 {
        self.positives.len() as f64 / (self.positives.len() + self.negatives.len()) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpeAuditReport {
    pub protocol: AuditProtocol,
    pub train_prefixes: usize,
    pub test_positive: usize,
    pub test_negative: usize,
    /// Positive rate inside the test audit sample.
    pub audit_rate: f64,
    pub probe_converged: bool,
    pub result: MpeResult,
}

/// Fits the independent TF-IDF + logistic probe on `train`, scores `test`, and estimates the
/// observable-positive fraction with a bootstrap interval.
pub fn run_mpe_audit(
    train: &MpeAuditSet,
    test: &MpeAuditSet,
    trim: f64,
    replicates: usize,
    seed: u64,
    logistic: &LogisticConfig,
) -> Result<MpeAuditReport> {
    let (train_text, train_y) = train.texts_and_labels();
    let vec = fit_probe_vectorizer(&train_text)?;
    let x: Vec<SparseVec> = train_text.iter().map(|s| vec.encode(s)).collect();
    let model = fit_logistic(&x, vec.dim(), &train_y, &LogisticConfig { seed, ..*logistic })?;
    let score = |p: &AuditPrefix| model.predict(&vec.encode(&p.text));
    let pos: Vec<f64> = test.positives.iter().map(score).collect();
    let neg: Vec<f64> = test.negatives.iter().map(score).collect();
    Ok(MpeAuditReport {
        protocol: test.protocol,
        train_prefixes: train_y.len(),
        test_positive: pos.len(),
        test_negative: neg.len(),
        audit_rate: test.positive_rate(),
        probe_converged: model.converged,
        result: mpe_bootstrap(&pos, &neg, trim, replicates, seed)?,
    })
}

pub const DEFAULT_EVIDENCE_PATTERN: &str =
    r"(?i)(error|fail|exception|traceback|denied|timeout|timed out|not found|exceeded|exhausted)";

/// Share of positive and negative audit prefixes whose visible text matches `pattern`.
pub fn explicit_evidence_rates(set: &MpeAuditSet, pattern: &Regex) -> (f64, f64) {
    let rate = |xs: &[AuditPrefix]| xs.iter().filter(|p| pattern.is_match(&p.text)).count() as f64 / xs.len().max(1) as f64;
    (rate(&set.positives), rate(&set.negatives))
}

/// Per-kind reports keyed by control name, for JSON export.
pub fn control_table(reports: &[ControlReport]) -> BTreeMap<String, ControlReport> {
    reports.iter().map(|r| (r.kind.to_string(), r.clone())).collect()
}
