//! Composite differentiable blocks built from tape primitives, plus plain-value loss helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{softmax_in_place, softplus, Tape, Var, BCE_EPS, NORM_EPS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelMode {
    Sampled,
    Deterministic,
}

/// Standard Gumbel noise of the given shape.
pub fn sample_gumbel<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Row-wise `softmax((logits + noise) / tau)` on the tape. `noise = None` is the deterministic path.
pub fn gumbel_softmax_rows(tape: &mut Tape, logits: Var, tau: f64, noise: Option<&Tensor>) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("gumbel temperature must be positive, got {tau}")));
    }
    if !tape.value(logits).is_finite() {
        return Err(Error::NonFinite("gumbel-softmax logits".into()));
    }
    let shifted = match noise {
        Some(n) => tape.add_const(logits, n)?,
        None => logits,
    };
    let scaled = tape.scale(shifted, 1.0 / tau);
    Ok(tape.softmax_rows(scaled))
}

/// Gumbel-softmax of a single logit vector.
pub fn gumbel_softmax(logits: &[f64], tau: f64, mode: GumbelMode, seed: u64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("gumbel temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gumbel-softmax logits".into()));
    }
    let mut out = logits.to_vec();
    if mode == GumbelMode::Sampled {
        let noise = sample_gumbel(&mut ChaCha8Rng::seed_from_u64(seed), 1, logits.len());
        for (x, g) in out.iter_mut().zip(noise.data()) {
            *x += g;
        }
    }
    for x in out.iter_mut() {
        *x /= tau;
    }
    softmax_in_place(&mut out);
    Ok(out)
}

/// Weights of a single-layer GRU cell. Gate matrices act on `[x; h]` and have shape `(in + hidden) x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub b_h: Tensor,
}

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(input + hidden, hidden);
        let b = || Tensor::zeros(1, hidden);
        GruWeights { w_z: w(), b_z: b(), w_r: w(), b_r: b(), w_h: w(), b_h: b() }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.cols()
    }

    pub fn input(&self) -> usize {
        self.w_z.rows() - self.hidden()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_z, &self.b_z, &self.w_r, &self.b_r, &self.w_h, &self.b_h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.w_z, &mut self.b_z, &mut self.w_r, &mut self.b_r, &mut self.w_h, &mut self.b_h]
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        let rows = self.w_z.rows();
        for (w, b) in [(&self.w_z, &self.b_z), (&self.w_r, &self.b_r), (&self.w_h, &self.b_h)] {
            if w.shape() != (rows, h) || b.shape() != (1, h) || rows < h {
                return Err(Error::Shape { op: "gru_cell", detail: "inconsistent gate shapes".into() });
            }
        }
        Ok(())
    }

    /// Put the weights on the tape as trainable leaves.
    pub fn to_params(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            w_z: tape.param(self.w_z.clone()),
            b_z: tape.param(self.b_z.clone()),
            w_r: tape.param(self.w_r.clone()),
            b_r: tape.param(self.b_r.clone()),
            w_h: tape.param(self.w_h.clone()),
            b_h: tape.param(self.b_h.clone()),
        }
    }

    pub fn to_constants(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            w_z: tape.constant(self.w_z.clone()),
            b_z: tape.constant(self.b_z.clone()),
            w_r: tape.constant(self.w_r.clone()),
            b_r: tape.constant(self.b_r.clone()),
            w_h: tape.constant(self.w_h.clone()),
            b_h: tape.constant(self.b_h.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w_z, self.b_z, self.w_r, self.b_r, self.w_h, self.b_h]
    }
}

/// One GRU step over a batch: `x` is `B x in`, `h` is `B x hidden`.
pub fn gru_cell_tape(tape: &mut Tape, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let xh = tape.concat_cols(x, h)?;
    let z_pre = tape.matmul(xh, p.w_z)?;
    let z_pre = tape.add_row(z_pre, p.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.matmul(xh, p.w_r)?;
    let r_pre = tape.add_row(r_pre, p.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat_cols(x, rh)?;
    let c_pre = tape.matmul(xrh, p.w_h)?;
    let c_pre = tape.add_row(c_pre, p.b_h)?;
    let c = tape.tanh(c_pre);
    // (1 - z) * h + z * c  ==  h + z * (c - h)
    let diff = tape.sub(c, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// One GRU step on plain vectors.
pub fn gru_cell(x: &[f64], h: &[f64], weights: &GruWeights) -> Result<Vec<f64>> {
    weights.check()?;
    if x.len() != weights.input() || h.len() != weights.hidden() {
        return Err(Error::Shape {
            op: "gru_cell",
            detail: format!(
                "input {} / hidden {} for cell {}x{}",
                x.len(),
                h.len(),
                weights.input(),
                weights.hidden()
            ),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::row_vector(x.to_vec()));
    let hv = tape.constant(Tensor::row_vector(h.to_vec()));
    let p = weights.to_constants(&mut tape);
    let out = gru_cell_tape(&mut tape, xv, hv, &p)?;
    Ok(tape.value(out).data().to_vec())
}

/// Soft-FSM step over a batch. `q` is `B x Q`, `alpha` is `B x K`, `t_soft` is `K x (Q*Q)` holding
/// the nonnegative (post-softplus) transition matrices row-major.
pub fn fsm_update_tape(tape: &mut Tape, q: Var, alpha: Var, t_soft: Var) -> Result<Var> {
    let mixed = tape.matmul(alpha, t_soft)?;
    let next = tape.batched_vec_mat(q, mixed)?;
    tape.row_l1_normalize(next)
}

/// Soft-FSM step on plain values; `transitions` holds `K` unconstrained `Q x Q` matrices.
pub fn fsm_update(q: &[f64], alpha: &[f64], transitions: &[Tensor]) -> Result<Vec<f64>> {
    let nq = q.len();
    if alpha.len() != transitions.len() || transitions.iter().any(|t| t.shape() != (nq, nq)) {
        return Err(Error::Shape {
            op: "fsm_update",
            detail: format!("q {nq}, alpha {}, {} transition matrices", alpha.len(), transitions.len()),
        });
    }
    let mut next = vec![0.0; nq];
    for (&a, t) in alpha.iter().zip(transitions) {
        for (i, &qi) in q.iter().enumerate() {
            for (j, o) in next.iter_mut().enumerate() {
                *o += a * qi * softplus(t.get(i, j));
            }
        }
    }
    let s: f64 = next.iter().map(|x| x.abs()).sum();
    if !(s >= NORM_EPS) {
        return Err(Error::Degenerate("state distribution l1 norm below epsilon"));
    }
    Ok(next.into_iter().map(|x| x / s).collect())
}

/// Per-trajectory mean BCE with clamped scores.
pub fn bce_prefix_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "bce_prefix_loss",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    if scores.is_empty() {
        return Err(Error::invalid("bce_prefix_loss on an empty trajectory"));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &p)| {
            let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(p * s.ln() + (1.0 - p) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `mean_t H(alpha_t) - beta * H(mean_t alpha_t)`.
pub fn balance_loss(alphas: &[Vec<f64>], beta: f64) -> Result<f64> {
    let Some(first) = alphas.first() else {
        return Err(Error::invalid("balance_loss needs at least one assignment"));
    };
    let k = first.len();
    if alphas.iter().any(|a| a.len() != k) {
        return Err(Error::Shape { op: "balance_loss", detail: "ragged assignments".into() });
    }
    let n = alphas.len() as f64;
    let mut mean = vec![0.0; k];
    let mut h = 0.0;
    for a in alphas {
        h += entropy(a);
        for (m, x) in mean.iter_mut().zip(a) {
            *m += x / n;
        }
    }
    Ok(h / n - beta * entropy(&mean))
}

/// Tape version of [`balance_loss`] over the rows of `alpha` (`N x K`).
pub fn balance_loss_tape(tape: &mut Tape, alpha: Var, beta: f64) -> Result<Var> {
    let n = tape.value(alpha).rows();
    let ent = tape.row_entropy(alpha);
    let ent_sum = tape.sum(ent);
    let mean_ent = tape.scale(ent_sum, 1.0 / n as f64);
    let marginal = tape.mean_rows(alpha)?;
    let marg_ent = tape.row_entropy(marginal);
    let marg_ent = tape.sum(marg_ent);
    let weighted = tape.scale(marg_ent, beta);
    tape.sub(mean_ent, weighted)
}
