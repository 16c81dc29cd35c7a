//! AUPRC observability ceiling, its precision envelope and inverse, a sampler for instances
//! that attain it, and mixture-proportion estimation of the observable-positive fraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ScoredPrefix, ScoredPrefixSet};

pub const REQUIRED_PI_TOL: f64 = 1e-6;
pub const DEFAULT_TRIM: f64 = 0.2;
pub const DEFAULT_REPLICATES: usize = 200;

/// Observable fraction `pi` and positive-prefix rate `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeilingQuery {
    pub pi: f64,
    pub r: f64,
}

impl CeilingQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::invalid(format!("positive rate r = {} must lie in (0,1)", self.r)));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::invalid(format!("observable fraction pi = {} must lie in [0,1]", self.pi)));
        }
        Ok(())
    }

    pub fn ceiling(&self) -> Result<f64> {
        ceiling(self.pi, self.r)
    }
}

/// Largest population AUPRC attainable when only a fraction `pi` of positives is
/// distinguishable from negatives, at positive rate `r`.
pub fn ceiling(pi: f64, r: f64) -> Result<f64> {
    CeilingQuery { pi, r }.validate()?;
    if pi == 0.0 {
        return Ok(r);
    }
    if pi == 1.0 {
        return Ok(1.0);
    }
    let d = 1.0 - pi * r;
    Ok(pi
        + r * (1.0 - pi) * (1.0 - pi) / d
        + r * pi * (1.0 - pi) * (1.0 - r) / (d * d) * (1.0 / (pi * r)).ln())
}

/// Maximum precision at recall `s`: observable positives are ranked first, then hidden
/// positives tie with negatives.
pub fn prec_max(s: f64, pi: f64, r: f64) -> f64 {
    if s <= pi {
        return 1.0;
    }
    let tp = r * s * (1.0 - pi);
    tp / (tp + (1.0 - r) * (s - pi))
}

/// Smallest `pi` whose ceiling reaches the achieved AUPRC `a`, by bisection.
pub fn required_pi(a: f64, r: f64) -> Result<f64> {
    CeilingQuery { pi: 0.0, r }.validate()?;
    if !(a >= r - REQUIRED_PI_TOL && a <= 1.0 + REQUIRED_PI_TOL) {
        return Err(Error::invalid(format!("achieved AUPRC {a} outside [r, 1] for r = {r}")));
    }
    if a <= r {
        return Ok(0.0);
    }
    if a >= 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > REQUIRED_PI_TOL {
        let mid = 0.5 * (lo + hi);
        if ceiling(mid, r)? >= a {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Scored prefixes from the disjoint-support construction: observable positives score in
/// (1,2), hidden positives and negatives share (0,1).
pub fn sample_tight_instance(pi: f64, r: f64, n: usize, seed: u64) -> Result<ScoredPrefixSet> {
    CeilingQuery { pi, r }.validate()?;
    if n == 0 {
        return Err(Error::invalid("tight instance needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let positive = rng.random_bool(r);
            let observable = positive && rng.random_bool(pi);
            let u: f64 = rng.random();
            ScoredPrefix {
                trajectory_id: format!("tight-{i}"),
                t: 1,
                length: 1,
                failed: positive,
                label: positive as u8,
                score: if observable { 1.0 + u } else { u },
                abstain: false,
            }
        })
        .collect();
    Ok(ScoredPrefixSet { records })
}

/// (pi, r, ceiling) rows for plotting ceiling curves.
pub fn ceiling_csv(pis: &[f64], rs: &[f64]) -> Result<String> {
    let mut out = String::from("pi,r,ceiling\n");
    for &r in rs {
        for &pi in pis {
            out.push_str(&format!("{pi},{r},{}\n", ceiling(pi, r)?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpeResult {
    pub pi_hat: f64,
    pub kappa_hat: f64,
    pub trim: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<ConfidenceInterval>,
    #[serde(default)]
    pub replicates: usize,
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("MPE scores".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Minimum of F+(t)/F-(t) over pooled support points with F-(t) >= trim.
fn kappa_sorted(pos: &[f64], neg: &[f64], trim: f64) -> f64 {
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = f64::INFINITY;
    while i < pos.len() || j < neg.len() {
        let t = match (pos.get(i), neg.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < pos.len() && pos[i] <= t {
            i += 1;
        }
        while j < neg.len() && neg[j] <= t {
            j += 1;
        }
        let fm = j as f64 / nn;
        if fm >= trim {
            best = best.min((i as f64 / np) / fm);
        }
    }
    best
}

/// Trimmed lower-tail CDF-ratio estimate of the observable-positive fraction.
pub fn mpe_estimate(positive: &[f64], negative: &[f64], trim: f64) -> Result<MpeResult> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::invalid(format!(
            "MPE needs both score arrays nonempty ({} positive, {} negative)",
            positive.len(),
            negative.len()
        )));
    }
    if !(0.0..=1.0).contains(&trim) {
        return Err(Error::invalid(format!("tail trim {trim} outside [0,1]")));
    }
    let kappa = kappa_sorted(&sorted(positive)?, &sorted(negative)?, trim);
    Ok(MpeResult {
        pi_hat: 1.0 - kappa.clamp(0.0, 1.0),
        kappa_hat: kappa,
        trim,
        n_positive: positive.len(),
        n_negative: negative.len(),
        ci: None,
        replicates: 0,
    })
}

/// Linear-interpolation percentile of sorted values, `q` in [0,1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Point estimate plus a percentile (2.5, 97.5) bootstrap interval; positives and negatives
/// are resampled independently.
pub fn mpe_bootstrap(positive: &[f64], negative: &[f64], trim: f64, replicates: usize, seed: u64) -> Result<MpeResult> {
    let mut point = mpe_estimate(positive, negative, trim)?;
    if replicates == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..replicates)
        .map(|_| {
            let p: Vec<f64> = (0..positive.len()).map(|_| positive[rng.random_range(0..positive.len())]).collect();
            let n: Vec<f64> = (0..negative.len()).map(|_| negative[rng.random_range(0..negative.len())]).collect();
            let mut p = p;
            let mut n = n;
            p.sort_by(f64::total_cmp);
            n.sort_by(f64::total_cmp);
            1.0 - kappa_sorted(&p, &n, trim).clamp(0.0, 1.0)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    point.ci = Some(ConfidenceInterval { lower: percentile(&stats, 0.025), upper: percentile(&stats, 0.975) });
    point.replicates = replicates;
    Ok(point)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub pi_e: f64,
    pub degenerate: bool,
}

/// Observable fraction implied by explicit failure-evidence rates among positive (`q_plus`)
/// and negative (`q_minus`) prefixes.
pub fn explicit_evidence_anchor(q_plus: f64, q_minus: f64) -> Result<AnchorResult> {
    for (name, q) in [("q_plus", q_plus), ("q_minus", q_minus)] {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("{name} = {q} outside [0,1]")));
        }
    }
    if q_minus == 1.0 {
        return Ok(AnchorResult { pi_e: 0.0, degenerate: true });
    }
    Ok(AnchorResult { pi_e: ((q_plus - q_minus) / (1.0 - q_minus)).max(0.0), degenerate: false })
}
