//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use prefixguard::automaton::{
    ambiguity_filter, calibrate_state_risks, induce_dfa, FallbackRisk, LabeledSequence, StateLabel, SymbolTrajectory,
};
use prefixguard::diffcore::{
    balance_loss_tape, fsm_update_tape, grad_check, gru_cell_tape, gumbel_softmax_rows, sample_gumbel, CsrMatrix,
    GruVars, Tape, Tensor, Var,
};
use prefixguard::metrics::{auroc, average_precision, brier, ece, first_alert_diagnostics, TrajectoryScores};
use prefixguard::monitor::{Backend, EncodedTrajectory, MonitorConfig, MonitorModel};
use prefixguard::observability::{
    ceiling, explicit_evidence_anchor, mpe_bootstrap, mpe_estimate, prec_max, required_pi, sample_tight_instance,
    DEFAULT_TRIM,
};
use prefixguard::trace_model::{label_prefixes, warning_labels, Outcome, RawTrajectory};

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_ceiling_exactness() -> Verdict {
    let want = 2.0 / 3.0 + 4f64.ln() / 9.0;
    let got = ceiling(0.5, 0.5).map_err(|e| e.to_string())?;
    check((got - want).abs() <= 1e-9, || format!("A(0.5,0.5) = {got}, want {want}"))?;
    for r in [0.07, 0.089, 0.092, 0.363] {
        let lo = ceiling(0.0, r).map_err(|e| e.to_string())?;
        let hi = ceiling(1.0, r).map_err(|e| e.to_string())?;
        check(lo == r && hi == 1.0, || format!("endpoints at r={r}: A(0)={lo}, A(1)={hi}"))?;
    }
    Ok(format!("A(0.5,0.5) = {got:.12}"))
}

fn c2_required_pi() -> Verdict {
    let cases = [(0.900, 0.363, 0.776), (0.696, 0.089, 0.621), (0.533, 0.092, 0.430), (0.557, 0.070, 0.478)];
    let mut got = Vec::new();
    for (a, r, want) in cases {
        let pi = required_pi(a, r).map_err(|e| e.to_string())?;
        check((pi - want).abs() <= 1e-3, || format!("required_pi({a}, {r}) = {pi}, want {want}"))?;
        got.push(format!("{pi:.4}"));
    }
    Ok(got.join(" "))
}

fn c3_tightness() -> Verdict {
    let mut out = Vec::new();
    for (i, (pi, r)) in [(0.3, 0.1), (0.5, 0.5), (0.8, 0.363)].into_iter().enumerate() {
        let set = sample_tight_instance(pi, r, 200_000, 100 + i as u64).map_err(|e| e.to_string())?;
        let (s, l) = set.ranked();
        let ap = average_precision(&s, &l).map_err(|e| e.to_string())?;
        let want = ceiling(pi, r).map_err(|e| e.to_string())?;
        check((ap - want).abs() <= 0.01, || format!("({pi},{r}): AP {ap} vs ceiling {want}"))?;
        out.push(format!("|AP-A|={:.4}", (ap - want).abs()));
    }
    Ok(out.join(" "))
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, 1e-11, 50)
}

fn c4_envelope() -> Verdict {
    let mut worst: f64 = 0.0;
    for r in [0.07, 0.089, 0.092, 0.363] {
        for i in 0..100 {
            let pi = i as f64 / 99.0;
            let f = |s: f64| prec_max(s, pi, r);
            // The envelope has a kink at s = pi.
            let area = integrate(&f, 0.0, pi) + integrate(&f, pi, 1.0);
            let want = ceiling(pi, r).map_err(|e| e.to_string())?;
            worst = worst.max((area - want).abs());
            check((area - want).abs() <= 1e-6, || format!("pi={pi}, r={r}: quadrature {area} vs {want}"))?;
        }
    }
    Ok(format!("max |quad - A| = {worst:.2e}"))
}

fn ap_oracle(s: &[f64], l: &[u8]) -> f64 {
    let p = l.iter().filter(|&&y| y == 1).count() as f64;
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for &t in &thresholds {
        let (mut tp, mut k) = (0.0, 0.0);
        for (&x, &y) in s.iter().zip(l) {
            if x >= t {
                k += 1.0;
                tp += y as f64;
            }
        }
        let recall = tp / p;
        ap += (recall - prev_recall) * (tp / k);
        prev_recall = recall;
    }
    ap
}

fn auroc_oracle(s: &[f64], l: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (&a, &ya) in s.iter().zip(l) {
        for (&b, &yb) in s.iter().zip(l) {
            if ya == 1 && yb == 0 {
                pairs += 1.0;
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn ece_oracle(s: &[f64], l: &[u8], bins: usize) -> f64 {
    let n = s.len() as f64;
    let mut total = 0.0;
    for m in 1..=bins {
        let (lo, hi) = ((m - 1) as f64 / bins as f64, m as f64 / bins as f64);
        let members: Vec<usize> = (0..s.len()).filter(|&i| (s[i] > lo || (m == 1 && s[i] >= 0.0)) && s[i] <= hi).collect();
        if members.is_empty() {
            continue;
        }
        let c = members.len() as f64;
        let conf: f64 = members.iter().map(|&i| s[i]).sum::<f64>() / c;
        let acc: f64 = members.iter().map(|&i| l[i] as f64).sum::<f64>() / c;
        total += c / n * (acc - conf).abs();
    }
    total
}

fn c5_metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for set in 0..50 {
        let n = rng.random_range(2..=2000);
        let ties = set % 2 == 0;
        let levels = rng.random_range(2..12);
        let mut s: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random();
                if ties {
                    (x * levels as f64).floor() / levels as f64
                } else {
                    x
                }
            })
            .collect();
        let mut l: Vec<u8> = (0..n).map(|i| u8::from(rng.random_bool((0.2 + 0.6 * s[i]).min(1.0)))).collect();
        l[0] = 1;
        l[1] = 0;
        if set % 7 == 0 {
            s[0] = 0.0;
            s[1] = 1.0;
        }
        let pairs = [
            ("ap", average_precision(&s, &l).map_err(|e| e.to_string())?, ap_oracle(&s, &l)),
            ("auroc", auroc(&s, &l).map_err(|e| e.to_string())?, auroc_oracle(&s, &l)),
            ("ece", ece(&s, &l, 15).map_err(|e| e.to_string())?, ece_oracle(&s, &l, 15)),
            (
                "brier",
                brier(&s, &l).map_err(|e| e.to_string())?,
                s.iter().zip(&l).map(|(&x, &y)| (x - y as f64) * (x - y as f64)).sum::<f64>() / n as f64,
            ),
        ];
        for (name, got, want) in pairs {
            worst = worst.max((got - want).abs());
            check((got - want).abs() <= 1e-12, || format!("set {set} (n={n}): {name} {got} vs oracle {want}"))?;
        }
    }
    Ok(format!("50 sets, max deviation {worst:.1e}"))
}

type Build = dyn Fn(&mut Tape, &[Var]) -> prefixguard::Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, (r, c): (usize, usize), lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative gradient error of `sum(build(inputs) * W)` for a fixed random `W`.
fn op_error(seed: u64, shapes: &[(usize, usize)], range: (f64, f64), build: &Build) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|&s| random_tensor(&mut rng, s, range.0, range.1)).collect();
    let weight_seed: u64 = rng.random();
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let f = |x: &[f64]| -> prefixguard::Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for &(r, c) in shapes {
            vars.push(tape.param(Tensor::from_vec(r, c, x[off..off + r * c].to_vec())?));
            off += r * c;
        }
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape();
        let w = tape.constant(random_tensor(&mut ChaCha8Rng::seed_from_u64(weight_seed), shape, -1.0, 1.0));
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        let grads = tape.backward(loss)?;
        let mut g = Vec::new();
        for (&v, &s) in vars.iter().zip(shapes) {
            g.extend_from_slice(grads.get_or_zeros(v, s).data());
        }
        Ok((tape.value(loss).item(), g))
    };
    grad_check(f, &point, 1e-5).map(|r| r.max_rel_error).map_err(|e| e.to_string())
}

fn sparse_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<(u32, f64)>> {
    (0..n)
        .map(|_| {
            let mut v: Vec<(u32, f64)> = Vec::new();
            for j in 0..dim as u32 {
                if rng.random_bool(0.5) {
                    v.push((j, rng.random_range(0.1..1.0)));
                }
            }
            if v.is_empty() {
                v.push((0, 1.0));
            }
            v
        })
        .collect()
}

fn monitor_loss_error(backend: Backend, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6;
    let traj = |rng: &mut ChaCha8Rng, id: &str, len: usize, failed: bool| EncodedTrajectory {
        trajectory_id: id.into(),
        failed,
        steps: sparse_rows(rng, len, dim),
        labels: warning_labels(len, failed, 2),
    };
    let a = traj(&mut rng, "a", 6, true);
    let b = traj(&mut rng, "b", 3, false);
    let config = MonitorConfig {
        alphabet_size: 3,
        state_budget: Some(3),
        hidden_width: 5,
        backend,
        max_seq_len: 4,
        ..MonitorConfig::default()
    };
    let mut model = MonitorModel::init(&config, dim, "h", 0.3).map_err(|e| e.to_string())?;
    for p in &mut model.params {
        for x in p.data_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
    let noise_seed: u64 = rng.random();
    let point: Vec<f64> = model.params.iter().flat_map(|p| p.data().to_vec()).collect();
    let f = |x: &[f64]| -> prefixguard::Result<(f64, Vec<f64>)> {
        let mut m = model.clone();
        let mut off = 0;
        for p in &mut m.params {
            let n = p.data().len();
            p.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        let l = m.batch_loss(&[&a, &b], Some(noise_seed))?;
        Ok((l.total, l.grads.iter().flat_map(|g| g.data().to_vec()).collect()))
    };
    // Central differences at 1e-5 are roundoff-dominated on near-zero components of the full loss.
    grad_check(f, &point, 1e-4).map(|r| r.max_rel_error).map_err(|e| e.to_string())
}

fn c6_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let csr = CsrMatrix::from_rows(&sparse_rows(&mut rng, 3, 5), 5).map_err(|e| e.to_string())?;
    let c = Tensor::from_vec(2, 2, vec![0.1, -0.4, 2.0, 0.0]).unwrap();
    let noise = sample_gumbel(&mut ChaCha8Rng::seed_from_u64(9), 3, 4);
    let gru_shapes = [(2, 8), (2, 8), (16, 8), (1, 8), (16, 8), (1, 8), (16, 8), (1, 8)];
    let ops: Vec<(&str, Vec<(usize, usize)>, (f64, f64), Box<Build>)> = vec![
        ("matmul", vec![(3, 4), (4, 2)], (-1.0, 1.0), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("sparse_matmul", vec![(5, 3)], (-1.0, 1.0), Box::new(move |t, v| t.sparse_matmul(csr.clone(), v[0]))),
        ("add_row", vec![(3, 4), (1, 4)], (-1.0, 1.0), Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("add", vec![(2, 3), (2, 3)], (-1.0, 1.0), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![(2, 3), (2, 3)], (-1.0, 1.0), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![(2, 3), (2, 3)], (-1.0, 1.0), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![(2, 3)], (-1.0, 1.0), Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        ("add_const", vec![(2, 2)], (-1.0, 1.0), Box::new(move |t, v| t.add_const(v[0], &c))),
        ("sigmoid", vec![(3, 3)], (-3.0, 3.0), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", vec![(3, 3)], (-2.0, 2.0), Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("gelu", vec![(3, 3)], (-3.0, 3.0), Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("softplus", vec![(3, 3)], (-3.0, 3.0), Box::new(|t, v| Ok(t.softplus(v[0])))),
        ("softmax_rows", vec![(3, 5)], (-2.0, 2.0), Box::new(|t, v| Ok(t.softmax_rows(v[0])))),
        ("concat_cols", vec![(2, 3), (2, 2)], (-1.0, 1.0), Box::new(|t, v| t.concat_cols(v[0], v[1]))),
        ("gather_rows", vec![(4, 3)], (-1.0, 1.0), Box::new(|t, v| t.gather_rows(v[0], vec![2, 0, 2, 3]))),
        ("slice_rows", vec![(4, 3)], (-1.0, 1.0), Box::new(|t, v| t.slice_rows(v[0], 2))),
        ("mean_rows", vec![(4, 3)], (-1.0, 1.0), Box::new(|t, v| t.mean_rows(v[0]))),
        ("sum", vec![(4, 3)], (-1.0, 1.0), Box::new(|t, v| Ok(t.sum(v[0])))),
        ("row_l1_normalize", vec![(3, 4)], (0.1, 2.0), Box::new(|t, v| t.row_l1_normalize(v[0]))),
        ("batched_vec_mat", vec![(2, 3), (2, 9)], (-1.0, 1.0), Box::new(|t, v| t.batched_vec_mat(v[0], v[1]))),
        (
            "weighted_bce",
            vec![(2, 3)],
            (0.05, 0.95),
            Box::new(|t, v| {
                t.weighted_bce(v[0], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0.5, 1.0, 0.25, 2.0, 1.0, 0.0])
            }),
        ),
        ("row_entropy", vec![(3, 4)], (0.05, 1.0), Box::new(|t, v| Ok(t.row_entropy(v[0])))),
        (
            "balance_loss",
            vec![(5, 4)],
            (-2.0, 2.0),
            Box::new(|t, v| {
                let a = t.softmax_rows(v[0]);
                balance_loss_tape(t, a, 1.0)
            }),
        ),
        ("gumbel_softmax", vec![(3, 4)], (-2.0, 2.0), Box::new(move |t, v| gumbel_softmax_rows(t, v[0], 0.5, Some(&noise)))),
        (
            "gru_cell",
            gru_shapes.to_vec(),
            (-0.8, 0.8),
            Box::new(|t, v| {
                let p = GruVars { w_z: v[2], b_z: v[3], w_r: v[4], b_r: v[5], w_h: v[6], b_h: v[7] };
                gru_cell_tape(t, v[0], v[1], &p)
            }),
        ),
        (
            "fsm_update",
            vec![(2, 4), (2, 3), (3, 16)],
            (-1.5, 1.5),
            Box::new(|t, v| {
                let q = t.softmax_rows(v[0]);
                let a = t.softmax_rows(v[1]);
                let ts = t.softplus(v[2]);
                fsm_update_tape(t, q, a, ts)
            }),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, shapes, range, build) in &ops {
        for seed in 0..20 {
            let e = op_error(seed, shapes, *range, build.as_ref())?;
            worst = worst.max(e);
            check(e < 1e-5, || format!("{name} seed {seed}: relative error {e}"))?;
        }
    }
    for backend in [Backend::Gru, Backend::Fsm] {
        for seed in 0..20 {
            let e = monitor_loss_error(backend, seed)?;
            worst = worst.max(e);
            check(e < 1e-5, || format!("monitor loss {backend:?} seed {seed}: relative error {e}"))?;
        }
    }
    Ok(format!("{} ops + 2 monitor losses x 20 seeds, max rel error {worst:.1e}", ops.len()))
}

fn c7_labeling() -> Verdict {
    let mut cases = 0;
    for t_len in 1..=20usize {
        for h in 1..=5usize {
            for y in [0u8, 1] {
                let raw = RawTrajectory {
                    trajectory_id: format!("t{t_len}"),
                    task_id: "task".into(),
                    outcome: if y == 1 { Outcome::Success } else { Outcome::Failure },
                    steps: vec![Value::Null; t_len],
                };
                let labels = label_prefixes(&raw, h).map_err(|e| e.to_string())?.labels;
                let positives: Vec<usize> = (1..=t_len).filter(|&t| labels[t - 1] == 1).collect();
                let want_count = (1 - y as usize) * (h + 1).min(t_len);
                let want: Vec<usize> = if y == 1 { vec![] } else { (t_len.saturating_sub(h).max(1)..=t_len).collect() };
                check(labels.len() == t_len && positives.len() == want_count && positives == want, || {
                    format!("T={t_len} H={h} y={y}: positives {positives:?}, want {want:?}")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases"))
}

/// Synthetic corpus, splits, StepView conversion and a trained GRU, shared by criteria 8 and 12.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    prefixguard_cli::run_args(args).map_err(|e| format!("`prefixguard {}` failed: {e}", args.join(" ")))
}

fn read_value(path: &str) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))
}

fn num(v: &Value, ptr: &str) -> Result<f64, String> {
    v.pointer(ptr).and_then(Value::as_f64).ok_or_else(|| format!("missing {ptr}"))
}

static WORKSPACE: OnceLock<Result<Workspace, String>> = OnceLock::new();

fn workspace() -> Result<&'static Workspace, String> {
    WORKSPACE
        .get_or_init(|| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let ws = Workspace { root: dir.path().to_path_buf(), _dir: dir };
            let (corpus, adapter, splits, sv) = (ws.p("corpus.jsonl"), ws.p("adapter.json"), ws.p("splits.json"), ws.p("sv.jsonl"));
            cli(&[
                "synth", "--out", &corpus, "--count", "2000", "--failure-rate", "0.3", "--precursor-probability", "0.9",
                "--seed", "0", "--adapter-out", &adapter,
            ])?;
            cli(&["split", "--corpus", &corpus, "--out", &splits, "--seed", "0"])?;
            cli(&["convert", "--corpus", &corpus, "--adapter", &adapter, "--out", &sv])?;
            cli(&["train", "--stepview", &sv, "--splits", &splits, "--out", &ws.p("model_a"), "--seed", "0"])?;
            Ok(ws)
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn c8_signal_recovery() -> Verdict {
    let ws = workspace()?;
    let (sv, splits) = (ws.p("sv.jsonl"), ws.p("splits.json"));
    cli(&["eval", "--model", &ws.p("model_a"), "--stepview", &sv, "--splits", &splits, "--out", &ws.p("eval_a.json")])?;
    let eval = read_value(&ws.p("eval_a.json"))?;
    let (ap, r) = (num(&eval, "/metrics/ap")?, num(&eval, "/metrics/positive_rate")?);

    let shuffled = ws.p("model_shuffled");
    cli(&["train", "--stepview", &sv, "--splits", &splits, "--out", &shuffled, "--seed", "0", "--shuffled-labels"])?;
    cli(&["eval", "--model", &shuffled, "--stepview", &sv, "--splits", &splits, "--out", &ws.p("eval_s.json")])?;
    let ap_shuffled = num(&read_value(&ws.p("eval_s.json"))?, "/metrics/ap")?;

    cli(&["probe", "--stepview", &sv, "--splits", &splits, "--kind", "t_only", "--out", &ws.p("probe.json")])?;
    let probe = read_value(&ws.p("probe.json"))?;
    let ap_t = num(&probe, "/0/ap")?;
    let r_probe = num(&probe, "/0/positive_rate")?;

    let detail = format!("r={r:.3} GRU AP={ap:.3} shuffled AP={ap_shuffled:.3} t_only AP={ap_t:.3}");
    check(ap >= 0.90, || format!("GRU test AP below 0.90: {detail}"))?;
    check((ap_shuffled - r).abs() <= 0.05, || format!("shuffled-label control not near r: {detail}"))?;
    check((ap_t - r_probe).abs() <= 0.05, || format!("t_only control not near r: {detail}"))?;
    Ok(detail)
}

fn product_equivalent(dfa: &prefixguard::automaton::Dfa, truth: &[[usize; 3]], accept: &[bool], depth: usize) -> Option<Vec<usize>> {
    // Breadth-first walk over (truth, learned) state pairs; returns a distinguishing string.
    let mut frontier = vec![(0usize, dfa.initial, Vec::new())];
    let mut seen = std::collections::HashSet::new();
    for _ in 0..=depth {
        let mut next = Vec::new();
        for (q, p, word) in frontier {
            let learned = dfa.states[p].label == Some(StateLabel::Positive);
            if learned != accept[q] {
                return Some(word);
            }
            if !seen.insert((q, p)) {
                continue;
            }
            for a in 0..3 {
                let mut w = word.clone();
                w.push(a);
                next.push((truth[q][a], dfa.step(p, a), w));
            }
        }
        frontier = next;
    }
    None
}

fn c9_dfa() -> Verdict {
    // Failure language: a symbol 2 later followed by a symbol 1.
    let truth = [[0, 0, 1], [1, 2, 1], [2, 2, 2]];
    let accept = [false, false, true];
    let run_truth = |w: &[usize]| accept[w.iter().fold(0, |q, &a| truth[q][a])];
    let mut sample = Vec::new();
    let mut layer: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..=5 {
        let mut next = Vec::new();
        for w in layer {
            sample.push(LabeledSequence { positive: run_truth(&w), symbols: w.clone() });
            for a in 0..3 {
                let mut x = w.clone();
                x.push(a);
                next.push(x);
            }
        }
        layer = next;
    }
    let (dfa, _) = induce_dfa(&sample, 3).map_err(|e| e.to_string())?;
    if let Some(w) = product_equivalent(&dfa, &truth, &accept, 8) {
        return Err(format!("learned DFA disagrees with the planted language on {w:?}"));
    }

    let seq = |s: &[usize], positive| LabeledSequence { symbols: s.to_vec(), positive };
    let noisy = vec![
        seq(&[0, 1], true),
        seq(&[0, 1], false),
        seq(&[0, 1], true),
        seq(&[2], true),
        seq(&[2], true),
        seq(&[1], false),
        seq(&[1, 1], true),
        seq(&[1, 1], false),
    ];
    let mut classes: BTreeMap<&[usize], (bool, bool)> = BTreeMap::new();
    for s in &noisy {
        let e = classes.entry(&s.symbols).or_default();
        if s.positive {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    let want: Vec<LabeledSequence> =
        noisy.iter().filter(|s| !matches!(classes[s.symbols.as_slice()], (true, true))).cloned().collect();
    let (kept, report) = ambiguity_filter(&noisy);
    check(kept == want && report.removed == 5 && report.conflicting_sequences == 2, || {
        format!("ambiguity filter kept {kept:?} ({report:?})")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cal: Vec<SymbolTrajectory> = (0..300)
        .map(|i| SymbolTrajectory {
            trajectory_id: format!("c{i}"),
            failed: rng.random_bool(0.4),
            symbols: (0..rng.random_range(1..12)).map(|_| rng.random_range(0..4)).collect(),
            route: None,
        })
        .collect();
    let calibrated = calibrate_state_risks(&dfa, &cal, 3, 10, FallbackRisk::GlobalPrevalence);
    let (mut count, mut pos) = (vec![0usize; dfa.states.len()], vec![0usize; dfa.states.len()]);
    for t in &cal {
        for (q, y) in dfa.trace(&t.symbols).into_iter().zip(t.labels(3)) {
            count[q] += 1;
            pos[q] += y as usize;
        }
    }
    let total: usize = cal.iter().map(|t| t.symbols.len()).sum();
    let got_count: Vec<usize> = calibrated.states.iter().map(|s| s.count).collect();
    let got_pos: Vec<usize> = calibrated.states.iter().map(|s| s.positives).collect();
    check(got_count == count && got_pos == pos && got_count.iter().sum::<usize>() == total, || {
        format!("routing counts {got_count:?}/{got_pos:?} vs {count:?}/{pos:?}")
    })?;
    Ok(format!("{} live states, equivalent to depth 8; {total} calibration prefixes partitioned", dfa.live_states()))
}

fn c10_first_alert() -> Verdict {
    let series = |id: &str, failed: bool, scores: Vec<f64>| TrajectoryScores {
        trajectory_id: id.into(),
        failed,
        labels: warning_labels(scores.len(), failed, 1),
        scores,
        abstain: Vec::new(),
    };
    let set = vec![
        series("ok", false, vec![0.1, 0.9, 0.2]),
        series("fail_alerted", true, vec![0.1, 0.8, 0.1, 0.1, 0.1, 0.1]),
        series("fail_missed", true, vec![0.1, 0.2, 0.3, 0.1]),
    ];
    let rep = first_alert_diagnostics(&set, 0.5, 1);
    // Alert at step 2 of 6 leaves 4/6 of the run; the missed failure contributes 0.
    let lead = (4.0 / 6.0 + 0.0) / 2.0;
    let want = (Some(1.0), Some(0.5), Some(0.5), Some(0.5), Some(lead));
    let got = (rep.far, rep.fail_alert_recall, rep.early_fail_recall, rep.alert_precision, rep.mean_lead_time);
    check(got == want, || format!("got {got:?}, want {want:?}"))?;
    Ok(format!("FAR 1, recall 0.5, early 0.5, precision 0.5, lead {lead:.4}"))
}

fn normal(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    mean + (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn c11_mpe() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pos: Vec<f64> = (0..5000).map(|_| normal(&mut rng, 0.0)).collect();
    let neg: Vec<f64> = (0..5000).map(|_| normal(&mut rng, 0.0)).collect();
    let null = mpe_estimate(&pos, &neg, DEFAULT_TRIM).map_err(|e| e.to_string())?.pi_hat;
    check(null <= 0.05, || format!("identical distributions: pi_hat {null}"))?;

    // Positives: 0.5 N(2,1) + 0.5 N(0,1); negatives: N(0,1).
    let mixture = |rng: &mut ChaCha8Rng, n: usize| -> (Vec<f64>, Vec<f64>) {
        let pos = (0..n)
            .map(|_| {
                let shift = if rng.random_bool(0.5) { 2.0 } else { 0.0 };
                normal(rng, shift)
            })
            .collect();
        let neg = (0..n).map(|_| normal(rng, 0.0)).collect();
        (pos, neg)
    };
    let (p, n) = mixture(&mut rng, 5000);
    let planted = mpe_estimate(&p, &n, DEFAULT_TRIM).map_err(|e| e.to_string())?.pi_hat;
    check((planted - 0.5).abs() <= 0.1, || format!("planted 0.5, estimated {planted}"))?;

    let mut covered = 0;
    for trial in 0..50 {
        let (p, n) = mixture(&mut rng, 5000);
        let res = mpe_bootstrap(&p, &n, DEFAULT_TRIM, 200, 1000 + trial).map_err(|e| e.to_string())?;
        let ci = res.ci.ok_or("bootstrap returned no interval")?;
        if ci.lower <= 0.5 && 0.5 <= ci.upper {
            covered += 1;
        }
    }
    check(covered >= 40, || format!("CI covered the planted fraction in {covered}/50 trials"))?;

    let anchor = explicit_evidence_anchor(0.740, 0.490).map_err(|e| e.to_string())?.pi_e;
    check((anchor - 0.490).abs() <= 2e-3, || format!("anchor {anchor}"))?;
    Ok(format!("null {null:.3}, planted {planted:.3}, coverage {covered}/50, anchor {anchor:.4}"))
}

fn files_equal(a: &Path, b: &Path) -> Result<bool, String> {
    let x = std::fs::read(a).map_err(|e| format!("{}: {e}", a.display()))?;
    let y = std::fs::read(b).map_err(|e| format!("{}: {e}", b.display()))?;
    Ok(x == y)
}

fn c12_determinism() -> Verdict {
    let ws = workspace()?;
    let (sv, splits) = (ws.p("sv.jsonl"), ws.p("splits.json"));
    let (a, b) = (ws.root.join("model_a"), ws.root.join("model_b"));
    cli(&["train", "--stepview", &sv, "--splits", &splits, "--out", &ws.p("model_b"), "--seed", "0"])?;
    let manifest = read_value(&a.join("manifest.json").display().to_string())?;
    let mut blobs: Vec<String> = manifest["tensors"]
        .as_array()
        .ok_or("manifest has no tensors")?
        .iter()
        .filter_map(|t| t["file"].as_str().map(str::to_string))
        .collect();
    blobs.push("manifest.json".into());
    for f in &blobs {
        check(files_equal(&a.join(f), &b.join(f))?, || format!("{f} differs between reruns"))?;
    }
    let extract = |model: &str, out: &str| {
        cli(&["extract-dfa", "--model", &ws.p(model), "--stepview", &sv, "--splits", &splits, "--out", &ws.p(out)])
    };
    extract("model_a", "dfa_1.json")?;
    extract("model_a", "dfa_2.json")?;
    extract("model_b", "dfa_3.json")?;
    for other in ["dfa_2.json", "dfa_3.json"] {
        check(files_equal(&ws.root.join("dfa_1.json"), &ws.root.join(other))?, || format!("dfa_1.json != {other}"))?;
    }
    Ok(format!("{} weight blobs and 3 DFA artifacts byte-identical", blobs.len() - 1))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("ceiling exactness", c1_ceiling_exactness),
        ("required-pi reproduction", c2_required_pi),
        ("ceiling tightness Monte Carlo", c3_tightness),
        ("envelope consistency", c4_envelope),
        ("metric oracles", c5_metric_oracles),
        ("gradient suite", c6_gradients),
        ("labeling exhaustive check", c7_labeling),
        ("end-to-end signal recovery", c8_signal_recovery),
        ("DFA correctness", c9_dfa),
        ("first-alert semantics", c10_first_alert),
        ("MPE self-consistency", c11_mpe),
        ("determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}; {secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why}; {secs:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
