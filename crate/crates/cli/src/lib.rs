//! Command-line surface over the prefixguard toolkit. Every command that writes an artifact also
//! writes a run manifest next to it, and every artifact it reads is checked against its manifest.

pub mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use prefixguard::automaton::{
    audit_dfa, dfa_trajectory_scores, extract_dfa, induce_routed_dfa, AmbiguityFilterReport, Dfa, DfaAuditReport,
    FallbackRisk, InductionOptions, RoutedDfa, SampleMode, SymbolTrajectory,
};
use prefixguard::encoder::{fit_vectorizer, EncoderConfig, VectorizerModel};
use prefixguard::metrics::{
    average_precision, curve_csv, first_alert_diagnostics, metrics_report, pr_curve, roc_curve, FirstAlertReport,
    MetricsReport, ScoredPrefixSet, TrajectoryScores,
};
use prefixguard::monitor::{
    load_model, save_model, select_threshold, train_monitor, Backend, EncodedCorpus, ModelManifest, MonitorConfig,
    MonitorModel, RiskSeries, ThresholdChoice, ThresholdPolicy,
};
use prefixguard::observability::{
    ceiling, ceiling_csv, explicit_evidence_anchor, mpe_bootstrap, required_pi, AnchorResult, MpeResult,
    DEFAULT_REPLICATES, DEFAULT_TRIM,
};
use prefixguard::probes::{
    build_mpe_audit_set, explicit_evidence_rates, run_control, run_mpe_audit, AuditProtocol,
    ControlConfig, ControlData, ControlKind, ControlReport, MpeAuditReport, DEFAULT_EVIDENCE_PATTERN,
};
use prefixguard::stepview::{convert_corpus, read_stepview_corpus, write_stepview_corpus, Adapter, AdapterSpec, StepViewTrajectory};
use prefixguard::trace_model::{
    generate_synthetic_corpus, make_splits, read_corpus, shuffle_label_sets, write_corpus, PrefixLabelSet, SplitRatios,
    SplitRole, SplitSpec, SynthConfig,
};

use manifest::ManifestBuilder;

pub const VECTORIZER_FILE: &str = "vectorizer.json";
pub const SPLIT_IDS_FILE: &str = "split_ids.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] prefixguard::Error),

    #[error("{0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for bad input or validation failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use prefixguard::Error as E;
        match self {
            CliError::Input(_) => 2,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::InvalidInput(_)
                | E::Config(_)
                | E::StepParse { .. }
                | E::UndefinedMetric(_)
                | E::VectorizerMismatch { .. }
                | E::Artifact { .. }
                | E::Leakage(_)
                | E::Json(_) => 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "prefixguard", version, about = "Prefix failure-warning monitors for agent traces")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted failure precursors.
    Synth(SynthArgs),
    /// Write a stratified train/calibration/validation/test split file.
    Split(SplitArgs),
    /// Convert raw trajectories to StepView records with an adapter spec.
    Convert(ConvertArgs),
    /// Fit the step TF-IDF encoder on the training split.
    FitEncoder(FitEncoderArgs),
    /// Train a monitor and write a model directory.
    Train(TrainArgs),
    /// Evaluate a monitor on one split with calibration-split thresholds.
    Eval(EvalArgs),
    /// Extract and calibrate a DFA from hard symbol sequences.
    ExtractDfa(ExtractDfaArgs),
    /// Audit a calibrated DFA on one split.
    Audit(AuditArgs),
    /// Observability ceiling values, curves, or the required observable fraction.
    Ceiling(CeilingArgs),
    /// Mixture-proportion estimate of the observable-positive fraction.
    Mpe(MpeArgs),
    /// Run confound controls and supervised probes.
    Probe(ProbeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Train,
    Calibration,
    Validation,
    Test,
}

impl From<Role> for SplitRole {
    fn from(r: Role) -> Self {
        match r {
            Role::Train => SplitRole::Train,
            Role::Calibration => SplitRole::Calibration,
            Role::Validation => SplitRole::Validation,
            Role::Test => SplitRole::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolSource {
    /// Hard symbols of a trained monitor's symbolizer.
    Monitor,
    /// Tool names, mapped to symbols in sorted order of the training split's tools.
    Tool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub failure_rate: Option<f64>,
    #[arg(long)]
    pub precursor_probability: Option<f64>,
    /// Also write the adapter spec matching the generated step layout.
    #[arg(long)]
    pub adapter_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train: f64,
    #[arg(long, default_value_t = 0.1)]
    pub validation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test: f64,
    /// Fraction of the training pool held out for calibration.
    #[arg(long, default_value_t = 0.1)]
    pub calibration: f64,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Coverage report path (default: `<out>.coverage.json`).
    #[arg(long)]
    pub coverage: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitEncoderArgs {
    #[arg(long)]
    pub stepview: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON encoder config (defaults to the main step encoder).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stepview: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON monitor config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder fitted by `fit-encoder`; fitted on the training split when omitted.
    #[arg(long)]
    pub vectorizer: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub backend: Option<String>,
    /// Null control: train and select on labels shuffled across trajectories.
    #[arg(long)]
    pub shuffled_labels: bool,
    #[arg(long, default_value_t = 0)]
    pub label_seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stepview: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, value_enum, default_value_t = Role::Test)]
    pub split: Role,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.10, 0.20])]
    pub far_caps: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for PR and ROC curve CSVs.
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
    /// Per-trajectory risk series as JSON Lines.
    #[arg(long)]
    pub risk_out: Option<PathBuf>,
    /// Permit evaluating trajectories the model was fitted, selected or calibrated on.
    #[arg(long)]
    pub allow_insample: bool,
}

#[derive(Debug, Args)]
pub struct ExtractDfaArgs {
    #[arg(long)]
    pub stepview: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model directory; required with `--symbols-from monitor`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SymbolSource::Monitor)]
    pub symbols_from: SymbolSource,
    #[arg(long, default_value_t = prefixguard::automaton::DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    /// Induce on every labeled prefix instead of one string per trajectory.
    #[arg(long)]
    pub prefix_samples: bool,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    /// Fit one DFA per route: `task_id` or `metadata:<index>`.
    #[arg(long)]
    pub route_key: Option<String>,
    /// Risk for prefixes in untrusted states.
    #[arg(long, default_value = "global-prevalence")]
    pub fallback: String,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub dfa: PathBuf,
    #[arg(long)]
    pub stepview: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, value_enum, default_value_t = Role::Test)]
    pub split: Role,
    /// Model directory the DFA was extracted from (monitor symbols only).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    #[arg(long)]
    pub allow_insample: bool,
}

#[derive(Debug, Args)]
pub struct CeilingArgs {
    #[arg(long)]
    pub pi: Option<f64>,
    /// One or more positive rates.
    #[arg(long, value_delimiter = ',')]
    pub r: Vec<f64>,
    /// Emit a CSV over this many evenly spaced observable fractions in [0,1].
    #[arg(long)]
    pub grid: Option<usize>,
    /// Required observable fraction for achieved AUPRC `A` at rate `R`.
    #[arg(long, num_args = 2, value_names = ["A", "R"])]
    pub invert: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MpeArgs {
    /// JSON file with `positive` and `negative` score arrays.
    #[arg(long, conflicts_with_all = ["stepview", "splits"])]
    pub scores: Option<PathBuf>,
    #[arg(long, requires = "splits")]
    pub stepview: Option<PathBuf>,
    #[arg(long, requires = "stepview")]
    pub splits: Option<PathBuf>,
    #[arg(long, default_value = "matched_nonterminal")]
    pub protocol: String,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    #[arg(long, default_value_t = DEFAULT_TRIM)]
    pub trim: f64,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also report the explicit-evidence anchor on the held-out audit prefixes.
    #[arg(long)]
    pub anchor: bool,
    #[arg(long, default_value = DEFAULT_EVIDENCE_PATTERN)]
    pub evidence_pattern: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub stepview: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    /// Control kinds (comma separated) or `all`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kind: Vec<String>,
    /// JSON control config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match run(cli.command) {
        Ok(summary) => {
            if summary.ends_with('\n') {
                print!("{summary}");
            } else {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses and runs one invocation (`args` excludes the program name) without printing.
pub fn run_args<I, T>(args: I) -> CliResult<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("prefixguard")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Input(e.to_string()))?;
    run(cli.command)
}

/// Runs one command and returns its one-line (or CSV) stdout summary.
pub fn run(command: Command) -> CliResult<String> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::FitEncoder(a) => cmd_fit_encoder(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExtractDfa(a) => cmd_extract_dfa(&a),
        Command::Audit(a) => cmd_audit(&a),
        Command::Ceiling(a) => cmd_ceiling(&a),
        Command::Mpe(a) => cmd_mpe(&a),
        Command::Probe(a) => cmd_probe(&a),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(prefixguard::Error::from)? + "\n";
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.count {
        cfg.trajectory_count = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.failure_rate {
        cfg.failure_rate = f;
    }
    if let Some(p) = a.precursor_probability {
        cfg.precursor_probability = p;
    }
    let corpus = generate_synthetic_corpus(&cfg)?;
    let mut m = ManifestBuilder::new("synth", to_value(&cfg), Some(cfg.seed));
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_corpus(&a.out, &corpus)?;
    m.finish_file(&a.out)?;
    if let Some(p) = &a.adapter_out {
        write_json(p, &AdapterSpec::synthetic_default())?;
        ManifestBuilder::new("synth", json!({"adapter": "synthetic_default"}), None).finish_file(p)?;
    }
    let failed = corpus.iter().filter(|t| t.outcome.failed()).count();
    Ok(json!({"trajectories": corpus.len(), "failed": failed, "out": a.out}).to_string())
}

fn cmd_split(a: &SplitArgs) -> CliResult<String> {
    let mut m = ManifestBuilder::new("split", json!({}), Some(a.seed));
    m.input(&a.corpus)?;
    let corpus = read_corpus(&a.corpus)?;
    let ratios = SplitRatios { train: a.train, validation: a.validation, test: a.test, calibration: a.calibration };
    let spec = make_splits(&corpus, ratios, a.seed)?;
    m.set_config(to_value(&ratios));
    spec.save(&a.out)?;
    m.finish_file(&a.out)?;
    Ok(json!({
            "train": spec.train_ids.len(),
            "calibration": spec.calibration_ids.len(),
            "validation": spec.validation_ids.len(),
            "test": spec.test_ids.len(),
        })
    .to_string())
}

fn cmd_convert(a: &ConvertArgs) -> CliResult<String> {
    let mut m = ManifestBuilder::new("convert", json!({}), None);
    m.input(&a.corpus)?;
    m.input(&a.adapter)?;
    let spec = AdapterSpec::load(&a.adapter)?;
    let adapter = Adapter::new(spec.clone())?;
    let corpus = read_corpus(&a.corpus)?;
    let (converted, coverage) = convert_corpus(&adapter, &corpus)?;
    m.set_config(to_value(&spec));
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_stepview_corpus(&a.out, &converted)?;
    m.finish_file(&a.out)?;
    let cov_path = a.coverage.clone().unwrap_or_else(|| {
        let mut n = a.out.file_name().unwrap_or_default().to_os_string();
        n.push(".coverage.json");
        a.out.with_file_name(n)
    });
    write_json(&cov_path, &coverage)?;
    Ok(serde_json::to_string(&coverage).map_err(prefixguard::Error::from)?.to_string())
}

/// StepView corpus and split file, both verified against their manifests.
struct Dataset {
    corpus: Vec<StepViewTrajectory>,
    splits: SplitSpec,
}

impl Dataset {
    fn load(stepview: &Path, splits: &Path, m: &mut ManifestBuilder) -> CliResult<Self> {
        m.input(stepview)?;
        m.input(splits)?;
        let corpus = read_stepview_corpus(stepview)?;
        let splits = SplitSpec::load(splits)?;
        splits.validate()?;
        let known: HashSet<&str> = corpus.iter().map(|t| t.trajectory_id.as_str()).collect();
        for role in [SplitRole::Train, SplitRole::Calibration, SplitRole::Validation, SplitRole::Test] {
            if let Some(missing) = splits.ids(role).iter().find(|id| !known.contains(id.as_str())) {
                return Err(CliError::Input(format!("split id {missing} ({role:?}) is not in the corpus")));
            }
        }
        Ok(Dataset { corpus, splits })
    }

    fn role(&self, role: SplitRole) -> Vec<&StepViewTrajectory> {
        let ids: HashSet<&str> = self.splits.ids(role).iter().map(String::as_str).collect();
        self.corpus.iter().filter(|t| ids.contains(t.trajectory_id.as_str())).collect()
    }
}

fn nonempty(split: Vec<&StepViewTrajectory>, role: SplitRole) -> CliResult<Vec<&StepViewTrajectory>> {
    if split.is_empty() {
        return Err(CliError::Input(format!("{role:?} split is empty")));
    }
    Ok(split)
}

fn fit_train_vectorizer(train: &[&StepViewTrajectory], config: EncoderConfig) -> CliResult<VectorizerModel> {
    let docs: Vec<String> = train.iter().flat_map(|t| t.canonical_texts()).collect();
    Ok(fit_vectorizer(&docs, config)?)
}

fn cmd_fit_encoder(a: &FitEncoderArgs) -> CliResult<String> {
    let mut m = ManifestBuilder::new("fit-encoder", json!({}), None);
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    let config: EncoderConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EncoderConfig::main(),
    };
    let data = Dataset::load(&a.stepview, &a.splits, &mut m)?;
    let train = nonempty(data.role(SplitRole::Train), SplitRole::Train)?;
    let vec = fit_train_vectorizer(&train, config)?;
    m.set_config(to_value(&config));
    vec.save(&a.out)?;
    m.finish_file(&a.out)?;
    Ok(json!({"dim": vec.dim(), "documents": vec.n_documents, "hash": vec.hash()}).to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub calibration: Vec<String>,
    pub validation: Vec<String>,
}

fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let mut config: MonitorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => MonitorConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(b) = &a.backend {
        config.backend = b.parse::<Backend>()?;
    }
    config.validate()?;
    let mut m = ManifestBuilder::new("train", json!({}), Some(config.seed));
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    let data = Dataset::load(&a.stepview, &a.splits, &mut m)?;
    let train = nonempty(data.role(SplitRole::Train), SplitRole::Train)?;
    let validation = nonempty(data.role(SplitRole::Validation), SplitRole::Validation)?;
    let calibration = data.role(SplitRole::Calibration);
    let vec = match &a.vectorizer {
        Some(p) => {
            m.input(p)?;
            VectorizerModel::load(p)?
        }
        None => fit_train_vectorizer(&train, EncoderConfig::main())?,
    };
    let h = config.horizon;
    let mut train_enc = EncodedCorpus::encode(&vec, &train, h);
    let mut val_enc = EncodedCorpus::encode(&vec, &validation, h);
    if a.shuffled_labels {
        let shuffle = |c: &EncodedCorpus, seed: u64| -> CliResult<EncodedCorpus> {
            let sets: Vec<PrefixLabelSet> = c
                .trajectories
                .iter()
                .map(|t| PrefixLabelSet { trajectory_id: t.trajectory_id.clone(), horizon: h, labels: t.labels.clone() })
                .collect();
            let labels = shuffle_label_sets(&sets, seed).into_iter().map(|s| s.labels).collect();
            Ok(c.with_labels(labels)?)
        };
        train_enc = shuffle(&train_enc, a.label_seed)?;
        val_enc = shuffle(&val_enc, a.label_seed.wrapping_add(1))?;
    }
    let cal_enc = (!calibration.is_empty()).then(|| EncodedCorpus::encode(&vec, &calibration, h));
    let (model, report) = train_monitor(&train_enc, cal_enc.as_ref(), &val_enc, &config)?;
    let manifest = save_model(&a.out, &model, Some(&report))?;
    vec.save(&a.out.join(VECTORIZER_FILE))?;
    let ids = |s: &[&StepViewTrajectory]| s.iter().map(|t| t.trajectory_id.clone()).collect::<Vec<_>>();
    write_json(
        &a.out.join(SPLIT_IDS_FILE),
        &SplitIds { train: ids(&train), calibration: ids(&calibration), validation: ids(&validation) },
    )?;
    write_json(&a.out.join(TRAIN_REPORT_FILE), &report)?;
    let mut files: Vec<String> = vec!["manifest.json".into(), VECTORIZER_FILE.into(), SPLIT_IDS_FILE.into(), TRAIN_REPORT_FILE.into()];
    files.extend(manifest.tensors.iter().map(|t| t.file.clone()));
    m.set_config(json!({"monitor": config, "shuffled_labels": a.shuffled_labels, "label_seed": a.label_seed}));
    m.finish_dir(&a.out, &files)?;
    Ok(json!({
            "best_epoch": report.best_epoch,
            "best_validation_auprc": report.best_validation_auprc,
            "checkpoint": report.best_checkpoint_id,
            "out": a.out,
        })
    .to_string())
}

/// A model directory written by `train`.
pub struct LoadedModel {
    pub model: MonitorModel,
    pub manifest: ModelManifest,
    pub vectorizer: VectorizerModel,
    pub split_ids: SplitIds,
    /// sha256 of the model's `manifest.json`.
    pub hash: String,
}

pub fn load_model_dir(dir: &Path) -> CliResult<LoadedModel> {
    manifest::verify_input(dir)?;
    let (model, manifest) = load_model(dir)?;
    let vectorizer = VectorizerModel::load(&dir.join(VECTORIZER_FILE))?;
    model.check_vectorizer(&vectorizer.hash())?;
    let split_ids: SplitIds = read_json(&dir.join(SPLIT_IDS_FILE))?;
    let hash = manifest::sha256_file(&dir.join("manifest.json"))?;
    Ok(LoadedModel { model, manifest, vectorizer, split_ids, hash })
}

fn check_leakage(evaluated: &[&StepViewTrajectory], fitted: &BTreeSet<&str>, allow: bool, what: &str) -> CliResult<()> {
    let overlap = evaluated.iter().filter(|t| fitted.contains(t.trajectory_id.as_str())).count();
    if overlap > 0 && !allow {
        return Err(prefixguard::Error::Leakage(format!(
            "{overlap} evaluated trajectories were used to fit {what}; pass --allow-insample to evaluate anyway"
        ))
        .into());
    }
    if overlap > 0 {
        log::warn!("{overlap} in-sample trajectories evaluated");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapReport {
    pub far_cap: f64,
    pub threshold: ThresholdChoice,
    pub first_alert: FirstAlertReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_trajectories: usize,
    pub horizon: usize,
    pub f1_threshold: ThresholdChoice,
    pub metrics: MetricsReport,
    pub far_caps: Vec<CapReport>,
}

fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let mut m = ManifestBuilder::new("eval", json!({"split": format!("{:?}", a.split), "far_caps": a.far_caps}), None);
    m.input(&a.model)?;
    let lm = load_model_dir(&a.model)?;
    let data = Dataset::load(&a.stepview, &a.splits, &mut m)?;
    let role: SplitRole = a.split.into();
    let target = nonempty(data.role(role), role)?;
    let fitted: BTreeSet<&str> = lm
        .split_ids
        .train
        .iter()
        .chain(&lm.split_ids.validation)
        .chain(&lm.split_ids.calibration)
        .map(String::as_str)
        .collect();
    check_leakage(&target, &fitted, a.allow_insample, "the model")?;
    let calibration = nonempty(data.role(SplitRole::Calibration), SplitRole::Calibration)?;
    let h = lm.model.config.horizon;
    let series = lm.model.trajectory_scores(&EncodedCorpus::encode(&lm.vectorizer, &target, h))?;
    let cal_series = lm.model.trajectory_scores(&EncodedCorpus::encode(&lm.vectorizer, &calibration, h))?;
    let f1 = select_threshold(&cal_series, ThresholdPolicy::F1)?;
    let set = ScoredPrefixSet::from_series(&series)?;
    let metrics = metrics_report(&set, f1.threshold)?;
    let mut caps = Vec::new();
    for &cap in &a.far_caps {
        let choice = select_threshold(&cal_series, ThresholdPolicy::FarCap { cap })?;
        caps.push(CapReport { far_cap: cap, first_alert: first_alert_diagnostics(&series, choice.threshold, h), threshold: choice });
    }
    let report = EvalReport {
        split: format!("{role:?}").to_lowercase(),
        n_trajectories: target.len(),
        horizon: h,
        f1_threshold: f1,
        metrics,
        far_caps: caps,
    };
    write_json(&a.out, &report)?;
    if let Some(dir) = &a.curves_dir {
        let (s, l) = set.ranked();
        write_text(&dir.join("pr_curve.csv"), &curve_csv(&pr_curve(&s, &l)?, "recall", "precision"))?;
        write_text(&dir.join("roc_curve.csv"), &curve_csv(&roc_curve(&s, &l)?, "fpr", "tpr"))?;
    }
    if let Some(p) = &a.risk_out {
        let risks: Vec<RiskSeries> = lm.model.score_corpus(&EncodedCorpus::encode(&lm.vectorizer, &target, h))?;
        let mut text = String::new();
        for r in &risks {
            text.push_str(&serde_json::to_string(r).map_err(prefixguard::Error::from)?);
            text.push('\n');
        }
        write_text(p, &text)?;
    }
    m.finish_file(&a.out)?;
    Ok(json!({"ap": report.metrics.ap, "auroc": report.metrics.auroc, "n": report.metrics.n}).to_string())
}

/// How a trajectory is assigned to a route.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteKey {
    TaskId,
    Metadata(usize),
}

impl std::str::FromStr for RouteKey {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        if s == "task_id" {
            return Ok(RouteKey::TaskId);
        }
        if let Some(i) = s.strip_prefix("metadata:").and_then(|i| i.parse().ok()) {
            return Ok(RouteKey::Metadata(i));
        }
        Err(CliError::Input(format!("unknown route key {s:?} (expected task_id or metadata:<index>)")))
    }
}

impl RouteKey {
    fn route(&self, t: &StepViewTrajectory) -> String {
        match self {
            RouteKey::TaskId => t.task_id.clone(),
            RouteKey::Metadata(i) => {
                t.stepview.first().and_then(|s| s.metadata_lines.get(*i)).cloned().unwrap_or_default()
            }
        }
    }
}

/// Sorted distinct tool names of a split.
pub fn tool_vocabulary(split: &[&StepViewTrajectory]) -> Vec<String> {
    let set: BTreeSet<&str> = split.iter().flat_map(|t| t.stepview.iter().map(|s| s.tool_name.as_str())).collect();
    set.into_iter().map(str::to_string).collect()
}

/// Hard symbols per trajectory, from a monitor or from a tool vocabulary (unknown tools map past
/// the alphabet and so into the DFA sink).
pub fn symbolize(
    split: &[&StepViewTrajectory],
    model: Option<&LoadedModel>,
    tools: &[String],
    route: Option<&RouteKey>,
) -> CliResult<Vec<SymbolTrajectory>> {
    let index: BTreeMap<&str, usize> = tools.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    split
        .iter()
        .map(|t| {
            let symbols = match model {
                Some(lm) => {
                    let steps: Vec<_> = t.canonical_texts().iter().map(|s| lm.vectorizer.encode(s)).collect();
                    lm.model.hard_symbolize(&lm.vectorizer.hash(), &steps)?
                }
                None => t.stepview.iter().map(|s| index.get(s.tool_name.as_str()).copied().unwrap_or(tools.len())).collect(),
            };
            Ok(SymbolTrajectory {
                trajectory_id: t.trajectory_id.clone(),
                failed: t.outcome.failed(),
                symbols,
                route: route.map(|r| r.route(t)),
            })
        })
        .collect()
}

/// Single or per-route DFA artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DfaArtifact {
    Routed(RoutedDfaArtifact),
    Single(Dfa),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedDfaArtifact {
    pub routed: RoutedDfa,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symbol_names: Vec<String>,
}

impl DfaArtifact {
    fn source_model_hash(&self) -> Option<&str> {
        match self {
            DfaArtifact::Routed(r) => r.source_model_hash.as_deref(),
            DfaArtifact::Single(d) => d.source_model_hash.as_deref(),
        }
    }

    fn symbol_names(&self) -> &[String] {
        match self {
            DfaArtifact::Routed(r) => &r.symbol_names,
            DfaArtifact::Single(d) => &d.symbol_names,
        }
    }
}

fn parse_fallback(s: &str) -> CliResult<FallbackRisk> {
    match s {
        "global-prevalence" | "global_prevalence" => Ok(FallbackRisk::GlobalPrevalence),
        "zero" => Ok(FallbackRisk::Zero),
        other => Err(CliError::Input(format!("unknown fallback {other:?} (expected global-prevalence or zero)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub states: usize,
    pub alphabet_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity_filter: Option<AmbiguityFilterReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub route_states: BTreeMap<String, usize>,
}

fn cmd_extract_dfa(a: &ExtractDfaArgs) -> CliResult<String> {
    let opts = InductionOptions {
        horizon: a.horizon,
        min_count: a.min_count,
        sample_mode: if a.prefix_samples { SampleMode::Prefix } else { SampleMode::FullTrajectory },
        fallback: parse_fallback(&a.fallback)?,
    };
    let route: Option<RouteKey> = a.route_key.as_deref().map(str::parse).transpose()?;
    let mut m = ManifestBuilder::new(
        "extract-dfa",
        json!({"options": opts, "symbols_from": a.symbols_from, "route_key": a.route_key}),
        None,
    );
    let data = Dataset::load(&a.stepview, &a.splits, &mut m)?;
    let train = nonempty(data.role(SplitRole::Train), SplitRole::Train)?;
    let calibration = nonempty(data.role(SplitRole::Calibration), SplitRole::Calibration)?;
    let lm = match (a.symbols_from, &a.model) {
        (SymbolSource::Monitor, Some(dir)) => {
            m.input(dir)?;
            Some(load_model_dir(dir)?)
        }
        (SymbolSource::Monitor, None) => return Err(CliError::Input("--model is required with --symbols-from monitor".into())),
        (SymbolSource::Tool, _) => None,
    };
    let tools = if lm.is_none() { tool_vocabulary(&train) } else { Vec::new() };
    let alphabet = lm.as_ref().map_or(tools.len(), |l| l.model.config.alphabet_size);
    if alphabet == 0 {
        return Err(CliError::Input("empty symbol alphabet".into()));
    }
    let train_sym = symbolize(&train, lm.as_ref(), &tools, route.as_ref())?;
    let cal_sym = symbolize(&calibration, lm.as_ref(), &tools, route.as_ref())?;
    let source_model_hash = lm.as_ref().map(|l| l.hash.clone());
    let (artifact, summary) = match &route {
        None => {
            let (mut dfa, filter) = extract_dfa(&train_sym, &cal_sym, alphabet, &opts)?;
            dfa.source_model_hash = source_model_hash;
            dfa.symbol_names = tools;
            let summary = ExtractSummary {
                states: dfa.live_states(),
                alphabet_size: alphabet,
                ambiguity_filter: Some(filter),
                route_states: BTreeMap::new(),
            };
            (DfaArtifact::Single(dfa), summary)
        }
        Some(_) => {
            let key = a.route_key.clone().unwrap_or_default();
            let routed = induce_routed_dfa(&key, &train_sym, &cal_sym, alphabet, &opts)?;
            let route_states = routed
                .routes
                .iter()
                .map(|(k, r)| (k.clone(), r.dfa.as_ref().map_or(0, Dfa::live_states)))
                .collect();
            let summary =
                ExtractSummary { states: routed.total_states(), alphabet_size: alphabet, ambiguity_filter: None, route_states };
            (DfaArtifact::Routed(RoutedDfaArtifact { routed, source_model_hash, symbol_names: tools }), summary)
        }
    };
    write_json(&a.out, &artifact)?;
    m.finish_file(&a.out)?;
    Ok(serde_json::to_string(&summary).map_err(prefixguard::Error::from)?.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteAudit {
    pub states: usize,
    pub prior: f64,
    pub calibration_prefixes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutput {
    pub split: String,
    /// AP over non-abstained prefixes.
    pub ap: Option<f64>,
    pub n_abstained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<DfaAuditReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_key: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub routes: BTreeMap<String, RouteAudit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_states: Option<usize>,
    /// AP of the per-route constant prior baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_prior_ap: Option<f64>,
}

fn ranked_ap(series: &[TrajectoryScores]) -> CliResult<(Option<f64>, usize)> {
    let set = ScoredPrefixSet::from_series(series)?;
    let (s, l) = set.ranked();
    Ok((average_precision(&s, &l).ok(), set.abstained()))
}

fn cmd_audit(a: &AuditArgs) -> CliResult<String> {
    let mut m = ManifestBuilder::new("audit", json!({"split": format!("{:?}", a.split), "horizon": a.horizon}), None);
    m.input(&a.dfa)?;
    let artifact: DfaArtifact = read_json(&a.dfa)?;
    let data = Dataset::load(&a.stepview, &a.splits, &mut m)?;
    let role: SplitRole = a.split.into();
    let target = nonempty(data.role(role), role)?;
    let fitted: BTreeSet<&str> = data
        .splits
        .train_ids
        .iter()
        .chain(&data.splits.calibration_ids)
        .map(String::as_str)
        .collect();
    check_leakage(&target, &fitted, a.allow_insample, "the DFA")?;
    let lm = match artifact.source_model_hash() {
        Some(expected) => {
            let dir = a.model.as_ref().ok_or_else(|| CliError::Input("DFA was extracted from a monitor; pass --model".into()))?;
            m.input(dir)?;
            let lm = load_model_dir(dir)?;
            if lm.hash != expected {
                return Err(CliError::Input(format!("DFA was extracted from model {expected}, not {}", lm.hash)));
            }
            Some(lm)
        }
        None => None,
    };
    let tools = artifact.symbol_names().to_vec();
    let h = a.horizon;
    let out = match &artifact {
        DfaArtifact::Single(dfa) => {
            dfa.validate()?;
            let syms = symbolize(&target, lm.as_ref(), &tools, None)?;
            let cal = symbolize(&data.role(SplitRole::Calibration), lm.as_ref(), &tools, None)?;
            let warn = select_threshold(&dfa_trajectory_scores(dfa, &cal, h), ThresholdPolicy::F1)?;
            let (ap, n_abstained) = ranked_ap(&dfa_trajectory_scores(dfa, &syms, h))?;
            AuditOutput {
                split: format!("{role:?}").to_lowercase(),
                ap,
                n_abstained,
                report: Some(audit_dfa(dfa, &syms, warn.threshold)),
                route_key: None,
                routes: BTreeMap::new(),
                total_states: Some(dfa.live_states()),
                route_prior_ap: None,
            }
        }
        DfaArtifact::Routed(r) => {
            let key: RouteKey = r.routed.route_key.parse()?;
            let syms = symbolize(&target, lm.as_ref(), &tools, Some(&key))?;
            let series: Vec<TrajectoryScores> = syms.iter().map(|t| r.routed.score(t, h)).collect();
            let prior: Vec<TrajectoryScores> = syms.iter().map(|t| r.routed.prior_score(t, h)).collect();
            let (ap, n_abstained) = ranked_ap(&series)?;
            let routes = r
                .routed
                .routes
                .iter()
                .map(|(k, v)| {
                    let audit = RouteAudit {
                        states: v.dfa.as_ref().map_or(0, Dfa::live_states),
                        prior: v.prior,
                        calibration_prefixes: v.calibration_prefixes,
                    };
                    (k.clone(), audit)
                })
                .collect();
            AuditOutput {
                split: format!("{role:?}").to_lowercase(),
                ap,
                n_abstained,
                report: None,
                route_key: Some(r.routed.route_key.clone()),
                routes,
                total_states: Some(r.routed.total_states()),
                route_prior_ap: ranked_ap(&prior)?.0,
            }
        }
    };
    write_json(&a.out, &out)?;
    m.finish_file(&a.out)?;
    Ok(serde_json::to_string(&out).map_err(prefixguard::Error::from)?.to_string())
}

fn cmd_ceiling(a: &CeilingArgs) -> CliResult<String> {
    let text = if let Some(inv) = &a.invert {
        let (acc, r) = (inv[0], inv[1]);
        serde_json::to_string(&json!({"a": acc, "r": r, "required_pi": required_pi(acc, r)?}))
            .map_err(prefixguard::Error::from)?
            + "\n"
    } else if let Some(n) = a.grid {
        if n < 2 || a.r.is_empty() {
            return Err(CliError::Input("--grid needs at least 2 points and one --r value".into()));
        }
        let pis: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        ceiling_csv(&pis, &a.r)?
    } else {
        let pi = a.pi.ok_or_else(|| CliError::Input("pass --pi with --r, --grid with --r, or --invert A R".into()))?;
        if a.r.is_empty() {
            return Err(CliError::Input("--r is required".into()));
        }
        let rows: CliResult<Vec<Value>> =
            a.r.iter().map(|&r| Ok(json!({"pi": pi, "r": r, "ceiling": ceiling(pi, r)?}))).collect();
        let rows = rows?;
        let v = if rows.len() == 1 { rows[0].clone() } else { Value::Array(rows) };
        serde_json::to_string(&v).map_err(prefixguard::Error::from)? + "\n"
    };
    if let Some(p) = &a.out {
        write_text(p, &text)?;
        ManifestBuilder::new("ceiling", json!({"pi": a.pi, "r": a.r, "grid": a.grid, "invert": a.invert}), None)
            .finish_file(p)?;
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreArrays {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceAnchor {
    pub pattern: String,
    pub q_plus: f64,
    pub q_minus: f64,
    pub anchor: AnchorResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpeOutput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<MpeAuditReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<MpeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_evidence: Option<EvidenceAnchor>,
}

fn cmd_mpe(a: &MpeArgs) -> CliResult<String> {
    let mut m = ManifestBuilder::new(
        "mpe",
        json!({"protocol": a.protocol, "trim": a.trim, "replicates": a.replicates, "horizon": a.horizon}),
        Some(a.seed),
    );
    let out = if let Some(p) = &a.scores {
        m.input(p)?;
        let s: ScoreArrays = read_json(p)?;
        MpeOutput { audit: None, result: Some(mpe_bootstrap(&s.positive, &s.negative, a.trim, a.replicates, a.seed)?), explicit_evidence: None }
    } else {
        let (sv, sp) = match (&a.stepview, &a.splits) {
            (Some(sv), Some(sp)) => (sv, sp),
            _ => return Err(CliError::Input("pass --scores, or --stepview with --splits".into())),
        };
        let protocol: AuditProtocol = a.protocol.parse()?;
        let data = Dataset::load(sv, sp, &mut m)?;
        let train = build_mpe_audit_set(&data.role(SplitRole::Train), protocol, a.horizon)?;
        let test = build_mpe_audit_set(&data.role(SplitRole::Test), protocol, a.horizon)?;
        let report = run_mpe_audit(&train, &test, a.trim, a.replicates, a.seed, &Default::default())?;
        let explicit_evidence = if a.anchor {
            let re = regex::Regex::new(&a.evidence_pattern)
                .map_err(|e| CliError::Input(format!("invalid --evidence-pattern: {e}")))?;
            let (q_plus, q_minus) = explicit_evidence_rates(&test, &re);
            Some(EvidenceAnchor {
                pattern: a.evidence_pattern.clone(),
                q_plus,
                q_minus,
                anchor: explicit_evidence_anchor(q_plus, q_minus)?,
            })
        } else {
            None
        };
        MpeOutput { audit: Some(report), result: None, explicit_evidence }
    };
    write_json(&a.out, &out)?;
    m.finish_file(&a.out)?;
    Ok(serde_json::to_string(&out).map_err(prefixguard::Error::from)?.to_string())
}

fn cmd_probe(a: &ProbeArgs) -> CliResult<String> {
    let kinds: Vec<ControlKind> = if a.kind.iter().any(|k| k == "all") {
        ControlKind::ALL.to_vec()
    } else {
        a.kind.iter().map(|k| k.parse()).collect::<Result<_, _>>()?
    };
    let config: ControlConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ControlConfig::default(),
    };
    let mut m = ManifestBuilder::new("probe", json!({"kinds": kinds, "config": config}), Some(config.seed));
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let data = Dataset::load(&a.stepview, &a.splits, &mut m)?;
    let cd = ControlData {
        train: nonempty(data.role(SplitRole::Train), SplitRole::Train)?,
        validation: nonempty(data.role(SplitRole::Validation), SplitRole::Validation)?,
        test: nonempty(data.role(SplitRole::Test), SplitRole::Test)?,
    };
    let reports: Vec<ControlReport> = kinds.iter().map(|&k| run_control(k, &cd, &config)).collect::<Result<_, _>>()?;
    write_json(&a.out, &reports)?;
    m.finish_file(&a.out)?;
    let lines: Vec<String> = reports
        .iter()
        .map(|r| json!({"kind": r.kind, "ap": r.ap, "auroc": r.auroc, "positive_rate": r.positive_rate}).to_string())
        .collect();
    Ok(lines.join("\n"))
}
