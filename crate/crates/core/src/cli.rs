//! The `fuselab` command line: argument parsing, run configuration and the
//! six subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataio::{assemble, load_dir, render_tables, tables_from_dataset, Dataset, ModalitySet};
use crate::error::{Error, Result};
use crate::harness::{
    ablation_suite, duration_sweep_with, read_results_csv, run_experiment_with, shared_imputation,
    write_results_csv, ExperimentResult, ExperimentSpec, ExtraColumn, FitSettings, GridChoice, ModelKind, SplitMode,
    SplitSpec, WeekBasis,
};
use crate::impute::{missforest, ImputeConfig};
use crate::neural::{Activation, TrainConfig};
use crate::numerics::derive_seed;
use crate::report::build_report;
use crate::synth::{generate_with_missingness, Mechanism, SynthConfig};

pub const SEED_ENV: &str = "FUSELAB_SEED";
pub const DEFAULT_SEED: u64 = 42;

const IMPUTE_COMMAND_STREAM: u64 = 0x1001;

/// Everything a command needs, resolved from defaults, `FUSELAB_SEED`, the
/// config file and flags, in increasing priority.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Directory holding the four input tables; the synthetic benchmark is
    /// used when absent.
    pub input: Option<PathBuf>,
    pub models: Vec<ModelKind>,
    pub modalities: ModalitySet,
    pub split: SplitSpec,
    pub repeats: usize,
    pub grid: GridChoice,
    pub leakage_safe: bool,
    pub paper_order: bool,
    pub impute_trees: usize,
    pub impute_max_iter: usize,
    pub train: TrainConfig,
    pub activation: Activation,
    pub clip: bool,
    pub synth: SynthConfig,
    pub sweep_first: u32,
    pub sweep_last: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ExperimentSpec::default();
        RunConfig {
            seed: DEFAULT_SEED,
            out: PathBuf::from("out"),
            input: None,
            models: ModelKind::ALL.to_vec(),
            modalities: spec.modalities,
            split: spec.split,
            repeats: spec.n_repeats,
            grid: GridChoice::Default,
            leakage_safe: false,
            paper_order: false,
            impute_trees: spec.impute.n_trees,
            impute_max_iter: spec.impute.max_iter,
            train: spec.fit.cm_train,
            activation: spec.fit.cm_activation,
            clip: spec.fit.cm_clip,
            synth: SynthConfig::default(),
            sweep_first: 1,
            sweep_last: 8,
        }
    }
}

/// Keys in dump order.
pub const CONFIG_KEYS: [&str; 34] = [
    "seed",
    "out",
    "in",
    "model",
    "modalities",
    "split",
    "train_weeks",
    "test_fraction",
    "week_basis",
    "repeats",
    "grid",
    "leakage_safe",
    "paper_order",
    "impute.n_trees",
    "impute.max_iter",
    "cm.batch_size",
    "cm.max_epochs",
    "cm.patience",
    "cm.pretrain_epochs",
    "cm.fine_tune_encoders",
    "cm.activation",
    "cm.clip",
    "synth.participants",
    "synth.days",
    "synth.mean_days",
    "synth.max_days",
    "synth.trait_sd",
    "synth.ar_coeff",
    "synth.noise_sd",
    "synth.missing_rate",
    "synth.mechanism",
    "synth.interaction",
    "sweep.first",
    "sweep.last",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn parse_models(value: &str) -> std::result::Result<Vec<ModelKind>, String> {
    if value.trim().eq_ignore_ascii_case("all") {
        return Ok(ModelKind::ALL.to_vec());
    }
    let mut out: Vec<ModelKind> = Vec::new();
    for tag in value.split([',', '+']).map(str::trim).filter(|t| !t.is_empty()) {
        let m = lib(tag.parse())?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err("`model` names no model".into());
    }
    out.sort();
    Ok(out)
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Option<T>, String> {
    if value.trim().is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show<T: ToString>(value: &Option<T>) -> String {
    value.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunConfig {
    /// Assigns one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "in" => self.input = optional(key, v)?,
            "model" => self.models = parse_models(v)?,
            "modalities" => self.modalities = lib(v.parse())?,
            "split" => self.split.mode = lib(v.parse())?,
            "train_weeks" => self.split.train_weeks = parse(key, v)?,
            "test_fraction" => self.split.test_fraction = parse(key, v)?,
            "week_basis" => self.split.week_basis = lib(v.parse::<WeekBasis>())?,
            "repeats" => self.repeats = parse(key, v)?,
            "grid" => {
                self.grid = match v {
                    "default" => GridChoice::Default,
                    "single" => GridChoice::Single,
                    _ => return Err(format!("invalid value `{v}` for `grid` (expected default or single)")),
                }
            }
            "leakage_safe" => self.leakage_safe = parse(key, v)?,
            "paper_order" => self.paper_order = parse(key, v)?,
            "impute.n_trees" => self.impute_trees = parse(key, v)?,
            "impute.max_iter" => self.impute_max_iter = parse(key, v)?,
            "cm.batch_size" => self.train.batch_size = parse(key, v)?,
            "cm.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "cm.patience" => self.train.patience = parse(key, v)?,
            "cm.pretrain_epochs" => self.train.pretrain_epochs = parse(key, v)?,
            "cm.fine_tune_encoders" => self.train.fine_tune_encoders = parse(key, v)?,
            "cm.activation" => self.activation = lib(v.parse())?,
            "cm.clip" => self.clip = parse(key, v)?,
            "synth.participants" => self.synth.n_participants = parse(key, v)?,
            "synth.days" => self.synth.fixed_days = optional(key, v)?,
            "synth.mean_days" => self.synth.mean_days = parse(key, v)?,
            "synth.max_days" => self.synth.max_days = parse(key, v)?,
            "synth.trait_sd" => self.synth.latent_trait_sd = parse(key, v)?,
            "synth.ar_coeff" => self.synth.daily_ar_coeff = parse(key, v)?,
            "synth.noise_sd" => self.synth.noise_sd = parse(key, v)?,
            "synth.missing_rate" => self.synth.missing_rate = parse(key, v)?,
            "synth.mechanism" => self.synth.mechanism = lib(v.parse::<Mechanism>())?,
            "synth.interaction" => self.synth.interaction_strength = parse(key, v)?,
            "sweep.first" => self.sweep_first = parse(key, v)?,
            "sweep.last" => self.sweep_last = parse(key, v)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Current value of every key, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let models: Vec<&str> = self.models.iter().map(|m| m.tag()).collect();
        let grid = match self.grid {
            GridChoice::Single => "single",
            _ => "default",
        };
        let s = &self.synth;
        let values = [
            self.seed.to_string(),
            self.out.display().to_string(),
            self.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            models.join(","),
            self.modalities.to_string(),
            self.split.mode.to_string(),
            self.split.train_weeks.to_string(),
            self.split.test_fraction.to_string(),
            self.split.week_basis.to_string(),
            self.repeats.to_string(),
            grid.to_string(),
            self.leakage_safe.to_string(),
            self.paper_order.to_string(),
            self.impute_trees.to_string(),
            self.impute_max_iter.to_string(),
            self.train.batch_size.to_string(),
            self.train.max_epochs.to_string(),
            self.train.patience.to_string(),
            self.train.pretrain_epochs.to_string(),
            self.train.fine_tune_encoders.to_string(),
            self.activation.to_string(),
            self.clip.to_string(),
            s.n_participants.to_string(),
            show(&s.fixed_days),
            s.mean_days.to_string(),
            s.max_days.to_string(),
            s.latent_trait_sd.to_string(),
            s.daily_ar_coeff.to_string(),
            s.noise_sd.to_string(),
            s.missing_rate.to_string(),
            s.mechanism.to_string(),
            s.interaction_strength.to_string(),
            self.sweep_first.to_string(),
            self.sweep_last.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(values).collect()
    }

    /// Flat `key = value` text that [`RunConfig::apply_text`] reads back.
    pub fn dump(&self) -> String {
        let mut out = String::from("# fuselab run configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies a config file body; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> std::result::Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(key, value).map_err(|e| format!("{origin}:{}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Experiment spec for `model` on the configured modalities.
    pub fn spec(&self, model: ModelKind) -> ExperimentSpec {
        ExperimentSpec {
            model,
            modalities: self.modalities,
            split: self.split,
            grid: self.grid.clone(),
            n_repeats: self.repeats,
            master_seed: self.seed,
            leakage_safe: self.leakage_safe,
            paper_order: self.paper_order,
            impute: ImputeConfig {
                n_trees: self.impute_trees,
                max_iter: self.impute_max_iter,
                seed: 0,
            },
            fit: FitSettings {
                cm_train: self.train,
                cm_activation: self.activation,
                cm_clip: self.clip,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fuselab", version, about = "Latent-fusion regression benchmark on multimodal panel data")]
struct Cli {
    /// Master seed [default: $FUSELAB_SEED, else 42]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    dump_config: bool,
    /// Fit the feature scaler on all rows before splitting
    #[arg(long, global = true)]
    paper_order: bool,
    /// Impute per repeat from training rows only
    #[arg(long, global = true)]
    leakage_safe: bool,
    /// Only log warnings and errors
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Any config key, e.g. `--set cm.max_epochs=50` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort as the four input tables
    Generate(GenerateArgs),
    /// Fill missing cells with MissForest and write the completed tables
    Impute(InputArgs),
    /// Evaluate models and write results.csv
    Run(RunArgs),
    /// Evaluate each model on the four modality subsets (ablation.csv)
    Ablate(RunArgs),
    /// Evaluate temporal splits over a range of training weeks (sweep.csv)
    Sweep(SweepArgs),
    /// Summarise results tables as report.svg and report.md
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Number of participants [default: 131]
    #[arg(long)]
    participants: Option<usize>,
    /// Fixed number of days per participant [default: random]
    #[arg(long)]
    days: Option<usize>,
    /// Fraction of feature cells to blank [default: 0.1]
    #[arg(long)]
    missing_rate: Option<f64>,
    /// mcar or mar [default: mcar]
    #[arg(long)]
    mechanism: Option<String>,
    /// Scale of the trait-by-state interaction [default: 1]
    #[arg(long)]
    interaction: Option<f64>,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Directory with passive.csv, demographics.csv, phq9.csv and phq2.csv
    /// [default: synthetic benchmark]
    #[arg(long = "in")]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    /// cm, rf, lr, a comma list, or all [default: all]
    #[arg(long)]
    model: Option<String>,
    /// e.g. PF+BG or ALL [default: ALL]
    #[arg(long)]
    modalities: Option<String>,
    /// temporal or random [default: temporal]
    #[arg(long)]
    split: Option<String>,
    /// Training weeks of the temporal split [default: 4]
    #[arg(long)]
    train_weeks: Option<u32>,
    /// Test share of the random split [default: 1/3]
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Number of repeats [default: 5]
    #[arg(long)]
    repeats: Option<usize>,
    /// default or single [default: default]
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// First number of training weeks [default: 1]
    #[arg(long)]
    first_week: Option<u32>,
    /// Last number of training weeks [default: 8]
    #[arg(long)]
    last_week: Option<u32>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Results tables [default: <out>/results.csv]
    inputs: Vec<PathBuf>,
}

/// A command failure and its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Library error (exit 2 for I/O and input format errors, else 1).
    Run(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(e) if e.is_usage_or_io() => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn flag<T: ToString>(pairs: &mut Vec<(&'static str, String)>, key: &'static str, value: &Option<T>) {
    if let Some(v) = value {
        pairs.push((key, v.to_string()));
    }
}

fn run_flags(pairs: &mut Vec<(&'static str, String)>, a: &RunArgs) {
    flag(pairs, "in", &a.input.input.as_ref().map(|p| p.display().to_string()));
    flag(pairs, "model", &a.model);
    flag(pairs, "modalities", &a.modalities);
    flag(pairs, "split", &a.split);
    flag(pairs, "train_weeks", &a.train_weeks);
    flag(pairs, "test_fraction", &a.test_fraction);
    flag(pairs, "repeats", &a.repeats);
    flag(pairs, "grid", &a.grid);
}

fn resolve(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut config = RunConfig::default();
    if let Ok(v) = std::env::var(SEED_ENV) {
        config
            .set("seed", &v)
            .map_err(|e| Failure::Usage(format!("{SEED_ENV}: {e}")))?;
    }
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Run(Error::io(path, e)))?;
        config
            .apply_text(&text, &path.display().to_string())
            .map_err(Failure::Usage)?;
    }

    let mut pairs: Vec<(&'static str, String)> = Vec::new();
    flag(&mut pairs, "seed", &cli.seed);
    flag(&mut pairs, "out", &cli.out.as_ref().map(|p| p.display().to_string()));
    if cli.paper_order {
        pairs.push(("paper_order", "true".into()));
    }
    if cli.leakage_safe {
        pairs.push(("leakage_safe", "true".into()));
    }
    match &cli.command {
        Some(Command::Generate(a)) => {
            flag(&mut pairs, "synth.participants", &a.participants);
            flag(&mut pairs, "synth.days", &a.days);
            flag(&mut pairs, "synth.missing_rate", &a.missing_rate);
            flag(&mut pairs, "synth.mechanism", &a.mechanism);
            flag(&mut pairs, "synth.interaction", &a.interaction);
        }
        Some(Command::Impute(a)) => flag(&mut pairs, "in", &a.input.as_ref().map(|p| p.display().to_string())),
        Some(Command::Run(a)) | Some(Command::Ablate(a)) => run_flags(&mut pairs, a),
        Some(Command::Sweep(a)) => {
            run_flags(&mut pairs, &a.run);
            flag(&mut pairs, "sweep.first", &a.first_week);
            flag(&mut pairs, "sweep.last", &a.last_week);
        }
        Some(Command::Report(_)) | None => {}
    }
    for (k, v) in &pairs {
        config.set(k, v).map_err(|e| Failure::Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k, v).map_err(|e| Failure::Usage(format!("--set: {e}")))?;
    }
    Ok(config)
}

/// Writes every file to a temporary sibling first and renames them only once
/// all writes succeeded.
pub fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let mut tmp = tempfile::Builder::new()
            .prefix(".fuselab-")
            .tempfile_in(dir)
            .map_err(|e| Error::io(dir, e))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.flush())
            .map_err(|e| Error::io(tmp.path(), e))?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, target) in staged {
        tmp.persist(&target).map_err(|e| Error::io(&target, e.error))?;
    }
    Ok(())
}

/// Loads the input tables, or generates the synthetic benchmark.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.input {
        Some(dir) => assemble(&load_dir(dir)?),
        None => {
            let (_, masked) = generate_with_missingness(&config.synth_config())?;
            Ok(masked)
        }
    }
}

fn tables_files(dataset: &Dataset) -> Result<Vec<(String, Vec<u8>)>> {
    Ok(render_tables(&tables_from_dataset(dataset)?)
        .into_iter()
        .map(|(n, b)| (n.to_string(), b))
        .collect())
}

fn line_count(bytes: &[u8]) -> usize {
    bytes.iter().filter(|&&b| b == b'\n').count().saturating_sub(1)
}

pub fn cmd_generate(config: &RunConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let (_, masked) = generate_with_missingness(&config.synth_config())?;
    let mut files = tables_files(&masked)?;
    let mut manifest = format!("seed = {}\n", config.seed);
    manifest.push_str("\n# rows\n");
    for (name, bytes) in &files {
        let _ = writeln!(manifest, "{name} = {}", line_count(bytes));
    }
    manifest.push_str("\n# configuration\n");
    for (k, v) in config.entries().into_iter().filter(|(k, _)| k.starts_with("synth.")) {
        let _ = writeln!(manifest, "{k} = {v}");
    }
    files.push(("manifest.txt".into(), manifest.into_bytes()));
    Ok(files)
}

pub fn cmd_impute(config: &RunConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let dataset = load_dataset(config)?;
    let imp = missforest(
        &dataset,
        &ImputeConfig {
            n_trees: config.impute_trees,
            max_iter: config.impute_max_iter,
            seed: derive_seed(config.seed, IMPUTE_COMMAND_STREAM),
        },
    )?;
    log::info!(
        "imputed {} cells in {} iterations",
        dataset.missing_count(),
        imp.iterations_run
    );
    let mut files = tables_files(&imp.dataset)?;
    let mut trace = String::from("iteration,delta_continuous,delta_categorical\n");
    for (i, d) in imp.delta_trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{},{}", i + 1, d.continuous, d.categorical);
    }
    files.push(("impute_trace.csv".into(), trace.into_bytes()));
    Ok(files)
}

fn results_bytes(results: &[ExperimentResult], extra: ExtraColumn) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_results_csv(&mut buf, results, extra)?;
    Ok(buf)
}

/// One summary line per experiment.
pub fn aggregate_line(result: &ExperimentResult) -> String {
    let s = &result.spec;
    let split = match s.split.mode {
        SplitMode::Temporal => format!("temporal {}w", s.split.train_weeks),
        SplitMode::Random => "random".into(),
    };
    let (tm, tr, rr) = (result.test_mse(), result.test_r2(), result.train_r2());
    format!(
        "{:<3} {:<11} {:<12} test MSE {:.4} ± {:.4}  test R² {:.4} ± {:.4}  train R² {:.4}",
        s.model.tag(),
        s.modalities.to_string(),
        split,
        tm.mean,
        tm.sd,
        tr.mean,
        tr.sd,
        rr.mean
    )
}

pub fn cmd_run(config: &RunConfig) -> Result<Vec<ExperimentResult>> {
    let dataset = load_dataset(config)?;
    let first = config.spec(config.models[0]);
    for &m in &config.models {
        config.spec(m).validate()?;
    }
    let imputed = shared_imputation(&first, &dataset)?;
    config
        .models
        .iter()
        .map(|&m| run_experiment_with(&config.spec(m), &dataset, imputed.as_ref()))
        .collect()
}

pub fn cmd_ablate(config: &RunConfig) -> Result<Vec<ExperimentResult>> {
    let dataset = load_dataset(config)?;
    let spec = config.spec(config.models[0]);
    for &m in &config.models {
        config.spec(m).validate()?;
    }
    ablation_suite(&spec, &dataset, &config.models)
}

pub fn cmd_sweep(config: &RunConfig) -> Result<Vec<ExperimentResult>> {
    let dataset = load_dataset(config)?;
    let first = config.spec(config.models[0]);
    for &m in &config.models {
        config.spec(m).validate()?;
    }
    if first.split.mode != SplitMode::Temporal {
        return Err(Error::Argument("sweep needs the temporal split".into()));
    }
    if config.sweep_first == 0 || config.sweep_first > config.sweep_last {
        return Err(Error::Argument(format!(
            "bad week range {}..={}",
            config.sweep_first, config.sweep_last
        )));
    }
    let imputed = shared_imputation(&first, &dataset)?;
    let mut out = Vec::new();
    for &m in &config.models {
        out.extend(duration_sweep_with(
            &config.spec(m),
            &dataset,
            config.sweep_first..=config.sweep_last,
            imputed.as_ref(),
        )?);
    }
    Ok(out)
}

pub fn cmd_report(config: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<(String, Vec<u8>)>> {
    let default_input = [config.out.join("results.csv")];
    let inputs = if inputs.is_empty() { &default_input[..] } else { inputs };
    let mut records = Vec::new();
    for path in inputs {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let rows = read_results_csv(std::io::BufReader::new(file), &name)?;
        if rows.is_empty() {
            return Err(Error::Parse {
                file: name,
                line: 2,
                message: "no result rows".into(),
            });
        }
        records.extend(rows);
    }
    let report = build_report(&records)?;
    Ok(vec![
        ("report.svg".into(), report.svg.into_bytes()),
        ("report.md".into(), report.markdown.into_bytes()),
    ])
}

fn execute(cli: &Cli, config: &RunConfig) -> std::result::Result<(), Failure> {
    let command = cli
        .command
        .as_ref()
        .ok_or_else(|| Failure::Usage("no command given (try --help)".into()))?;
    let (files, results) = match command {
        Command::Generate(_) => (cmd_generate(config)?, None),
        Command::Impute(_) => (cmd_impute(config)?, None),
        Command::Run(_) => {
            let r = cmd_run(config)?;
            (vec![("results.csv".into(), results_bytes(&r, ExtraColumn::None)?)], Some(r))
        }
        Command::Ablate(_) => {
            let r = cmd_ablate(config)?;
            (vec![("ablation.csv".into(), results_bytes(&r, ExtraColumn::Subset)?)], Some(r))
        }
        Command::Sweep(_) => {
            let r = cmd_sweep(config)?;
            (vec![("sweep.csv".into(), results_bytes(&r, ExtraColumn::Week)?)], Some(r))
        }
        Command::Report(a) => (cmd_report(config, &a.inputs)?, None),
    };
    write_outputs(&config.out, &files)?;
    for r in results.iter().flatten() {
        println!("{}", aggregate_line(r));
        if config.leakage_safe {
            let a = r.audit();
            println!(
                "    test rows touched: imputation {} scaling {} grid search {} fitting {}",
                a.imputation, a.scaling, a.grid_search, a.fitting
            );
        }
    }
    for (name, _) in &files {
        log::info!("wrote {}", config.out.join(name).display());
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();

    let result = resolve(&cli).and_then(|config| {
        if cli.dump_config {
            print!("{}", config.dump());
            Ok(())
        } else {
            execute(&cli, &config)
        }
    });
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("fuselab: {f}");
            f.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::default();
        c.set("synth.days", "14").unwrap();
        c.set("model", "rf,cm").unwrap();
        c.set("in", "data dir").unwrap();
        c.set("grid", "single").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.dump(), "dump").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.models, vec![ModelKind::Cm, ModelKind::Rf]);
        let mut d = RunConfig::default();
        d.apply_text(&RunConfig::default().dump(), "dump").unwrap();
        assert_eq!(d, RunConfig::default());
    }

    #[test]
    fn config_text_comments_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# header\nseed = 7  # trailing\n\ncm.max_epochs=12\n", "f").unwrap();
        assert_eq!((c.seed, c.train.max_epochs), (7, 12));
        let err = c.apply_text("seed = 1\nbogus = 3\n", "f.cfg").unwrap_err();
        assert!(err.contains("f.cfg:2") && err.contains("bogus"), "{err}");
        assert!(c.apply_text("seed 3\n", "f").is_err());
        assert!(c.set("seed", "-1").is_err());
        assert!(c.set("model", "svm").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        let keys: Vec<&str> = c.entries().iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, CONFIG_KEYS);
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(d, c);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Usage("x".into()).exit_code(), 2);
        assert_eq!(Failure::Run(Error::io("p", std::io::Error::other("x"))).exit_code(), 2);
        assert_eq!(Failure::Run(Error::Argument("x".into())).exit_code(), 1);
        assert_eq!(Failure::Run(Error::Argument("x".into()).context("run")).exit_code(), 1);
    }

    #[test]
    fn atomic_writes_leave_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let files = vec![("a.txt".to_string(), b"1".to_vec()), ("b.txt".to_string(), b"2".to_vec())];
        write_outputs(dir.path(), &files).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, vec!["a.txt", "b.txt"]);
        assert_eq!(std::fs::read(dir.path().join("b.txt")).unwrap(), b"2");
    }

    #[test]
    fn generate_fixed_days_row_count() {
        let mut c = RunConfig::default();
        c.set("synth.participants", "10").unwrap();
        c.set("synth.days", "14").unwrap();
        let files = cmd_generate(&c).unwrap();
        let phq2 = files.iter().find(|(n, _)| n == "phq2.csv").unwrap();
        assert_eq!(line_count(&phq2.1), 140);
        let manifest = String::from_utf8(files.last().unwrap().1.clone()).unwrap();
        assert!(manifest.contains("phq2.csv = 140"));
        assert!(manifest.contains("seed = 42"));
    }
}
