//! Experimental protocol: splits, metrics, grid search, seeded repeats,
//! modality ablations and the training-duration sweep.
//!
//! One repeat runs impute, select modalities, one-hot encode, split, scale,
//! grid search, a final fit on the whole training partition, then evaluation.
//! By default imputation sees every row once per experiment and the scaler is
//! fitted on training rows. In leakage-safe mode imputation forests are
//! fitted on training rows only, per repeat.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::dataio::{apply_standardizer, fit_standardizer, one_hot, select_modalities, Dataset, ModalitySet, RowKey};
use crate::error::{Error, Result, ResultExt};
use crate::forest::{default_mtry, fit_forest, forest_predict, Forest, ForestConfig, Task};
use crate::impute::{impute_train_test, missforest, ImputeConfig};
use crate::linreg::{fit_ols, lin_predict, LinearModel, DEFAULT_RIDGE};
use crate::neural::{predict_combined, train_combined, validation_split, Architecture, CombinedModel, TrainConfig};
use crate::numerics::{derive_seed, mean_and_sample_sd, Rng};

const IMPUTE_STREAM: u64 = 0x1001;
const SPLIT_STREAM: u64 = 1;
const GRID_STREAM: u64 = 2;
const FIT_STREAM: u64 = 3;
const CELL_STREAM: u64 = 4;

/// Fraction of training rows held out to score grid cells and to early-stop
/// the combined model.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Cm,
    Rf,
    Lr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cm, ModelKind::Rf, ModelKind::Lr];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Cm => "CM",
            ModelKind::Rf => "RF",
            ModelKind::Lr => "LR",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cm" => Ok(ModelKind::Cm),
            "rf" => Ok(ModelKind::Rf),
            "lr" => Ok(ModelKind::Lr),
            other => Err(Error::Argument(format!("unknown model `{other}` (expected cm, rf or lr)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Temporal,
    Random,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Temporal => "temporal",
            SplitMode::Random => "random",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "temporal" => Ok(SplitMode::Temporal),
            "random" => Ok(SplitMode::Random),
            other => Err(Error::Argument(format!("unknown split mode `{other}`"))),
        }
    }
}

/// Which day count defines a temporal week.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeekBasis {
    /// Days since the participant's own first record.
    Participant,
    /// Days since the first record of the whole study.
    Calendar,
}

impl fmt::Display for WeekBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeekBasis::Participant => "participant",
            WeekBasis::Calendar => "calendar",
        })
    }
}

impl FromStr for WeekBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "participant" => Ok(WeekBasis::Participant),
            "calendar" => Ok(WeekBasis::Calendar),
            other => Err(Error::Argument(format!("unknown week basis `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_weeks: u32,
    pub test_fraction: f64,
    pub week_basis: WeekBasis,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::Temporal,
            train_weeks: 4,
            test_fraction: 1.0 / 3.0,
            week_basis: WeekBasis::Participant,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_weeks == 0 {
            return Err(Error::Argument("train_weeks must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Argument(format!("test_fraction = {} outside (0, 1)", self.test_fraction)));
        }
        Ok(())
    }
}

/// Row indices of a train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn checked_split(train: Vec<usize>, test: Vec<usize>, what: &str) -> Result<Split> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "{what} leaves {} training and {} test rows",
            train.len(),
            test.len()
        )));
    }
    Ok(Split { train, test })
}

/// Rows from a participant's first `train_weeks` weeks train; the rest test.
pub fn split_temporal(dataset: &Dataset, train_weeks: u32, basis: WeekBasis) -> Result<Split> {
    if train_weeks == 0 {
        return Err(Error::Argument("train_weeks must be at least 1".into()));
    }
    let cutoff = 7 * train_weeks;
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| {
        let r = &dataset.rows[i];
        let day = match basis {
            WeekBasis::Participant => r.day_index,
            WeekBasis::Calendar => r.study_day,
        };
        day < cutoff
    });
    checked_split(train, test, &format!("temporal split at {train_weeks} weeks"))
}

/// Uniform row-level holdout of `round(test_fraction * n)` rows.
pub fn split_random(dataset: &Dataset, test_fraction: f64, rng: &mut Rng) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!("test_fraction = {test_fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let order = crate::numerics::seeded_shuffle(rng, (0..n).collect::<Vec<_>>());
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    checked_split(train, test, &format!("random split with fraction {test_fraction}"))
}

fn check_lengths(y: &[f64], pred: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != pred.len() {
        return Err(Error::Metric(format!(
            "metric needs equal non-zero lengths, got {} and {}",
            y.len(),
            pred.len()
        )));
    }
    Ok(())
}

pub fn mse(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(y, pred)?;
    Ok(y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination against the mean of `y` itself.
pub fn r2(y: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(y, pred)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Metric("r2 undefined for a constant target".into()));
    }
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mtry {
    Third,
    Sqrt,
}

impl Mtry {
    fn resolve(self, p: usize) -> usize {
        match self {
            Mtry::Third => default_mtry(Task::Regression, p),
            Mtry::Sqrt => default_mtry(Task::Classification { n_classes: 2 }, p),
        }
    }
}

/// One cell of a hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelParams {
    Cm { latent: usize, learning_rate: f64, hidden: usize },
    Rf { n_trees: usize, min_leaf: usize, mtry: Mtry },
    Lr { ridge: f64 },
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Cm { .. } => ModelKind::Cm,
            ModelParams::Rf { .. } => ModelKind::Rf,
            ModelParams::Lr { .. } => ModelKind::Lr,
        }
    }

    /// Key/value pairs in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        match *self {
            ModelParams::Cm { latent, learning_rate, hidden } => vec![
                ("latent", latent.to_string()),
                ("lr", learning_rate.to_string()),
                ("hidden", hidden.to_string()),
            ],
            ModelParams::Rf { n_trees, min_leaf, mtry } => vec![
                ("n_trees", n_trees.to_string()),
                ("min_leaf", min_leaf.to_string()),
                (
                    "mtry",
                    match mtry {
                        Mtry::Third => "p/3".into(),
                        Mtry::Sqrt => "sqrt(p)".into(),
                    },
                ),
            ],
            ModelParams::Lr { ridge } => vec![("ridge", format!("{ridge:e}"))],
        }
    }

    /// `key=value;...` with keys and values form-urlencoded.
    pub fn encode(&self) -> String {
        let enc = |s: &str| url::form_urlencoded::byte_serialize(s.as_bytes()).collect::<String>();
        self.pairs()
            .iter()
            .map(|(k, v)| format!("{}={}", enc(k), enc(v)))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Number of fitted parameters on `train` (leaf-count bound for forests),
    /// used to break validation ties in favour of smaller models.
    fn complexity(&self, train: &Dataset, arch: &Architecture) -> Result<usize> {
        Ok(match *self {
            ModelParams::Cm { latent, hidden, .. } => {
                let arch = Architecture {
                    latent,
                    encoder_hidden: hidden,
                    regressor_hidden: hidden,
                    ..*arch
                };
                CombinedModel::new(&train.schema, train.schema.modalities(), &arch, 0)?.parameter_count()
            }
            ModelParams::Rf { n_trees, min_leaf, .. } => n_trees * train.len().div_ceil(min_leaf),
            ModelParams::Lr { .. } => train.width() + 1,
        })
    }
}

pub fn default_grid(kind: ModelKind) -> Vec<ModelParams> {
    match kind {
        ModelKind::Cm => {
            let mut grid = Vec::new();
            for latent in [4, 8, 16] {
                for learning_rate in [1e-3, 1e-2] {
                    for hidden in [32, 64] {
                        grid.push(ModelParams::Cm { latent, learning_rate, hidden });
                    }
                }
            }
            grid
        }
        ModelKind::Rf => {
            let mut grid = Vec::new();
            for n_trees in [100, 300] {
                for min_leaf in [1, 5] {
                    for mtry in [Mtry::Third, Mtry::Sqrt] {
                        grid.push(ModelParams::Rf { n_trees, min_leaf, mtry });
                    }
                }
            }
            grid
        }
        ModelKind::Lr => vec![ModelParams::Lr { ridge: DEFAULT_RIDGE }],
    }
}

/// The fixed configuration used when grid search is switched off.
pub fn single_cell(kind: ModelKind) -> ModelParams {
    match kind {
        ModelKind::Cm => ModelParams::Cm {
            latent: 8,
            learning_rate: 1e-3,
            hidden: 32,
        },
        ModelKind::Rf => ModelParams::Rf {
            n_trees: 300,
            min_leaf: 5,
            mtry: Mtry::Third,
        },
        ModelKind::Lr => ModelParams::Lr { ridge: DEFAULT_RIDGE },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridChoice {
    Default,
    Single,
    Custom(Vec<ModelParams>),
}

impl GridChoice {
    pub fn cells(&self, kind: ModelKind) -> Result<Vec<ModelParams>> {
        match self {
            GridChoice::Default => Ok(default_grid(kind)),
            GridChoice::Single => Ok(vec![single_cell(kind)]),
            GridChoice::Custom(cells) => {
                let cells: Vec<ModelParams> = cells.iter().copied().filter(|c| c.kind() == kind).collect();
                if cells.is_empty() {
                    return Err(Error::Argument(format!("grid has no cells for model {kind}")));
                }
                Ok(cells)
            }
        }
    }
}

/// Settings shared by every fit that are not searched over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitSettings {
    /// Learning rate and seed are overridden per fit.
    pub cm_train: TrainConfig,
    pub cm_activation: crate::neural::Activation,
    pub cm_clip: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            cm_train: TrainConfig::default(),
            cm_activation: crate::neural::Activation::Relu,
            cm_clip: true,
        }
    }
}

#[derive(Clone, Debug)]
pub enum FittedModel {
    Cm(Box<CombinedModel>),
    Rf(Forest),
    Lr(LinearModel),
}

/// Fits one configuration. The combined model early-stops on a seeded
/// validation slice of `train`.
pub fn fit_model(params: &ModelParams, train: &Dataset, settings: &FitSettings, seed: u64) -> Result<FittedModel> {
    match *params {
        ModelParams::Cm { latent, learning_rate, hidden } => {
            let arch = Architecture {
                encoder_hidden: hidden,
                latent,
                regressor_hidden: hidden,
                activation: settings.cm_activation,
            };
            let mut cm = CombinedModel::new(&train.schema, train.schema.modalities(), &arch, derive_seed(seed, 0))?;
            if !settings.cm_clip {
                cm.clip = None;
            }
            let (fit_idx, val_idx) = validation_split(train.len(), VALIDATION_FRACTION, derive_seed(seed, 1));
            let cfg = TrainConfig {
                learning_rate,
                seed: derive_seed(seed, 2),
                ..settings.cm_train
            };
            train_combined(&mut cm, &train.subset(&fit_idx), &train.subset(&val_idx), &cfg)?;
            Ok(FittedModel::Cm(Box::new(cm)))
        }
        ModelParams::Rf { n_trees, min_leaf, mtry } => {
            let config = ForestConfig {
                n_trees,
                max_depth: None,
                min_samples_leaf: min_leaf,
                mtry: Some(mtry.resolve(train.width())),
                bootstrap: true,
                seed,
            };
            Ok(FittedModel::Rf(fit_forest(&train.feature_matrix(), &train.targets(), Task::Regression, &config)?))
        }
        ModelParams::Lr { ridge } => Ok(FittedModel::Lr(fit_ols(&train.feature_matrix(), &train.targets(), ridge)?)),
    }
}

pub fn predict_model(model: &FittedModel, data: &Dataset) -> Result<Vec<f64>> {
    match model {
        FittedModel::Cm(cm) => predict_combined(cm, data),
        FittedModel::Rf(forest) => forest_predict(forest, &data.feature_matrix()),
        FittedModel::Lr(lm) => lin_predict(lm, &data.feature_matrix()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub best: ModelParams,
    /// Validation MSE per cell, in grid order.
    pub scores: Vec<f64>,
}

/// Lowest score, then smallest size, then earliest index.
fn select_cell(scores: &[f64], sizes: &[usize]) -> usize {
    (0..scores.len())
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(sizes[a].cmp(&sizes[b])).then(a.cmp(&b)))
        .expect("non-empty grid")
}

/// Scores every cell on a seeded validation slice of `train` and returns the
/// lowest validation MSE; ties go to the smaller model, then the earlier cell.
pub fn grid_search(grid: &[ModelParams], train: &Dataset, settings: &FitSettings, seed: u64) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::Argument("empty hyperparameter grid".into()));
    }
    if grid.len() == 1 {
        return Ok(GridOutcome {
            best: grid[0],
            scores: vec![f64::NAN],
        });
    }
    let (fit_idx, val_idx) = validation_split(train.len(), VALIDATION_FRACTION, seed);
    let fit = train.subset(&fit_idx);
    let val = train.subset(&val_idx);
    let y_val = val.targets();
    let mut scores = Vec::with_capacity(grid.len());
    let mut sizes = Vec::with_capacity(grid.len());
    for (i, cell) in grid.iter().enumerate() {
        let model = fit_model(cell, &fit, settings, derive_seed(seed, CELL_STREAM + i as u64))?;
        let score = mse(&y_val, &predict_model(&model, &val)?)?;
        log::debug!("grid cell {i}: {} -> val mse {score:.5}", cell.encode());
        scores.push(score);
        sizes.push(cell.complexity(&fit, &Architecture::default())?);
    }
    let idx = select_cell(&scores, &sizes);
    Ok(GridOutcome { best: grid[idx], scores })
}

/// Counts of test rows that reached each training-side stage, summed over
/// repeats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LeakageAudit {
    pub imputation: usize,
    pub scaling: usize,
    pub grid_search: usize,
    pub fitting: usize,
}

impl LeakageAudit {
    pub fn is_clean(&self) -> bool {
        *self == LeakageAudit::default()
    }

    fn add(&mut self, other: &LeakageAudit) {
        self.imputation += other.imputation;
        self.scaling += other.scaling;
        self.grid_search += other.grid_search;
        self.fitting += other.fitting;
    }
}

fn touched(test: &HashSet<RowKey>, used: &Dataset) -> usize {
    used.rows.iter().filter(|r| test.contains(&r.key())).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub model: ModelKind,
    pub modalities: ModalitySet,
    pub split: SplitSpec,
    pub grid: GridChoice,
    pub n_repeats: usize,
    pub master_seed: u64,
    /// Impute per repeat from training rows only.
    pub leakage_safe: bool,
    /// Fit the scaler on all rows before splitting.
    pub paper_order: bool,
    /// Its seed is derived from `master_seed`.
    pub impute: ImputeConfig,
    pub fit: FitSettings,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelKind::Cm,
            modalities: ModalitySet::ALL,
            split: SplitSpec::default(),
            grid: GridChoice::Default,
            n_repeats: 5,
            master_seed: 42,
            leakage_safe: false,
            paper_order: false,
            impute: ImputeConfig::default(),
            fit: FitSettings::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_repeats == 0 {
            return Err(Error::Argument("n_repeats must be at least 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Argument("modality subset is empty".into()));
        }
        if self.leakage_safe && self.paper_order {
            return Err(Error::Argument(
                "leakage-safe mode cannot fit the scaler on test rows (drop --paper-order)".into(),
            ));
        }
        self.split.validate()?;
        self.impute.validate()?;
        self.fit.cm_train.validate()?;
        self.grid.cells(self.model).map(|_| ())
    }

    fn describe(&self) -> String {
        match self.split.mode {
            SplitMode::Temporal => format!(
                "{} on {} ({} split, {} weeks)",
                self.model, self.modalities, self.split.mode, self.split.train_weeks
            ),
            SplitMode::Random => format!("{} on {} ({} split)", self.model, self.modalities, self.split.mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatResult {
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub train_r2: f64,
    pub test_r2: f64,
    pub chosen: ModelParams,
    pub audit: LeakageAudit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub repeats: Vec<RepeatResult>,
}

impl ExperimentResult {
    fn summary(&self, f: impl Fn(&RepeatResult) -> f64) -> Summary {
        let values: Vec<f64> = self.repeats.iter().map(f).collect();
        let (mean, sd) = mean_and_sample_sd(&values);
        Summary { mean, sd }
    }

    pub fn train_mse(&self) -> Summary {
        self.summary(|r| r.train_mse)
    }

    pub fn test_mse(&self) -> Summary {
        self.summary(|r| r.test_mse)
    }

    pub fn train_r2(&self) -> Summary {
        self.summary(|r| r.train_r2)
    }

    pub fn test_r2(&self) -> Summary {
        self.summary(|r| r.test_r2)
    }

    pub fn audit(&self) -> LeakageAudit {
        let mut total = LeakageAudit::default();
        for r in &self.repeats {
            total.add(&r.audit);
        }
        total
    }
}

/// Seed of repeat `r`.
pub fn repeat_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, r as u64)
}

/// Imputation over every row, shared by all repeats of a run.
pub fn impute_all(dataset: &Dataset, spec: &ExperimentSpec) -> Result<Dataset> {
    let config = ImputeConfig {
        seed: derive_seed(spec.master_seed, IMPUTE_STREAM),
        ..spec.impute
    };
    let imp = missforest(dataset, &config).context(|| "imputing the full dataset".into())?;
    log::info!(
        "imputation finished after {} iterations ({} missing cells)",
        imp.iterations_run,
        dataset.missing_count()
    );
    Ok(imp.dataset)
}

fn make_split(dataset: &Dataset, split: &SplitSpec, seed: u64) -> Result<Split> {
    match split.mode {
        SplitMode::Temporal => split_temporal(dataset, split.train_weeks, split.week_basis),
        SplitMode::Random => split_random(dataset, split.test_fraction, &mut Rng::new(derive_seed(seed, SPLIT_STREAM))),
    }
}

fn run_repeat(spec: &ExperimentSpec, raw: &Dataset, imputed: Option<&Dataset>, seed: u64) -> Result<RepeatResult> {
    let split = make_split(raw, &spec.split, seed)?;
    let test_keys: HashSet<RowKey> = split.test.iter().map(|&i| raw.rows[i].key()).collect();
    let mut audit = LeakageAudit::default();

    let (train_imp, test_imp) = match imputed {
        Some(full) => {
            if full.missing_count() < raw.missing_count() {
                audit.imputation = touched(&test_keys, full);
            }
            (full.subset(&split.train), full.subset(&split.test))
        }
        None => {
            let train_raw = raw.subset(&split.train);
            let test_raw = raw.subset(&split.test);
            let config = ImputeConfig {
                seed: derive_seed(seed, IMPUTE_STREAM),
                ..spec.impute
            };
            let (tr, te) = impute_train_test(&train_raw, &test_raw, &config)?;
            audit.imputation = touched(&test_keys, &train_raw);
            (tr.dataset, te.dataset)
        }
    };

    let encode = |d: &Dataset| select_modalities(d, spec.modalities).and_then(|d| one_hot(&d));
    let train = encode(&train_imp)?;
    let test = encode(&test_imp)?;

    let (train, test) = if spec.paper_order {
        let all = encode(&match imputed {
            Some(full) => full.clone(),
            None => unreachable!("scaler-first order is rejected with leakage-safe mode"),
        })?;
        let scaler = fit_standardizer(&all, &vec![true; all.len()])?;
        audit.scaling = touched(&test_keys, &all);
        (apply_standardizer(&scaler, &train)?, apply_standardizer(&scaler, &test)?)
    } else {
        let scaler = fit_standardizer(&train, &vec![true; train.len()])?;
        audit.scaling = touched(&test_keys, &train);
        (apply_standardizer(&scaler, &train)?, apply_standardizer(&scaler, &test)?)
    };

    let cells = spec.grid.cells(spec.model)?;
    let outcome = grid_search(&cells, &train, &spec.fit, derive_seed(seed, GRID_STREAM))?;
    audit.grid_search = touched(&test_keys, &train);
    let model = fit_model(&outcome.best, &train, &spec.fit, derive_seed(seed, FIT_STREAM))?;
    audit.fitting = touched(&test_keys, &train);

    let y_train = train.targets();
    let y_test = test.targets();
    let p_train = predict_model(&model, &train)?;
    let p_test = predict_model(&model, &test)?;
    Ok(RepeatResult {
        seed,
        train_mse: mse(&y_train, &p_train)?,
        test_mse: mse(&y_test, &p_test)?,
        train_r2: r2(&y_train, &p_train)?,
        test_r2: r2(&y_test, &p_test)?,
        chosen: outcome.best,
        audit,
    })
}

/// Runs every repeat with `imputed` as the shared imputation (ignored in
/// leakage-safe mode).
pub fn run_experiment_with(spec: &ExperimentSpec, dataset: &Dataset, imputed: Option<&Dataset>) -> Result<ExperimentResult> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("dataset has no rows".into()));
    }
    let owned;
    let shared = if spec.leakage_safe {
        None
    } else if let Some(d) = imputed {
        Some(d)
    } else {
        owned = impute_all(dataset, spec)?;
        Some(&owned)
    };
    let mut repeats = Vec::with_capacity(spec.n_repeats);
    for r in 0..spec.n_repeats {
        let seed = repeat_seed(spec.master_seed, r);
        let result = run_repeat(spec, dataset, shared, seed).context(|| format!("{} (repeat {r})", spec.describe()))?;
        log::info!(
            "{} repeat {r}: test mse {:.4}, test r2 {:.4}",
            spec.describe(),
            result.test_mse,
            result.test_r2
        );
        repeats.push(result);
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        repeats,
    })
}

pub fn run_experiment(spec: &ExperimentSpec, dataset: &Dataset) -> Result<ExperimentResult> {
    run_experiment_with(spec, dataset, None)
}

/// The run-wide imputation, or `None` in leakage-safe mode.
pub fn shared_imputation(spec: &ExperimentSpec, dataset: &Dataset) -> Result<Option<Dataset>> {
    if spec.leakage_safe {
        Ok(None)
    } else {
        impute_all(dataset, spec).map(Some)
    }
}

/// Each model over the four modality subsets, ordered by model then subset.
pub fn ablation_suite(spec: &ExperimentSpec, dataset: &Dataset, models: &[ModelKind]) -> Result<Vec<ExperimentResult>> {
    let present = dataset.schema.modalities();
    if present != ModalitySet::ALL {
        return Err(Error::Argument(format!("ablation needs all three modalities, dataset has {present}")));
    }
    let imputed = shared_imputation(spec, dataset)?;
    let mut out = Vec::new();
    for &model in models {
        for subset in ModalitySet::ablation_subsets() {
            let s = ExperimentSpec {
                model,
                modalities: subset,
                ..spec.clone()
            };
            out.push(run_experiment_with(&s, dataset, imputed.as_ref())?);
        }
    }
    Ok(out)
}

/// Temporal runs for each number of training weeks, the test set being the
/// remaining weeks.
pub fn duration_sweep(spec: &ExperimentSpec, dataset: &Dataset, weeks: std::ops::RangeInclusive<u32>) -> Result<Vec<ExperimentResult>> {
    let imputed = shared_imputation(spec, dataset)?;
    duration_sweep_with(spec, dataset, weeks, imputed.as_ref())
}

/// As [`duration_sweep`], reusing an existing shared imputation.
pub fn duration_sweep_with(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    weeks: std::ops::RangeInclusive<u32>,
    imputed: Option<&Dataset>,
) -> Result<Vec<ExperimentResult>> {
    if spec.split.mode != SplitMode::Temporal {
        return Err(Error::Argument("duration sweep needs the temporal split".into()));
    }
    if weeks.is_empty() || *weeks.start() == 0 {
        return Err(Error::Argument(format!("bad week range {}..={}", weeks.start(), weeks.end())));
    }
    weeks
        .map(|w| {
            let s = ExperimentSpec {
                split: SplitSpec {
                    train_weeks: w,
                    ..spec.split
                },
                ..spec.clone()
            };
            run_experiment_with(&s, dataset, imputed)
        })
        .collect()
}

/// Optional trailing column of a results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtraColumn {
    None,
    Subset,
    Week,
}

pub const RESULT_COLUMNS: [&str; 10] = [
    "model",
    "modalities",
    "split_mode",
    "train_weeks",
    "seed",
    "train_mse",
    "test_mse",
    "train_r2",
    "test_r2",
    "chosen_hparams",
];

/// One line per repeat; floats use the shortest round-tripping form.
pub fn write_results_csv(out: impl Write, results: &[ExperimentResult], extra: ExtraColumn) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = RESULT_COLUMNS.to_vec();
    match extra {
        ExtraColumn::None => {}
        ExtraColumn::Subset => header.push("subset"),
        ExtraColumn::Week => header.push("week"),
    }
    let io = |e: csv::Error| Error::io("results", std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for res in results {
        let s = &res.spec;
        let weeks = match s.split.mode {
            SplitMode::Temporal => s.split.train_weeks.to_string(),
            SplitMode::Random => String::new(),
        };
        for r in &res.repeats {
            let mut rec = vec![
                s.model.to_string(),
                s.modalities.to_string(),
                s.split.mode.to_string(),
                weeks.clone(),
                r.seed.to_string(),
                r.train_mse.to_string(),
                r.test_mse.to_string(),
                r.train_r2.to_string(),
                r.test_r2.to_string(),
                r.chosen.encode(),
            ];
            match extra {
                ExtraColumn::None => {}
                ExtraColumn::Subset => rec.push(s.modalities.to_string()),
                ExtraColumn::Week => rec.push(weeks.clone()),
            }
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io("results", e))
}

/// A results-table line read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub model: String,
    pub modalities: String,
    pub split_mode: String,
    pub train_weeks: Option<u32>,
    pub seed: u64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub train_r2: f64,
    pub test_r2: f64,
    pub chosen_hparams: String,
}

pub fn read_results_csv(input: impl Read, file: &str) -> Result<Vec<ResultRecord>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(input);
    let parse_err = |line: u64, message: String| Error::Parse {
        file: file.to_string(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let mut index = Vec::with_capacity(RESULT_COLUMNS.len());
    for col in RESULT_COLUMNS {
        match headers.iter().position(|h| h == col) {
            Some(i) => index.push(i),
            None => {
                return Err(Error::Schema {
                    file: file.to_string(),
                    column: col.to_string(),
                })
            }
        }
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |k: usize| rec.get(index[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("{} `{}` is not a number", RESULT_COLUMNS[k], field(k))))
        };
        let train_weeks = match field(3) {
            "" => None,
            v => Some(v.parse().map_err(|_| parse_err(line, format!("train_weeks `{v}` is not an integer")))?),
        };
        out.push(ResultRecord {
            model: field(0).to_string(),
            modalities: field(1).to_string(),
            split_mode: field(2).to_string(),
            train_weeks,
            seed: field(4)
                .parse()
                .map_err(|_| parse_err(line, format!("seed `{}` is not an integer", field(4))))?,
            train_mse: num(5)?,
            test_mse: num(6)?,
            train_r2: num(7)?,
            test_r2: num(8)?,
            chosen_hparams: field(9).to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Column, FeatureSchema, Modality, Observation};
    use crate::synth::{generate_with_missingness, SynthConfig};
    use chrono::NaiveDate;

    fn days_dataset(days: &[(&str, u32)]) -> Dataset {
        let schema = FeatureSchema::new(vec![Column::continuous("x", Modality::Pf)]).unwrap();
        let base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let rows = days
            .iter()
            .map(|&(p, d)| Observation {
                participant_id: p.into(),
                date: base + chrono::Days::new(d as u64),
                day_index: d,
                study_day: d,
                features: vec![d as f64],
                target: d as f64,
            })
            .collect();
        Dataset::new(schema, rows).unwrap()
    }

    #[test]
    fn temporal_split_by_week() {
        let days: Vec<(&str, u32)> = (0..84).map(|d| ("a", d)).chain((0..21).map(|d| ("b", d))).collect();
        let ds = days_dataset(&days);
        let split = split_temporal(&ds, 4, WeekBasis::Participant).unwrap();
        let train_days: Vec<u32> = split.train.iter().map(|&i| ds.rows[i].day_index).collect();
        assert!(train_days.iter().all(|&d| d < 28));
        assert!(split.test.iter().all(|&i| ds.rows[i].day_index >= 28 && ds.rows[i].participant_id == "a"));
        assert_eq!(split.train.len(), 28 + 21);
        assert_eq!(split.test.len(), 56);
        assert!(matches!(split_temporal(&ds, 12, WeekBasis::Participant), Err(Error::Split(_))));
    }

    #[test]
    fn random_split_properties() {
        let days: Vec<(&str, u32)> = (0..100).map(|d| ("a", d)).collect();
        let ds = days_dataset(&days);
        let s1 = split_random(&ds, 0.5, &mut Rng::new(3)).unwrap();
        assert_eq!((s1.train.len(), s1.test.len()), (50, 50));
        let train: HashSet<usize> = s1.train.iter().copied().collect();
        assert!(s1.test.iter().all(|i| !train.contains(i)));
        assert_eq!(s1, split_random(&ds, 0.5, &mut Rng::new(3)).unwrap());
        let tiny = days_dataset(&[("a", 0)]);
        assert!(matches!(split_random(&tiny, 0.5, &mut Rng::new(0)), Err(Error::Split(_))));
    }

    #[test]
    fn metric_cases() {
        let y = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(r2(&y, &[1.5; 4]).unwrap(), 0.0);
        assert_eq!(mse(&y, &[0.5, 0.5, 2.5, 2.5]).unwrap(), 0.25);
        assert_eq!(r2(&y, &[0.5, 0.5, 2.5, 2.5]).unwrap(), 0.8);
        assert!(matches!(r2(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Metric(_))));
        assert!(matches!(mse(&[], &[]), Err(Error::Metric(_))));
    }

    /// Target exactly affine in the features across all three modalities.
    fn affine_dataset(n_participants: usize, days: u32) -> Dataset {
        let schema = FeatureSchema::new(vec![
            Column::continuous("a", Modality::Pf),
            Column::continuous("b", Modality::Bg),
            Column::continuous("c", Modality::Phq9),
        ])
        .unwrap();
        let mut rng = Rng::new(12);
        let base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let mut rows = Vec::new();
        for p in 0..n_participants {
            for d in 0..days {
                let f: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
                rows.push(Observation {
                    participant_id: format!("p{p}"),
                    date: base + chrono::Days::new(d as u64),
                    day_index: d,
                    study_day: d,
                    target: 2.0 + 0.5 * f[0] - 0.3 * f[1] + 0.2 * f[2],
                    features: f,
                });
            }
        }
        Dataset::new(schema, rows).unwrap()
    }

    #[test]
    fn linear_model_on_affine_data_is_exact() {
        let ds = affine_dataset(5, 40);
        let spec = ExperimentSpec {
            model: ModelKind::Lr,
            n_repeats: 1,
            ..ExperimentSpec::default()
        };
        let res = run_experiment(&spec, &ds).unwrap();
        assert!(res.test_r2().mean >= 0.999);
        assert_eq!(res.repeats[0].seed, repeat_seed(42, 0));
    }

    #[test]
    fn grid_search_picks_exact_cell() {
        let ds = one_hot(&affine_dataset(4, 30)).unwrap();
        let grid = vec![ModelParams::Lr { ridge: 1e4 }, ModelParams::Lr { ridge: DEFAULT_RIDGE }, ModelParams::Lr { ridge: 10.0 }];
        let out = grid_search(&grid, &ds, &FitSettings::default(), 5).unwrap();
        assert_eq!(out.best, ModelParams::Lr { ridge: DEFAULT_RIDGE });
        assert_eq!(out, grid_search(&grid, &ds, &FitSettings::default(), 5).unwrap());
        assert!(grid_search(&[], &ds, &FitSettings::default(), 5).is_err());
        let single = grid_search(&grid[..1], &ds, &FitSettings::default(), 5).unwrap();
        assert_eq!(single.best, grid[0]);
    }

    #[test]
    fn ties_prefer_smaller_models_then_earlier_cells() {
        assert_eq!(select_cell(&[0.5, 0.4, 0.4], &[1, 9, 3]), 2);
        assert_eq!(select_cell(&[0.4, 0.4, 0.4], &[3, 3, 3]), 0);
        assert_eq!(select_cell(&[0.3, 0.4], &[9, 1]), 0);
    }

    fn small_benchmark() -> Dataset {
        let config = SynthConfig {
            n_participants: 24,
            seed: 3,
            ..SynthConfig::default()
        };
        generate_with_missingness(&config).unwrap().1
    }

    fn quick_spec(model: ModelKind) -> ExperimentSpec {
        ExperimentSpec {
            model,
            grid: GridChoice::Single,
            n_repeats: 2,
            impute: ImputeConfig {
                n_trees: 5,
                max_iter: 2,
                seed: 0,
            },
            fit: FitSettings {
                cm_train: TrainConfig {
                    max_epochs: 5,
                    pretrain_epochs: 2,
                    ..TrainConfig::default()
                },
                ..FitSettings::default()
            },
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn experiments_are_deterministic_and_aggregates_recompute() {
        let ds = small_benchmark();
        for model in ModelKind::ALL {
            let spec = ExperimentSpec {
                grid: GridChoice::Custom(vec![single_cell(model)]),
                ..quick_spec(model)
            };
            let a = run_experiment(&spec, &ds).unwrap();
            let b = run_experiment(&spec, &ds).unwrap();
            let mut ca = Vec::new();
            let mut cb = Vec::new();
            write_results_csv(&mut ca, std::slice::from_ref(&a), ExtraColumn::None).unwrap();
            write_results_csv(&mut cb, &[b], ExtraColumn::None).unwrap();
            assert_eq!(ca, cb);
            let vals: Vec<f64> = a.repeats.iter().map(|r| r.test_r2).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            assert!((a.test_r2().mean - mean).abs() <= 1e-12);
            assert!((a.test_r2().sd - var.sqrt()).abs() <= 1e-12);
            let seeds: Vec<u64> = a.repeats.iter().map(|r| r.seed).collect();
            assert_eq!(seeds, vec![repeat_seed(42, 0), repeat_seed(42, 1)]);
        }
    }

    #[test]
    fn leakage_counters() {
        let ds = small_benchmark();
        let default = run_experiment(&quick_spec(ModelKind::Lr), &ds).unwrap();
        let audit = default.audit();
        assert!(audit.imputation > 0);
        assert_eq!((audit.scaling, audit.grid_search, audit.fitting), (0, 0, 0));

        let scaler_first = ExperimentSpec {
            paper_order: true,
            ..quick_spec(ModelKind::Lr)
        };
        assert!(run_experiment(&scaler_first, &ds).unwrap().audit().scaling > 0);

        let safe = ExperimentSpec {
            leakage_safe: true,
            ..quick_spec(ModelKind::Lr)
        };
        assert!(run_experiment(&safe, &ds).unwrap().audit().is_clean());

        let both = ExperimentSpec {
            leakage_safe: true,
            paper_order: true,
            ..quick_spec(ModelKind::Lr)
        };
        assert!(matches!(run_experiment(&both, &ds), Err(Error::Argument(_))));
    }

    #[test]
    fn ablation_and_sweep_enumerate() {
        let ds = small_benchmark();
        let spec = ExperimentSpec {
            n_repeats: 1,
            ..quick_spec(ModelKind::Lr)
        };
        let abl = ablation_suite(&spec, &ds, &[ModelKind::Lr, ModelKind::Rf]).unwrap();
        assert_eq!(abl.len(), 8);
        let order: Vec<(ModelKind, ModalitySet)> = abl.iter().map(|r| (r.spec.model, r.spec.modalities)).collect();
        assert_eq!(order[0], (ModelKind::Lr, ModalitySet::ablation_subsets()[0]));
        assert_eq!(order[7], (ModelKind::Rf, ModalitySet::ALL));

        let sweep = duration_sweep(&spec, &ds, 1..=4).unwrap();
        let weeks: Vec<u32> = sweep.iter().map(|r| r.spec.split.train_weeks).collect();
        assert_eq!(weeks, vec![1, 2, 3, 4]);
        let random = ExperimentSpec {
            split: SplitSpec {
                mode: SplitMode::Random,
                ..SplitSpec::default()
            },
            ..spec
        };
        assert!(duration_sweep(&random, &ds, 1..=2).is_err());
    }

    #[test]
    fn results_csv_round_trip() {
        let ds = small_benchmark();
        let res = run_experiment(&quick_spec(ModelKind::Rf), &ds).unwrap();
        let mut buf = Vec::new();
        write_results_csv(&mut buf, std::slice::from_ref(&res), ExtraColumn::Week).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("model,modalities,split_mode,train_weeks,seed,train_mse,test_mse,train_r2,test_r2,chosen_hparams,week\n"));
        assert!(text.contains("mtry=p%2F3"));
        let back = read_results_csv(buf.as_slice(), "results.csv").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].test_r2, res.repeats[0].test_r2);
        assert_eq!(back[1].seed, res.repeats[1].seed);

        let bad = "model,modalities,split_mode,train_weeks,seed,train_mse,test_mse,train_r2,test_r2,chosen_hparams\nCM,ALL,temporal,4,1,0.1,x,0.2,0.3,\n";
        match read_results_csv(bad.as_bytes(), "r.csv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hparams_are_url_encoded() {
        let p = ModelParams::Rf { n_trees: 100, min_leaf: 5, mtry: Mtry::Sqrt };
        assert_eq!(p.encode(), "n_trees=100;min_leaf=5;mtry=sqrt%28p%29");
        assert_eq!(ModelParams::Lr { ridge: 1e-8 }.encode(), "ridge=1e-8");
    }
}
