//! Iterative random-forest imputation (MissForest) over mixed
//! continuous/categorical columns.
//!
//! Categorical cells hold category indices; as predictors they enter the
//! trees as ordered codes.

use crate::dataio::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, forest_predict, Forest, ForestConfig, Task};
use crate::numerics::{derive_seed, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImputeConfig {
    pub n_trees: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            n_trees: 50,
            max_iter: 10,
            seed: 0,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_iter == 0 {
            return Err(Error::Argument("n_trees and max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationDelta {
    pub continuous: f64,
    pub categorical: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    pub dataset: Dataset,
    pub iterations_run: usize,
    pub delta_trace: Vec<IterationDelta>,
}

/// Column means (continuous) and modes (categorical, ties to the smallest
/// category) over observed cells.
fn fill_values(dataset: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dataset.width());
    for (c, column) in dataset.schema.columns.iter().enumerate() {
        let observed: Vec<f64> = dataset.rows.iter().map(|r| r.features[c]).filter(|v| !v.is_nan()).collect();
        if observed.is_empty() {
            out.push(f64::NAN);
            continue;
        }
        out.push(match &column.kind {
            ColumnKind::Continuous => observed.iter().sum::<f64>() / observed.len() as f64,
            ColumnKind::Categorical { categories } => {
                let mut counts = vec![0usize; categories.len()];
                for v in &observed {
                    counts[*v as usize] += 1;
                }
                let best = counts.iter().copied().max().unwrap_or(0);
                counts.iter().position(|&n| n == best).unwrap_or(0) as f64
            }
        });
    }
    Ok(out)
}

fn fully_missing_error(dataset: &Dataset, c: usize) -> Error {
    Error::Imputation(format!(
        "column `{}` has no observed values",
        dataset.schema.columns[c].name
    ))
}

/// Mean/mode fill of every missing cell.
pub fn initial_fill(dataset: &Dataset) -> Result<Dataset> {
    let fills = fill_values(dataset)?;
    fill_with(dataset, &fills, dataset)
}

fn fill_with(source: &Dataset, fills: &[f64], target: &Dataset) -> Result<Dataset> {
    let mut out = target.clone();
    for c in 0..out.width() {
        let missing = out.rows.iter().any(|r| r.features[c].is_nan());
        if missing && fills[c].is_nan() {
            return Err(fully_missing_error(source, c));
        }
        for r in &mut out.rows {
            if r.features[c].is_nan() {
                r.features[c] = fills[c];
            }
        }
    }
    Ok(out)
}

fn task_of(dataset: &Dataset, c: usize) -> Task {
    match &dataset.schema.columns[c].kind {
        ColumnKind::Continuous => Task::Regression,
        ColumnKind::Categorical { categories } => Task::Classification {
            n_classes: categories.len(),
        },
    }
}

fn forest_config(task: Task, config: &ImputeConfig, seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: config.n_trees,
        max_depth: None,
        min_samples_leaf: match task {
            Task::Regression => 5,
            Task::Classification { .. } => 1,
        },
        mtry: None,
        bootstrap: true,
        seed,
    }
}

/// Missing cells per column, with columns ordered by ascending missingness
/// (stable, so ties keep schema order). Fully observed columns are dropped.
fn missing_plan(dataset: &Dataset) -> Vec<(usize, Vec<usize>)> {
    let mut plan: Vec<(usize, Vec<usize>)> = (0..dataset.width())
        .map(|c| {
            let rows = dataset
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.features[c].is_nan())
                .map(|(i, _)| i)
                .collect();
            (c, rows)
        })
        .filter(|(_, rows): &(usize, Vec<usize>)| !rows.is_empty())
        .collect();
    plan.sort_by_key(|(_, rows)| rows.len());
    plan
}

fn predictors(x: &Matrix, c: usize) -> Vec<usize> {
    (0..x.cols()).filter(|&j| j != c).collect()
}

fn deltas(dataset: &Dataset, plan: &[(usize, Vec<usize>)], old: &Matrix, new: &Matrix) -> IterationDelta {
    let (mut num, mut den) = (0.0, 0.0);
    let (mut changed, mut total) = (0usize, 0usize);
    for (c, rows) in plan {
        let categorical = dataset.schema.columns[*c].is_categorical();
        for &i in rows {
            let (a, b) = (old.get(i, *c), new.get(i, *c));
            if categorical {
                total += 1;
                changed += usize::from(a != b);
            }
        }
    }
    // Continuous change is normalised by all continuous cells of the new matrix.
    for c in 0..dataset.width() {
        if dataset.schema.columns[c].is_categorical() {
            continue;
        }
        for i in 0..new.rows() {
            let (a, b) = (old.get(i, c), new.get(i, c));
            num += (b - a) * (b - a);
            den += b * b;
        }
    }
    IterationDelta {
        continuous: if den > 0.0 { num / den } else { 0.0 },
        categorical: if total > 0 { changed as f64 / total as f64 } else { 0.0 },
    }
}

fn with_matrix(dataset: &Dataset, x: &Matrix) -> Dataset {
    let mut out = dataset.clone();
    for (i, r) in out.rows.iter_mut().enumerate() {
        r.features.copy_from_slice(x.row(i));
    }
    out
}

/// Stops when neither delta improved on the previous iteration; a variable
/// type with no missing cells is ignored.
fn diverged(current: IterationDelta, previous: IterationDelta, has_cont: bool, has_cat: bool) -> bool {
    let cont = !has_cont || current.continuous >= previous.continuous;
    let cat = !has_cat || current.categorical >= previous.categorical;
    cont && cat
}

/// MissForest: starting from the mean/mode fill, each sweep refits one forest
/// per incomplete column on the rows where it was observed and re-predicts its
/// missing cells. When a sweep fails to improve both deltas, the previous
/// sweep's imputation is returned.
pub fn missforest(dataset: &Dataset, config: &ImputeConfig) -> Result<Imputation> {
    config.validate()?;
    let plan = missing_plan(dataset);
    if plan.is_empty() {
        return Ok(Imputation {
            dataset: dataset.clone(),
            iterations_run: 0,
            delta_trace: Vec::new(),
        });
    }
    let has_cat = plan.iter().any(|(c, _)| dataset.schema.columns[*c].is_categorical());
    let has_cont = plan.iter().any(|(c, _)| !dataset.schema.columns[*c].is_categorical());
    let filled = initial_fill(dataset)?;
    let mut current = filled.feature_matrix();
    let mut trace: Vec<IterationDelta> = Vec::new();

    for iteration in 0..config.max_iter {
        let previous = current.clone();
        for (step, (c, missing)) in plan.iter().enumerate() {
            let c = *c;
            let task = task_of(dataset, c);
            let cols = predictors(&current, c);
            let observed: Vec<usize> = (0..current.rows()).filter(|i| missing.binary_search(i).is_err()).collect();
            let x_obs = current.select_rows(&observed).select_columns(&cols);
            let y_obs: Vec<f64> = observed.iter().map(|&i| current.get(i, c)).collect();
            let seed = derive_seed(derive_seed(config.seed, iteration as u64), step as u64);
            let forest = fit_forest(&x_obs, &y_obs, task, &forest_config(task, config, seed))?;
            let x_mis = current.select_rows(missing).select_columns(&cols);
            for (&i, v) in missing.iter().zip(forest_predict(&forest, &x_mis)?) {
                current.set(i, c, v);
            }
        }
        let delta = deltas(dataset, &plan, &previous, &current);
        log::debug!(
            "missforest iteration {}: delta_cont={:.3e} delta_cat={:.3e}",
            iteration + 1,
            delta.continuous,
            delta.categorical
        );
        let stop = trace.last().is_some_and(|&prev| diverged(delta, prev, has_cont, has_cat));
        trace.push(delta);
        if stop {
            return Ok(Imputation {
                dataset: with_matrix(dataset, &previous),
                iterations_run: iteration + 1,
                delta_trace: trace,
            });
        }
    }
    Ok(Imputation {
        dataset: with_matrix(dataset, &current),
        iterations_run: config.max_iter,
        delta_trace: trace,
    })
}

/// Forests fitted on an imputed training set, one per column, reused to impute
/// rows they never saw.
#[derive(Clone, Debug)]
pub struct FittedImputer {
    fills: Vec<f64>,
    forests: Vec<Option<Forest>>,
    max_iter: usize,
}

/// Fits a per-column forest on `train` (already complete) for every column
/// in `columns`.
pub fn fit_imputer(train: &Dataset, columns: &[usize], config: &ImputeConfig) -> Result<FittedImputer> {
    config.validate()?;
    if train.missing_count() > 0 {
        return Err(Error::Imputation("training set must be fully imputed".into()));
    }
    let x = train.feature_matrix();
    let mut forests = vec![None; train.width()];
    for &c in columns {
        let task = task_of(train, c);
        let cols = predictors(&x, c);
        let seed = derive_seed(config.seed, c as u64);
        forests[c] = Some(fit_forest(&x.select_columns(&cols), &x.column(c), task, &forest_config(task, config, seed))?);
    }
    Ok(FittedImputer {
        fills: fill_values(train)?,
        forests,
        max_iter: config.max_iter,
    })
}

/// Imputes `data` with forests fitted elsewhere: train means/modes first, then
/// repeated sweeps of the fitted forests under the same stopping rule.
pub fn impute_with(imputer: &FittedImputer, reference: &Dataset, data: &Dataset) -> Result<Imputation> {
    let plan = missing_plan(data);
    if plan.is_empty() {
        return Ok(Imputation {
            dataset: data.clone(),
            iterations_run: 0,
            delta_trace: Vec::new(),
        });
    }
    if let Some((c, _)) = plan.iter().find(|(c, _)| imputer.forests[*c].is_none()) {
        return Err(Error::Imputation(format!(
            "no imputation model for column `{}`",
            data.schema.columns[*c].name
        )));
    }
    let has_cat = plan.iter().any(|(c, _)| data.schema.columns[*c].is_categorical());
    let has_cont = plan.iter().any(|(c, _)| !data.schema.columns[*c].is_categorical());
    let mut current = fill_with(reference, &imputer.fills, data)?.feature_matrix();
    let mut trace: Vec<IterationDelta> = Vec::new();
    for iteration in 0..imputer.max_iter {
        let previous = current.clone();
        for (c, missing) in &plan {
            let forest = imputer.forests[*c].as_ref().expect("checked above");
            let x_mis = current.select_rows(missing).select_columns(&predictors(&current, *c));
            for (&i, v) in missing.iter().zip(forest_predict(forest, &x_mis)?) {
                current.set(i, *c, v);
            }
        }
        let delta = deltas(data, &plan, &previous, &current);
        let stop = trace.last().is_some_and(|&prev| diverged(delta, prev, has_cont, has_cat));
        trace.push(delta);
        if stop {
            return Ok(Imputation {
                dataset: with_matrix(data, &previous),
                iterations_run: iteration + 1,
                delta_trace: trace,
            });
        }
    }
    Ok(Imputation {
        dataset: with_matrix(data, &current),
        iterations_run: imputer.max_iter,
        delta_trace: trace,
    })
}

/// Imputes `train` with MissForest, then `test` with forests fitted on the
/// imputed training rows only.
pub fn impute_train_test(train: &Dataset, test: &Dataset, config: &ImputeConfig) -> Result<(Imputation, Imputation)> {
    let train_imp = missforest(train, config)?;
    let columns: Vec<usize> = missing_plan(test).into_iter().map(|(c, _)| c).collect();
    let imputer = fit_imputer(&train_imp.dataset, &columns, &ImputeConfig {
        seed: derive_seed(config.seed, u64::MAX),
        ..*config
    })?;
    let test_imp = impute_with(&imputer, train, test)?;
    Ok((train_imp, test_imp))
}

/// Root mean squared error over the given cells, divided by the standard
/// deviation of the true values there.
pub fn nrmse(truth: &Dataset, imputed: &Dataset, cells: &[(usize, usize)]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let t: Vec<f64> = cells.iter().map(|&(i, c)| truth.rows[i].features[c]).collect();
    let p: Vec<f64> = cells.iter().map(|&(i, c)| imputed.rows[i].features[c]).collect();
    let mse = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64;
    let var = crate::numerics::variance(&t);
    (mse / var).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Column, FeatureSchema, Modality, Observation};
    use crate::numerics::Rng;
    use crate::synth::{apply_missingness, generate, Mechanism, SynthConfig};
    use chrono::NaiveDate;

    fn dataset(columns: Vec<Column>, values: Vec<Vec<f64>>) -> Dataset {
        let date = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let rows = values
            .into_iter()
            .enumerate()
            .map(|(i, features)| Observation {
                participant_id: "p".into(),
                date: date + chrono::Days::new(i as u64),
                day_index: i as u32,
                study_day: i as u32,
                features,
                target: 0.0,
            })
            .collect();
        Dataset::new(FeatureSchema::new(columns).unwrap(), rows).unwrap()
    }

    fn cat(name: &str) -> Column {
        Column::categorical(name, Modality::Bg, vec!["A".into(), "B".into()])
    }

    #[test]
    fn initial_fill_mean_and_mode() {
        let ds = dataset(
            vec![Column::continuous("x", Modality::Pf), cat("g")],
            vec![vec![1.0, 0.0], vec![f64::NAN, 0.0], vec![3.0, f64::NAN], vec![2.0, 1.0]],
        );
        let out = initial_fill(&ds).unwrap();
        assert_eq!(out.column(0), vec![1.0, 2.0, 3.0, 2.0]);
        assert_eq!(out.column(1), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mode_ties_pick_smallest_category() {
        let ds = dataset(vec![cat("g")], vec![vec![1.0], vec![0.0], vec![f64::NAN]]);
        assert_eq!(initial_fill(&ds).unwrap().column(0)[2], 0.0);
    }

    #[test]
    fn fully_missing_column_is_named() {
        let ds = dataset(
            vec![Column::continuous("x", Modality::Pf), Column::continuous("empty", Modality::Pf)],
            vec![vec![1.0, f64::NAN], vec![2.0, f64::NAN]],
        );
        let err = initial_fill(&ds).unwrap_err();
        assert!(matches!(&err, Error::Imputation(m) if m.contains("empty")), "{err}");
        assert!(missforest(&ds, &ImputeConfig::default()).is_err());
    }

    #[test]
    fn complete_data_is_returned_unchanged() {
        let ds = dataset(vec![Column::continuous("x", Modality::Pf)], vec![vec![1.0], vec![2.0]]);
        assert_eq!(initial_fill(&ds).unwrap(), ds);
        let imp = missforest(&ds, &ImputeConfig::default()).unwrap();
        assert_eq!(imp.iterations_run, 0);
        assert!(imp.delta_trace.is_empty());
        assert_eq!(imp.dataset, ds);
    }

    #[test]
    fn correlated_columns_recover_missing_cell() {
        let x: Vec<f64> = (0..60).map(|i| i as f64 / 6.0).collect();
        let mut values: Vec<Vec<f64>> = x.iter().map(|&v| vec![v, v]).collect();
        let truth = values[31][1];
        values[31][1] = f64::NAN;
        let ds = dataset(
            vec![Column::continuous("x", Modality::Pf), Column::continuous("y", Modality::Pf)],
            values,
        );
        let imp = missforest(&ds, &ImputeConfig { seed: 3, ..Default::default() }).unwrap();
        let sd = crate::numerics::variance(&x).sqrt();
        let got = imp.dataset.rows[31].features[1];
        assert!((got - truth).abs() <= 0.15 * sd, "{got} vs {truth}");
    }

    fn masked_synth(seed: u64) -> (Dataset, Dataset) {
        let data = generate(&SynthConfig {
            n_participants: 30,
            fixed_days: Some(20),
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let masked = apply_missingness(&data, 0.1, Mechanism::Mcar, &mut Rng::new(seed + 1)).unwrap();
        (data.dataset, masked)
    }

    fn missing_cells(ds: &Dataset) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for (i, r) in ds.rows.iter().enumerate() {
            for (c, v) in r.features.iter().enumerate() {
                if v.is_nan() && !ds.schema.columns[c].is_categorical() {
                    cells.push((i, c));
                }
            }
        }
        cells
    }

    #[test]
    fn missforest_beats_mean_imputation_and_keeps_invariants() {
        let (truth, masked) = masked_synth(11);
        let config = ImputeConfig { n_trees: 20, seed: 5, ..Default::default() };
        let imp = missforest(&masked, &config).unwrap();
        let cells = missing_cells(&masked);
        let forest_err = nrmse(&truth, &imp.dataset, &cells);
        let mean_err = nrmse(&truth, &initial_fill(&masked).unwrap(), &cells);
        assert!(forest_err < mean_err, "{forest_err} vs {mean_err}");

        assert_eq!(imp.dataset.missing_count(), 0);
        assert!(imp.iterations_run >= 1 && imp.iterations_run <= config.max_iter);
        assert!(imp
            .delta_trace
            .iter()
            .all(|d| d.continuous.is_finite() && d.continuous >= 0.0 && d.categorical >= 0.0));
        for (a, b) in masked.rows.iter().zip(&imp.dataset.rows) {
            for (x, y) in a.features.iter().zip(&b.features) {
                if !x.is_nan() {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        // categorical imputations are valid category indices
        for (c, col) in masked.schema.columns.iter().enumerate() {
            if let Some(cats) = col.categories() {
                assert!(imp.dataset.column(c).iter().all(|v| v.fract() == 0.0 && (*v as usize) < cats.len()));
            }
        }

        let again = missforest(&masked, &config).unwrap();
        assert_eq!(again, imp);
    }

    #[test]
    fn leakage_safe_imputation_completes_both_sides() {
        let (_, masked) = masked_synth(21);
        let train_idx: Vec<usize> = (0..masked.len()).filter(|i| i % 3 != 0).collect();
        let test_idx: Vec<usize> = (0..masked.len()).filter(|i| i % 3 == 0).collect();
        let train = masked.subset(&train_idx);
        let test = masked.subset(&test_idx);
        let config = ImputeConfig { n_trees: 10, max_iter: 4, seed: 1 };
        let (tr, te) = impute_train_test(&train, &test, &config).unwrap();
        assert_eq!(tr.dataset.missing_count(), 0);
        assert_eq!(te.dataset.missing_count(), 0);
        assert_eq!(te.dataset.len(), test.len());
    }

    #[test]
    fn zero_trees_rejected() {
        let ds = dataset(vec![Column::continuous("x", Modality::Pf)], vec![vec![1.0], vec![f64::NAN]]);
        assert!(missforest(&ds, &ImputeConfig { n_trees: 0, ..Default::default() }).is_err());
    }
}
