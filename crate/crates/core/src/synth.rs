//! Synthetic multimodal longitudinal cohorts with known structure.
//!
//! Per participant `i`:
//!
//! * trait `t ~ N(0, latent_trait_sd²)`;
//! * participation length `L = min(G, max_days)` with `G` geometric on
//!   `{1, 2, ..}`, its rate solved so that `E[L] = mean_days`
//!   (or `L = fixed_days` when set);
//! * daily state `s_d = ar * s_{d-1} + sqrt(1 - ar²) * e_d`, stationary N(0, 1);
//! * daily mobility `m_d = -0.6 s_d + 0.8 u_d`, `u_d ~ N(0, 1)`.
//!
//! Passive features (noise terms are independent standard normals `z`):
//!
//! | column                  | link                                   |
//! |-------------------------|----------------------------------------|
//! | `distance_travelled_km` | `exp(1.2 + 0.45 m + 0.25 z)`           |
//! | `movement_radius_km`    | `exp(0.3 + 0.40 m + 0.30 z)`           |
//! | `location_variance`     | `exp(-1.0 + 0.35 m + 0.30 z)`          |
//! | `call_duration_min`     | `exp(2.5 - 0.30 s - 0.15 t + 0.35 z)`  |
//! | `sms_count`             | `round(exp(2.0 - 0.35 s + 0.35 z))`    |
//! | `missed_interactions`   | `round(exp(0.7 + 0.35 s + 0.45 z))`    |
//! | `unique_contacts`       | `round(exp(1.6 - 0.25 t - 0.2 s + 0.3 z))` |
//!
//! Background: `age = clamp(round(38 + 5 t + 9 z), 18, 75)`; gender and
//! marital status are softmax draws with trait-dependent logits.
//! `phq9_baseline = clamp(round(9 + 4.5 t + z), 0, 27)`.
//!
//! Target:
//! `phq2 = clamp(2 + 0.5 t + 0.8 s + 0.04 (age - 38) + 1.2 c t m + noise_sd z, 0, 6)`
//! with `c = interaction_strength`. The `t m` term couples the clinical and
//! passive modalities multiplicatively; a main-effects linear model on the
//! concatenated features cannot represent it. The age term gives the
//! background block information that the baseline PHQ-9 does not carry.

use chrono::{Days, NaiveDate};

use crate::dataio::{raw_schema, Dataset, Modality, Observation, PASSIVE_COLUMNS};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const GENDERS: [&str; 3] = ["Female", "Male", "Other"];
pub const MARITAL_STATUSES: [&str; 4] = ["Divorced", "Married", "Single", "Widowed"];

const TARGET_INTERCEPT: f64 = 2.0;
const TRAIT_EFFECT: f64 = 0.5;
const AGE_EFFECT: f64 = 0.04;
const AGE_CENTRE: f64 = 38.0;
const STATE_EFFECT: f64 = 0.8;
const INTERACTION_EFFECT: f64 = 1.2;
const MAR_STATE_SLOPE: f64 = 1.0;
const MISSINGNESS_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    /// Missing completely at random.
    Mcar,
    /// Passive cells go missing more often on high-state days.
    Mar,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            other => Err(Error::Argument(format!("unknown missingness mechanism `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_participants: usize,
    pub mean_days: f64,
    pub max_days: usize,
    /// Overrides the random participation length.
    pub fixed_days: Option<usize>,
    pub latent_trait_sd: f64,
    pub daily_ar_coeff: f64,
    pub noise_sd: f64,
    pub missing_rate: f64,
    pub mechanism: Mechanism,
    pub interaction_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_participants: 131,
            mean_days: 36.03,
            max_days: 84,
            fixed_days: None,
            latent_trait_sd: 1.0,
            daily_ar_coeff: 0.6,
            noise_sd: 0.5,
            missing_rate: 0.1,
            mechanism: Mechanism::Mcar,
            interaction_strength: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.n_participants == 0 {
            return bad("n_participants must be at least 1".into());
        }
        if self.max_days < 7 {
            return bad(format!("max_days = {} must be at least 7", self.max_days));
        }
        if let Some(d) = self.fixed_days {
            if d == 0 || d > self.max_days {
                return bad(format!("fixed_days = {d} must lie in 1..={}", self.max_days));
            }
        } else if !(1.0..=self.max_days as f64).contains(&self.mean_days) {
            return bad(format!(
                "mean_days = {} must lie in [1, {}]",
                self.mean_days, self.max_days
            ));
        }
        if !(0.0..1.0).contains(&self.daily_ar_coeff) {
            return bad(format!("daily_ar_coeff = {} outside [0, 1)", self.daily_ar_coeff));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate = {} outside [0, 1)", self.missing_rate));
        }
        if !(self.latent_trait_sd >= 0.0) || !(self.noise_sd >= 0.0) {
            return bad("standard deviations must be non-negative".into());
        }
        if !self.interaction_strength.is_finite() {
            return bad("interaction_strength must be finite".into());
        }
        Ok(())
    }
}

/// True latent values behind one generated row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latent {
    pub trait_score: f64,
    pub state: f64,
    pub mobility: f64,
    /// Target before noise and clipping.
    pub signal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    /// Fully observed.
    pub dataset: Dataset,
    /// Aligned with `dataset.rows`.
    pub latents: Vec<Latent>,
}

/// Rate of a geometric on {1, 2, ..} whose `min(G, cap)` has mean `target`.
fn geometric_rate(target: f64, cap: usize) -> f64 {
    let truncated_mean = |p: f64| (1.0 - (1.0 - p).powi(cap as i32)) / p;
    let (mut lo, mut hi) = (1e-12, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        // truncated mean decreases in p
        if truncated_mean(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn participation_length(config: &SynthConfig, rate: f64, rng: &mut Rng) -> usize {
    if let Some(d) = config.fixed_days {
        return d;
    }
    if rate >= 1.0 {
        return 1;
    }
    let u = 1.0 - rng.uniform(); // (0, 1]
    let g = (u.ln() / (1.0 - rate).ln()).ceil().max(1.0);
    (g as usize).min(config.max_days)
}

fn softmax_draw(logits: &[f64], rng: &mut Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut u = rng.uniform() * weights.iter().sum::<f64>();
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn study_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 4).expect("valid date")
}

/// Generates a fully observed cohort. Participant `i` draws from child stream
/// `i` of `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let schema = raw_schema(
        GENDERS.iter().map(|s| s.to_string()).collect(),
        MARITAL_STATUSES.iter().map(|s| s.to_string()).collect(),
    )?;
    let rate = geometric_rate(config.mean_days, config.max_days);
    let master = Rng::new(config.seed);
    let ar = config.daily_ar_coeff;
    let innovation_sd = (1.0 - ar * ar).sqrt();
    let width = schema.len();

    let mut rows = Vec::new();
    let mut latents = Vec::new();
    let mut earliest = u32::MAX;
    for i in 0..config.n_participants {
        let mut rng = master.child(i as u64);
        let t = rng.normal(0.0, config.latent_trait_sd);
        let length = participation_length(config, rate, &mut rng);
        let offset = rng.below(90) as u32;
        earliest = earliest.min(offset);

        let age = (38.0 + 5.0 * t + 9.0 * rng.standard_normal()).round().clamp(18.0, 75.0);
        let gender = softmax_draw(&[0.3 + 0.4 * t, -0.4 * t, -2.0], &mut rng);
        let marital = softmax_draw(
            &[0.3 * t - 0.5, 0.5 - 0.4 * t, 0.3 + 0.2 * t, -2.0],
            &mut rng,
        );
        let phq9 = (9.0 + 4.5 * t + rng.standard_normal()).round().clamp(0.0, 27.0);

        let pid = format!("P{:04}", i + 1);
        let mut s = rng.standard_normal();
        for d in 0..length {
            if d > 0 {
                s = ar * s + innovation_sd * rng.standard_normal();
            }
            let m = -0.6 * s + 0.8 * rng.standard_normal();
            let mut z = || rng.standard_normal();
            let pf = [
                round3((1.2 + 0.45 * m + 0.25 * z()).exp()),
                round3((0.3 + 0.40 * m + 0.30 * z()).exp()),
                round3((-1.0 + 0.35 * m + 0.30 * z()).exp()),
                round3((2.5 - 0.30 * s - 0.15 * t + 0.35 * z()).exp()),
                (2.0 - 0.35 * s + 0.35 * z()).exp().round(),
                (0.7 + 0.35 * s + 0.45 * z()).exp().round(),
                (1.6 - 0.25 * t - 0.2 * s + 0.3 * z()).exp().round(),
            ];
            let signal = TARGET_INTERCEPT
                + TRAIT_EFFECT * t
                + STATE_EFFECT * s
                + AGE_EFFECT * (age - AGE_CENTRE)
                + INTERACTION_EFFECT * config.interaction_strength * t * m;
            let target = (signal + config.noise_sd * rng.standard_normal()).clamp(0.0, 6.0);

            let mut features = Vec::with_capacity(width);
            features.extend_from_slice(&pf);
            features.extend([age, gender as f64, marital as f64, phq9]);
            rows.push(Observation {
                participant_id: pid.clone(),
                date: study_start() + Days::new(u64::from(offset) + d as u64),
                day_index: d as u32,
                study_day: offset + d as u32,
                features,
                target,
            });
            latents.push(Latent {
                trait_score: t,
                state: s,
                mobility: m,
                signal,
            });
        }
    }
    for r in &mut rows {
        r.study_day -= earliest;
    }
    debug_assert_eq!(PASSIVE_COLUMNS.len() + 4, width);
    Ok(SynthData {
        dataset: Dataset::new(schema, rows)?,
        latents,
    })
}

/// Masks passive and background cells; targets and PHQ-9 are never masked.
///
/// Passive cells are masked per row. Background values describe the
/// participant, so each participant's background cell is masked (or kept) on
/// all of that participant's rows at once. Under [`Mechanism::Mar`] a passive
/// cell is masked with probability `sigmoid(logit(rate) + state)`.
pub fn apply_missingness(
    data: &SynthData,
    missing_rate: f64,
    mechanism: Mechanism,
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Argument(format!(
            "missing_rate = {missing_rate} outside [0, 1)"
        )));
    }
    let mut out = data.dataset.clone();
    if missing_rate == 0.0 {
        return Ok(out);
    }
    let schema = &out.schema;
    let pf = schema.columns_of(Modality::Pf);
    let bg = schema.columns_of(Modality::Bg);
    let logit = (missing_rate / (1.0 - missing_rate)).ln();

    let mut bg_mask: std::collections::HashMap<String, Vec<bool>> = Default::default();
    for (row, latent) in out.rows.iter_mut().zip(&data.latents) {
        let p = match mechanism {
            Mechanism::Mcar => missing_rate,
            Mechanism::Mar => 1.0 / (1.0 + (-(logit + MAR_STATE_SLOPE * latent.state)).exp()),
        };
        for &c in &pf {
            if rng.bernoulli(p) {
                row.features[c] = f64::NAN;
            }
        }
        let mask = bg_mask
            .entry(row.participant_id.clone())
            .or_insert_with(|| bg.iter().map(|_| rng.bernoulli(missing_rate)).collect());
        for (&c, &masked) in bg.iter().zip(mask.iter()) {
            if masked {
                row.features[c] = f64::NAN;
            }
        }
    }
    Ok(out)
}

/// Generated cohort plus its masked copy, the masking drawn from a stream
/// derived from `config.seed`.
pub fn generate_with_missingness(config: &SynthConfig) -> Result<(SynthData, Dataset)> {
    let data = generate(config)?;
    let mut rng = Rng::new(config.seed).child(MISSINGNESS_STREAM);
    let masked = apply_missingness(&data, config.missing_rate, config.mechanism, &mut rng)?;
    Ok((data, masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{render_tables, tables_from_dataset};
    use crate::numerics::{cholesky_solve, Matrix};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_participants: 10,
            fixed_days: Some(14),
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn fixed_lengths_give_exact_row_count() {
        let data = generate(&small(1)).unwrap();
        assert_eq!(data.dataset.len(), 140);
        assert_eq!(data.latents.len(), 140);
        assert_eq!(data.dataset.missing_count(), 0);
    }

    /// Least-squares R² with an intercept, via the normal equations.
    fn ols_r2(cols: &[Vec<f64>], y: &[f64]) -> f64 {
        let n = y.len();
        let p = cols.len() + 1;
        let row = |i: usize| {
            let mut r = vec![1.0];
            r.extend(cols.iter().map(|c| c[i]));
            r
        };
        let mut xtx = Matrix::zeros(p, p);
        let mut xty = vec![0.0; p];
        for i in 0..n {
            let r = row(i);
            for a in 0..p {
                xty[a] += r[a] * y[i];
                for b in 0..p {
                    xtx.set(a, b, xtx.get(a, b) + r[a] * r[b]);
                }
            }
        }
        let beta = cholesky_solve(&xtx, &xty).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..n {
            let pred: f64 = row(i).iter().zip(&beta).map(|(a, b)| a * b).sum();
            ss_res += (y[i] - pred).powi(2);
            ss_tot += (y[i] - mean).powi(2);
        }
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn noise_free_additive_target_is_affine_in_latents() {
        let config = SynthConfig {
            noise_sd: 0.0,
            interaction_strength: 0.0,
            daily_ar_coeff: 0.0,
            latent_trait_sd: 0.5,
            ..small(8)
        };
        let data = generate(&config).unwrap();
        let y = data.dataset.targets();
        assert!(y.iter().all(|&v| v > 0.0 && v < 6.0), "no clipping at this seed");
        let t: Vec<f64> = data.latents.iter().map(|l| l.trait_score).collect();
        let s: Vec<f64> = data.latents.iter().map(|l| l.state).collect();
        let age = data.dataset.column(data.dataset.schema.index_of("age").unwrap());
        let r2 = ols_r2(&[t, s, age], &y);
        assert!((r2 - 1.0).abs() <= 1e-6, "r2 = {r2}");
    }

    #[test]
    fn same_seed_gives_identical_csv() {
        let render = |seed| render_tables(&tables_from_dataset(&generate(&small(seed)).unwrap().dataset).unwrap());
        assert_eq!(render(5), render(5));
        assert_ne!(render(5), render(6));
    }

    #[test]
    fn generated_ranges() {
        let data = generate(&SynthConfig::default()).unwrap();
        let ds = &data.dataset;
        assert!(ds.targets().iter().all(|&v| (0.0..=6.0).contains(&v)));
        let phq9 = ds.schema.index_of("phq9_baseline").unwrap();
        assert!(ds.column(phq9).iter().all(|&v| (0.0..=27.0).contains(&v)));
        assert_eq!(ds.participants().len(), 131);
    }

    #[test]
    fn mean_length_near_target() {
        let data = generate(&SynthConfig::default()).unwrap();
        let mean_len = data.dataset.len() as f64 / 131.0;
        assert!((mean_len / 36.03 - 1.0).abs() <= 0.15, "mean length {mean_len}");
        let max_day = data.dataset.rows.iter().map(|r| r.day_index).max().unwrap();
        assert!(max_day < 84);
    }

    #[test]
    fn geometric_rate_hits_truncated_mean() {
        let p = geometric_rate(36.03, 84);
        let mean = (1.0 - (1.0 - p).powi(84)) / p;
        assert!((mean - 36.03).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        for config in [
            SynthConfig { max_days: 6, ..SynthConfig::default() },
            SynthConfig { missing_rate: 1.0, ..SynthConfig::default() },
            SynthConfig { daily_ar_coeff: 1.0, ..SynthConfig::default() },
            SynthConfig { n_participants: 0, ..SynthConfig::default() },
            SynthConfig { fixed_days: Some(100), ..SynthConfig::default() },
        ] {
            assert!(matches!(generate(&config), Err(Error::Argument(_))), "{config:?}");
        }
    }

    #[test]
    fn zero_rate_leaves_data_unchanged() {
        let data = generate(&small(2)).unwrap();
        let out = apply_missingness(&data, 0.0, Mechanism::Mcar, &mut Rng::new(0)).unwrap();
        assert_eq!(out, data.dataset);
    }

    #[test]
    fn rate_of_one_is_rejected() {
        let data = generate(&small(2)).unwrap();
        assert!(apply_missingness(&data, 1.0, Mechanism::Mcar, &mut Rng::new(0)).is_err());
    }

    /// Missing fraction over distinct cells: passive cells per row, background
    /// cells per participant.
    fn missing_fraction(ds: &Dataset) -> (f64, usize) {
        let pf = ds.schema.columns_of(Modality::Pf);
        let bg = ds.schema.columns_of(Modality::Bg);
        let mut missing = 0;
        let mut cells = 0;
        let mut seen = std::collections::HashSet::new();
        for r in &ds.rows {
            for &c in &pf {
                cells += 1;
                missing += usize::from(r.features[c].is_nan());
            }
            if seen.insert(r.participant_id.clone()) {
                for &c in &bg {
                    cells += 1;
                    missing += usize::from(r.features[c].is_nan());
                }
            }
        }
        (missing as f64 / cells as f64, cells)
    }

    #[test]
    fn mcar_fraction_matches_rate() {
        let config = SynthConfig {
            n_participants: 60,
            fixed_days: Some(24),
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        let out = apply_missingness(&data, 0.1, Mechanism::Mcar, &mut Rng::new(17)).unwrap();
        let (frac, cells) = missing_fraction(&out);
        assert!(cells >= 10_000, "{cells}");
        assert!((frac - 0.1).abs() <= 0.02, "{frac}");
        assert!(out.targets().iter().all(|v| !v.is_nan()));
        let phq9 = out.schema.index_of("phq9_baseline").unwrap();
        assert!(out.column(phq9).iter().all(|v| !v.is_nan()));
    }

    #[test]
    fn background_masking_is_per_participant() {
        let data = generate(&small(8)).unwrap();
        let out = apply_missingness(&data, 0.5, Mechanism::Mcar, &mut Rng::new(1)).unwrap();
        let age = out.schema.index_of("age").unwrap();
        for pid in out.participants() {
            let vals: Vec<bool> = out
                .rows
                .iter()
                .filter(|r| r.participant_id == pid)
                .map(|r| r.features[age].is_nan())
                .collect();
            assert!(vals.iter().all(|&v| v == vals[0]));
        }
    }

    #[test]
    fn mar_masks_high_state_days_more() {
        let data = generate(&SynthConfig::default()).unwrap();
        let out = apply_missingness(&data, 0.2, Mechanism::Mar, &mut Rng::new(4)).unwrap();
        let (mut hi, mut hi_n, mut lo, mut lo_n) = (0usize, 0usize, 0usize, 0usize);
        for (r, l) in out.rows.iter().zip(&data.latents) {
            let missing = r.features[0].is_nan() as usize;
            if l.state > 0.0 {
                hi += missing;
                hi_n += 1;
            } else {
                lo += missing;
                lo_n += 1;
            }
        }
        assert!(hi as f64 / hi_n as f64 > lo as f64 / lo_n as f64 + 0.05);
    }

    fn test_r2(x: &Matrix, y: &[f64], train: &[usize], test: &[usize]) -> f64 {
        use crate::linreg::{fit_ols, lin_predict, DEFAULT_RIDGE};
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let model = fit_ols(&x.select_rows(train), &ytr, DEFAULT_RIDGE).unwrap();
        let pred = lin_predict(&model, &x.select_rows(test)).unwrap();
        let mean = yte.iter().sum::<f64>() / yte.len() as f64;
        let ss_res: f64 = pred.iter().zip(&yte).map(|(p, t)| (p - t).powi(2)).sum();
        let ss_tot: f64 = yte.iter().map(|t| (t - mean).powi(2)).sum();
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn interaction_defeats_main_effects_linear_model() {
        let data = generate(&SynthConfig::default()).unwrap();
        let ds = &data.dataset;
        let y = ds.targets();
        let n = ds.len();
        let train: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let observed = crate::dataio::one_hot(ds).unwrap().feature_matrix();
        let oracle = Matrix::from_rows(
            &data
                .latents
                .iter()
                .zip(ds.column(ds.schema.index_of("age").unwrap()))
                .map(|(l, age)| vec![l.trait_score, l.state, age, l.trait_score * l.mobility])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let linear = test_r2(&observed, &y, &train, &test);
        let truth = test_r2(&oracle, &y, &train, &test);
        assert!(truth - linear >= 0.05, "linear {linear} vs oracle {truth}");
    }
}
