//! Per-modality CSV ingestion, merging into a longitudinal dataset, one-hot
//! encoding, z-scoring and modality selection.
//!
//! Ingestion contract (UTF-8, header row, RFC-4180 quoting, extra columns ignored):
//!
//! | file               | columns                                                      |
//! |--------------------|--------------------------------------------------------------|
//! | `passive.csv`      | `participant_id, date`, then [`PASSIVE_COLUMNS`]             |
//! | `demographics.csv` | `participant_id, age, gender, marital_status`                |
//! | `phq9.csv`         | `participant_id, phq9_baseline` (0..=27)                     |
//! | `phq2.csv`         | `participant_id, date, phq2` (0..=6)                         |
//!
//! Dates are `YYYY-MM-DD`. Empty cells and `NA`, `n/a`, `NaN` (any case) are
//! missing; any other unparseable numeric cell is read as missing too.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use log::{debug, warn};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PASSIVE_FILE: &str = "passive.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const PHQ9_FILE: &str = "phq9.csv";
pub const PHQ2_FILE: &str = "phq2.csv";

pub const PASSIVE_COLUMNS: [&str; 7] = [
    "distance_travelled_km",
    "movement_radius_km",
    "location_variance",
    "call_duration_min",
    "sms_count",
    "missed_interactions",
    "unique_contacts",
];

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    /// Passive smartphone features.
    Pf,
    /// Background demographics.
    Bg,
    /// Baseline PHQ-9.
    Phq9,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Pf, Modality::Bg, Modality::Phq9];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Pf => "PF",
            Modality::Bg => "BG",
            Modality::Phq9 => "PHQ9",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Modality::Pf => 1,
            Modality::Bg => 2,
            Modality::Phq9 => 4,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PF" => Ok(Modality::Pf),
            "BG" => Ok(Modality::Bg),
            "PHQ9" => Ok(Modality::Phq9),
            other => Err(Error::Argument(format!("unknown modality `{other}`"))),
        }
    }
}

/// Subset of {PF, BG, PHQ9}; iterates in the fixed order PF, BG, PHQ9.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet(7);

    /// The four subsets evaluated in ablations: PF, PF+BG, BG+PHQ9, all.
    pub fn ablation_subsets() -> [ModalitySet; 4] {
        [
            ModalitySet::of(&[Modality::Pf]),
            ModalitySet::of(&[Modality::Pf, Modality::Bg]),
            ModalitySet::of(&[Modality::Bg, Modality::Phq9]),
            ModalitySet::ALL,
        ]
    }

    pub fn of(modalities: &[Modality]) -> Self {
        ModalitySet(modalities.iter().fold(0, |acc, m| acc | m.bit()))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn is_proper_subset_of(self, other: ModalitySet) -> bool {
        self != other && self.0 & other.0 == self.0
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<&str> = self.iter().map(Modality::tag).collect();
        f.write_str(&tags.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    /// Accepts `ALL` or tags separated by `+`, `,` or whitespace.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(ModalitySet::ALL);
        }
        let mut set = ModalitySet::default();
        for tag in s.split(|c: char| c == '+' || c == ',' || c.is_whitespace()) {
            if !tag.is_empty() {
                set.0 |= tag.parse::<Modality>()?.bit();
            }
        }
        if set.is_empty() {
            return Err(Error::Argument("modality subset is empty".into()));
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnKind {
    Continuous,
    /// Values are stored as indices into the sorted category list.
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub modality: Modality,
    pub kind: ColumnKind,
}

impl Column {
    pub fn continuous(name: &str, modality: Modality) -> Self {
        Column {
            name: name.to_string(),
            modality,
            kind: ColumnKind::Continuous,
        }
    }

    pub fn categorical(name: &str, modality: Modality, mut categories: Vec<String>) -> Self {
        categories.sort();
        categories.dedup();
        Column {
            name: name.to_string(),
            modality,
            kind: ColumnKind::Categorical { categories },
        }
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            ColumnKind::Categorical { categories } => Some(categories),
            ColumnKind::Continuous => None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureSchema {
    pub columns: Vec<Column>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Argument(format!("duplicate column `{}`", c.name)));
            }
            if let Some(cats) = c.categories() {
                if cats.len() < 2 {
                    return Err(Error::Argument(format!(
                        "categorical column `{}` needs at least two categories, found {}",
                        c.name,
                        cats.len()
                    )));
                }
                if cats.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Argument(format!(
                        "categories of `{}` must be sorted and unique",
                        c.name
                    )));
                }
            }
        }
        Ok(FeatureSchema { columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn modalities(&self) -> ModalitySet {
        ModalitySet::of(&self.columns.iter().map(|c| c.modality).collect::<Vec<_>>())
    }

    /// Column indices carrying the given modality, in schema order.
    pub fn columns_of(&self, modality: Modality) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.modality == modality)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One (participant, day) observation.
#[derive(Clone, Debug)]
pub struct Observation {
    pub participant_id: String,
    pub date: NaiveDate,
    /// Days since this participant's first observed day.
    pub day_index: u32,
    /// Days since the earliest date in the whole dataset.
    pub study_day: u32,
    /// NaN marks a missing cell.
    pub features: Vec<f64>,
    pub target: f64,
}

/// Missing cells compare equal to each other.
impl PartialEq for Observation {
    fn eq(&self, other: &Self) -> bool {
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.participant_id == other.participant_id
            && self.date == other.date
            && self.day_index == other.day_index
            && self.study_day == other.study_day
            && same(self.target, other.target)
            && self.features.len() == other.features.len()
            && self.features.iter().zip(&other.features).all(|(&a, &b)| same(a, b))
    }
}

impl Observation {
    pub fn key(&self) -> RowKey {
        RowKey {
            participant_id: self.participant_id.clone(),
            day_index: self.day_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub participant_id: String,
    pub day_index: u32,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub rows: Vec<Observation>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, rows: Vec<Observation>) -> Result<Self> {
        let width = schema.len();
        let mut keys = BTreeSet::new();
        for r in &rows {
            if r.features.len() != width {
                return Err(Error::Shape(format!(
                    "row for {} day {} has {} features, schema has {width}",
                    r.participant_id,
                    r.day_index,
                    r.features.len()
                )));
            }
            if !keys.insert((r.participant_id.as_str(), r.day_index)) {
                return Err(Error::Argument(format!(
                    "duplicate row for participant {} day {}",
                    r.participant_id, r.day_index
                )));
            }
        }
        Ok(Dataset { schema, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.schema.len()
    }

    pub fn feature_matrix(&self) -> Matrix {
        let width = self.width();
        let mut data = Vec::with_capacity(self.len() * width);
        for r in &self.rows {
            data.extend_from_slice(&r.features);
        }
        Matrix::from_vec(self.len(), width, data).expect("row widths validated")
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.features[c]).collect()
    }

    /// Rows by index, order preserved.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Same rows and schema with the feature values replaced.
    pub fn with_features(&self, features: &Matrix) -> Result<Dataset> {
        if features.rows() != self.len() || features.cols() != self.width() {
            return Err(Error::Shape(format!(
                "replacement features are {}x{}, dataset is {}x{}",
                features.rows(),
                features.cols(),
                self.len(),
                self.width()
            )));
        }
        let mut out = self.clone();
        for (i, r) in out.rows.iter_mut().enumerate() {
            r.features.copy_from_slice(features.row(i));
        }
        Ok(out)
    }

    pub fn missing_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.features.iter().filter(|v| v.is_nan()).count())
            .sum()
    }

    pub fn participants(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.participant_id.as_str()).collect()
    }
}

// ---------------------------------------------------------------------------
// Raw tables
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PassiveRecord {
    pub participant_id: String,
    pub date: NaiveDate,
    pub values: [f64; PASSIVE_COLUMNS.len()],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemographicsRecord {
    pub participant_id: String,
    pub age: f64,
    pub gender: Option<String>,
    pub marital_status: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phq9Record {
    pub participant_id: String,
    pub phq9_baseline: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phq2Record {
    pub participant_id: String,
    pub date: NaiveDate,
    pub phq2: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RawTables {
    pub passive: Vec<PassiveRecord>,
    pub demographics: Vec<DemographicsRecord>,
    pub phq9: Vec<Phq9Record>,
    pub phq2: Vec<Phq2Record>,
}

pub fn is_missing_token(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty()
        || t.eq_ignore_ascii_case("na")
        || t.eq_ignore_ascii_case("n/a")
        || t.eq_ignore_ascii_case("nan")
}

fn parse_number(cell: &str) -> f64 {
    if is_missing_token(cell) {
        return f64::NAN;
    }
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => {
            debug!("unparseable numeric cell `{cell}` read as missing");
            f64::NAN
        }
    }
}

fn parse_category(cell: &str) -> Option<String> {
    (!is_missing_token(cell)).then(|| cell.trim().to_string())
}

struct CsvTable {
    file: String,
    header: HashMap<String, usize>,
    records: Vec<(u64, csv::StringRecord)>,
}

impl CsvTable {
    fn read(file: &str, reader: impl Read, required: &[&str]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let parse_err = |line: u64, e: csv::Error| Error::Parse {
            file: file.to_string(),
            line,
            message: e.to_string(),
        };
        let header: HashMap<String, usize> = rdr
            .headers()
            .map_err(|e| parse_err(1, e))?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_string(), i))
            .collect();
        for col in required {
            if !header.contains_key(*col) {
                return Err(Error::Schema {
                    file: file.to_string(),
                    column: col.to_string(),
                });
            }
        }
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e)
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            records.push((line, rec));
        }
        Ok(CsvTable {
            file: file.to_string(),
            header,
            records,
        })
    }

    fn cell<'a>(&self, rec: &'a csv::StringRecord, col: &str) -> &'a str {
        rec.get(self.header[col]).unwrap_or("")
    }

    fn participant(&self, line: u64, rec: &csv::StringRecord) -> Result<String> {
        let id = self.cell(rec, "participant_id").trim();
        if id.is_empty() {
            return Err(Error::Parse {
                file: self.file.clone(),
                line,
                message: "empty participant_id".into(),
            });
        }
        Ok(id.to_string())
    }

    fn date(&self, line: u64, rec: &csv::StringRecord) -> Result<NaiveDate> {
        let raw = self.cell(rec, "date").trim();
        NaiveDate::parse_from_str(raw, DATE_FORMAT).map_err(|_| Error::Parse {
            file: self.file.clone(),
            line,
            message: format!("invalid date `{raw}` (expected YYYY-MM-DD)"),
        })
    }

    fn bounded(&self, line: u64, rec: &csv::StringRecord, col: &str, max: f64) -> Result<f64> {
        let v = parse_number(self.cell(rec, col));
        if v.is_finite() && !(0.0..=max).contains(&v) {
            return Err(Error::Parse {
                file: self.file.clone(),
                line,
                message: format!("{col} = {v} outside [0, {max}]"),
            });
        }
        Ok(v)
    }
}

pub fn read_passive(reader: impl Read) -> Result<Vec<PassiveRecord>> {
    let mut required = vec!["participant_id", "date"];
    required.extend(PASSIVE_COLUMNS);
    let t = CsvTable::read(PASSIVE_FILE, reader, &required)?;
    t.records
        .iter()
        .map(|(line, rec)| {
            let mut values = [f64::NAN; PASSIVE_COLUMNS.len()];
            for (v, col) in values.iter_mut().zip(PASSIVE_COLUMNS) {
                *v = parse_number(t.cell(rec, col));
            }
            Ok(PassiveRecord {
                participant_id: t.participant(*line, rec)?,
                date: t.date(*line, rec)?,
                values,
            })
        })
        .collect()
}

pub fn read_demographics(reader: impl Read) -> Result<Vec<DemographicsRecord>> {
    let t = CsvTable::read(
        DEMOGRAPHICS_FILE,
        reader,
        &["participant_id", "age", "gender", "marital_status"],
    )?;
    t.records
        .iter()
        .map(|(line, rec)| {
            Ok(DemographicsRecord {
                participant_id: t.participant(*line, rec)?,
                age: parse_number(t.cell(rec, "age")),
                gender: parse_category(t.cell(rec, "gender")),
                marital_status: parse_category(t.cell(rec, "marital_status")),
            })
        })
        .collect()
}

pub fn read_phq9(reader: impl Read) -> Result<Vec<Phq9Record>> {
    let t = CsvTable::read(PHQ9_FILE, reader, &["participant_id", "phq9_baseline"])?;
    t.records
        .iter()
        .map(|(line, rec)| {
            Ok(Phq9Record {
                participant_id: t.participant(*line, rec)?,
                phq9_baseline: t.bounded(*line, rec, "phq9_baseline", 27.0)?,
            })
        })
        .collect()
}

pub fn read_phq2(reader: impl Read) -> Result<Vec<Phq2Record>> {
    let t = CsvTable::read(PHQ2_FILE, reader, &["participant_id", "date", "phq2"])?;
    t.records
        .iter()
        .map(|(line, rec)| {
            Ok(Phq2Record {
                participant_id: t.participant(*line, rec)?,
                date: t.date(*line, rec)?,
                phq2: t.bounded(*line, rec, "phq2", 6.0)?,
            })
        })
        .collect()
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Reads the four modality tables.
pub fn load_tables(
    passive_path: &Path,
    demographics_path: &Path,
    phq9_path: &Path,
    phq2_path: &Path,
) -> Result<RawTables> {
    Ok(RawTables {
        passive: read_passive(open(passive_path)?)?,
        demographics: read_demographics(open(demographics_path)?)?,
        phq9: read_phq9(open(phq9_path)?)?,
        phq2: read_phq2(open(phq2_path)?)?,
    })
}

/// Reads `passive.csv`, `demographics.csv`, `phq9.csv` and `phq2.csv` from `dir`.
pub fn load_dir(dir: &Path) -> Result<RawTables> {
    load_tables(
        &dir.join(PASSIVE_FILE),
        &dir.join(DEMOGRAPHICS_FILE),
        &dir.join(PHQ9_FILE),
        &dir.join(PHQ2_FILE),
    )
}

/// Schema of an assembled (pre-encoding) dataset with the given category lists.
pub fn raw_schema(genders: Vec<String>, marital: Vec<String>) -> Result<FeatureSchema> {
    let mut cols: Vec<Column> = PASSIVE_COLUMNS
        .iter()
        .map(|n| Column::continuous(n, Modality::Pf))
        .collect();
    cols.push(Column::continuous("age", Modality::Bg));
    cols.push(Column::categorical("gender", Modality::Bg, genders));
    cols.push(Column::categorical("marital_status", Modality::Bg, marital));
    cols.push(Column::continuous("phq9_baseline", Modality::Phq9));
    FeatureSchema::new(cols)
}

fn category_index(categories: &[String], value: &Option<String>) -> f64 {
    value
        .as_ref()
        .and_then(|v| categories.binary_search(v).ok())
        .map_or(f64::NAN, |i| i as f64)
}

/// Merges the tables into one row per (participant, day) with a PHQ-2 value.
///
/// Passive features join on participant and date; demographics and the
/// baseline PHQ-9 are broadcast to all of a participant's rows. Duplicate
/// (participant, date) entries keep the last occurrence. Rows are ordered by
/// participant id, then date.
pub fn assemble(tables: &RawTables) -> Result<Dataset> {
    let mut phq2: BTreeMap<(&str, NaiveDate), f64> = BTreeMap::new();
    for r in &tables.phq2 {
        if r.phq2.is_nan() {
            warn!(
                "dropping PHQ-2 row for {} on {} with missing score",
                r.participant_id, r.date
            );
            continue;
        }
        if phq2.insert((&r.participant_id, r.date), r.phq2).is_some() {
            warn!(
                "duplicate PHQ-2 entry for {} on {}; keeping the last",
                r.participant_id, r.date
            );
        }
    }
    let mut passive: HashMap<(&str, NaiveDate), &PassiveRecord> = HashMap::new();
    for r in &tables.passive {
        if passive.insert((&r.participant_id, r.date), r).is_some() {
            warn!(
                "duplicate passive entry for {} on {}; keeping the last",
                r.participant_id, r.date
            );
        }
    }
    let demographics: HashMap<&str, &DemographicsRecord> = tables
        .demographics
        .iter()
        .map(|r| (r.participant_id.as_str(), r))
        .collect();
    let phq9: HashMap<&str, f64> = tables
        .phq9
        .iter()
        .map(|r| (r.participant_id.as_str(), r.phq9_baseline))
        .collect();

    let mut genders = BTreeSet::new();
    let mut marital = BTreeSet::new();
    for r in &tables.demographics {
        genders.extend(r.gender.clone());
        marital.extend(r.marital_status.clone());
    }
    let schema = raw_schema(genders.into_iter().collect(), marital.into_iter().collect())?;
    let gender_cats = schema.columns[PASSIVE_COLUMNS.len() + 1]
        .categories()
        .unwrap()
        .to_vec();
    let marital_cats = schema.columns[PASSIVE_COLUMNS.len() + 2]
        .categories()
        .unwrap()
        .to_vec();

    let with_target: BTreeSet<&str> = phq2.keys().map(|(pid, _)| *pid).collect();
    let mut first_day: HashMap<&str, NaiveDate> = HashMap::new();
    for &(pid, date) in phq2.keys().chain(passive.keys()) {
        if with_target.contains(pid) {
            let e = first_day.entry(pid).or_insert(date);
            *e = (*e).min(date);
        }
    }
    let study_start = first_day.values().min().copied();

    let mut warned = BTreeSet::new();
    let mut rows = Vec::with_capacity(phq2.len());
    for (&(pid, date), &score) in &phq2 {
        let mut features = Vec::with_capacity(schema.len());
        match passive.get(&(pid, date)) {
            Some(p) => features.extend_from_slice(&p.values),
            None => features.extend([f64::NAN; PASSIVE_COLUMNS.len()]),
        }
        match demographics.get(pid) {
            Some(d) => {
                features.push(d.age);
                features.push(category_index(&gender_cats, &d.gender));
                features.push(category_index(&marital_cats, &d.marital_status));
            }
            None => {
                if warned.insert(pid) {
                    warn!("participant {pid} has no demographics row; background features left missing");
                }
                features.extend([f64::NAN; 3]);
            }
        }
        features.push(phq9.get(pid).copied().unwrap_or(f64::NAN));
        rows.push(Observation {
            participant_id: pid.to_string(),
            date,
            day_index: (date - first_day[pid]).num_days() as u32,
            study_day: (date - study_start.unwrap()).num_days() as u32,
            features,
            target: score,
        });
    }
    Dataset::new(schema, rows)
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn fmt_number(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Splits an assembled, unencoded dataset back into the four tables.
///
/// Background and PHQ-9 values are per participant: when a participant's
/// rows disagree (after row-level imputation) the continuous value is their
/// mean and the categorical value their mode (ties to the first category).
pub fn tables_from_dataset(dataset: &Dataset) -> Result<RawTables> {
    let names: Vec<&str> = dataset.schema.columns.iter().map(|c| c.name.as_str()).collect();
    let idx = |name: &str| {
        names.iter().position(|n| *n == name).ok_or_else(|| Error::Schema {
            file: "dataset".into(),
            column: name.to_string(),
        })
    };
    let pf: Vec<usize> = PASSIVE_COLUMNS.iter().map(|c| idx(c)).collect::<Result<_>>()?;
    let (age, gender, marital, phq9) = (
        idx("age")?,
        idx("gender")?,
        idx("marital_status")?,
        idx("phq9_baseline")?,
    );
    let cats = |c: usize| dataset.schema.columns[c].categories().map(<[String]>::to_vec);
    let (gender_cats, marital_cats) = match (cats(gender), cats(marital)) {
        (Some(g), Some(m)) => (g, m),
        _ => {
            return Err(Error::Argument(
                "dataset must be unencoded to be written as tables".into(),
            ))
        }
    };

    let mut out = RawTables::default();
    let mut by_participant: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for r in &dataset.rows {
        let mut values = [f64::NAN; PASSIVE_COLUMNS.len()];
        for (v, &c) in values.iter_mut().zip(&pf) {
            *v = r.features[c];
        }
        out.passive.push(PassiveRecord {
            participant_id: r.participant_id.clone(),
            date: r.date,
            values,
        });
        out.phq2.push(Phq2Record {
            participant_id: r.participant_id.clone(),
            date: r.date,
            phq2: r.target,
        });
        by_participant.entry(&r.participant_id).or_default().push(r);
    }
    let mean_of = |rows: &[&Observation], c: usize| {
        let vals: Vec<f64> = rows.iter().map(|r| r.features[c]).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let mode_of = |rows: &[&Observation], c: usize, cats: &[String]| {
        let mut counts = vec![0usize; cats.len()];
        for r in rows {
            let v = r.features[c];
            if !v.is_nan() {
                counts[v as usize] += 1;
            }
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        (best > 0).then(|| cats[counts.iter().position(|&n| n == best).unwrap()].clone())
    };
    for (pid, rows) in by_participant {
        out.demographics.push(DemographicsRecord {
            participant_id: pid.to_string(),
            age: mean_of(&rows, age),
            gender: mode_of(&rows, gender, &gender_cats),
            marital_status: mode_of(&rows, marital, &marital_cats),
        });
        out.phq9.push(Phq9Record {
            participant_id: pid.to_string(),
            phq9_baseline: mean_of(&rows, phq9),
        });
    }
    Ok(out)
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Serialises the tables as `(file name, CSV bytes)` pairs.
pub fn render_tables(tables: &RawTables) -> Vec<(&'static str, Vec<u8>)> {
    let mut passive_header = vec!["participant_id", "date"];
    passive_header.extend(PASSIVE_COLUMNS);
    let date = |d: &NaiveDate| d.format(DATE_FORMAT).to_string();
    vec![
        (
            PASSIVE_FILE,
            csv_bytes(
                &passive_header,
                tables.passive.iter().map(|r| {
                    let mut v = vec![r.participant_id.clone(), date(&r.date)];
                    v.extend(r.values.iter().map(|&x| fmt_number(x)));
                    v
                }),
            ),
        ),
        (
            DEMOGRAPHICS_FILE,
            csv_bytes(
                &["participant_id", "age", "gender", "marital_status"],
                tables.demographics.iter().map(|r| {
                    vec![
                        r.participant_id.clone(),
                        fmt_number(r.age),
                        r.gender.clone().unwrap_or_default(),
                        r.marital_status.clone().unwrap_or_default(),
                    ]
                }),
            ),
        ),
        (
            PHQ9_FILE,
            csv_bytes(
                &["participant_id", "phq9_baseline"],
                tables
                    .phq9
                    .iter()
                    .map(|r| vec![r.participant_id.clone(), fmt_number(r.phq9_baseline)]),
            ),
        ),
        (
            PHQ2_FILE,
            csv_bytes(
                &["participant_id", "date", "phq2"],
                tables
                    .phq2
                    .iter()
                    .map(|r| vec![r.participant_id.clone(), date(&r.date), fmt_number(r.phq2)]),
            ),
        ),
    ]
}

// ---------------------------------------------------------------------------
// Encoding and scaling
// ---------------------------------------------------------------------------

/// One-hot encodes every categorical column using the dataset's own schema.
pub fn one_hot(dataset: &Dataset) -> Result<Dataset> {
    one_hot_with(&dataset.schema, dataset)
}

/// One-hot encodes `dataset` using the category lists of `reference`.
///
/// A categorical column with k categories becomes k indicator columns named
/// `column=category` in sorted category order. A missing value makes all k
/// indicators missing.
pub fn one_hot_with(reference: &FeatureSchema, dataset: &Dataset) -> Result<Dataset> {
    let mut out_cols = Vec::new();
    // per source column: None = passthrough, Some(map) = own index -> reference index
    let mut plans: Vec<Option<(Vec<usize>, usize)>> = Vec::with_capacity(dataset.width());
    for col in &dataset.schema.columns {
        let Some(own) = col.categories() else {
            out_cols.push(col.clone());
            plans.push(None);
            continue;
        };
        let reference_cats = reference
            .columns
            .iter()
            .find(|c| c.name == col.name)
            .and_then(Column::categories)
            .ok_or_else(|| Error::Argument(format!("reference schema lacks categorical `{}`", col.name)))?;
        let map = own
            .iter()
            .map(|v| {
                reference_cats.binary_search(v).map_err(|_| Error::Encoding {
                    column: col.name.clone(),
                    value: v.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for cat in reference_cats {
            out_cols.push(Column::continuous(&format!("{}={cat}", col.name), col.modality));
        }
        plans.push(Some((map, reference_cats.len())));
    }
    let schema = FeatureSchema::new(out_cols)?;
    let rows = dataset
        .rows
        .iter()
        .map(|r| {
            let mut features = Vec::with_capacity(schema.len());
            for (v, plan) in r.features.iter().zip(&plans) {
                match plan {
                    None => features.push(*v),
                    Some((map, k)) => {
                        if v.is_nan() {
                            features.extend(std::iter::repeat_n(f64::NAN, *k));
                        } else {
                            let hot = map[*v as usize];
                            features.extend((0..*k).map(|j| if j == hot { 1.0 } else { 0.0 }));
                        }
                    }
                }
            }
            Observation {
                features,
                ..r.clone()
            }
        })
        .collect();
    Ok(Dataset { schema, rows })
}

/// Per-column mean and population standard deviation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Standardizer {
    stats: Option<Vec<(f64, f64)>>,
}

impl Standardizer {
    pub fn is_fitted(&self) -> bool {
        self.stats.is_some()
    }

    pub fn means(&self) -> Option<Vec<f64>> {
        self.stats.as_ref().map(|s| s.iter().map(|p| p.0).collect())
    }

    pub fn sds(&self) -> Option<Vec<f64>> {
        self.stats.as_ref().map(|s| s.iter().map(|p| p.1).collect())
    }
}

/// Fits column statistics on the rows where `row_mask` is true, skipping
/// missing cells.
pub fn fit_standardizer(dataset: &Dataset, row_mask: &[bool]) -> Result<Standardizer> {
    if row_mask.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "row mask has {} entries for {} rows",
            row_mask.len(),
            dataset.len()
        )));
    }
    let selected = row_mask.iter().filter(|&&m| m).count();
    if selected < 2 {
        return Err(Error::Argument(format!(
            "standardizer needs at least 2 fit rows, got {selected}"
        )));
    }
    let stats = (0..dataset.width())
        .map(|c| {
            let vals: Vec<f64> = dataset
                .rows
                .iter()
                .zip(row_mask)
                .filter(|(_, &m)| m)
                .map(|(r, _)| r.features[c])
                .filter(|v| !v.is_nan())
                .collect();
            if vals.is_empty() {
                return (0.0, 0.0);
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            (mean, var.sqrt())
        })
        .collect();
    Ok(Standardizer { stats: Some(stats) })
}

/// `(x - mean) / sd`; zero-variance columns are only centred. Missing stays missing.
pub fn apply_standardizer(standardizer: &Standardizer, dataset: &Dataset) -> Result<Dataset> {
    let stats = standardizer
        .stats
        .as_ref()
        .ok_or_else(|| Error::State("standardizer applied before fitting".into()))?;
    if stats.len() != dataset.width() {
        return Err(Error::Shape(format!(
            "standardizer fitted on {} columns, dataset has {}",
            stats.len(),
            dataset.width()
        )));
    }
    let mut out = dataset.clone();
    for r in &mut out.rows {
        for (v, &(mean, sd)) in r.features.iter_mut().zip(stats) {
            *v = if sd > 0.0 { (*v - mean) / sd } else { *v - mean };
        }
    }
    Ok(out)
}

/// Keeps only the columns whose modality is in `subset`.
pub fn select_modalities(dataset: &Dataset, subset: ModalitySet) -> Result<Dataset> {
    if subset.is_empty() {
        return Err(Error::Argument("modality subset is empty".into()));
    }
    let keep: Vec<usize> = (0..dataset.width())
        .filter(|&c| subset.contains(dataset.schema.columns[c].modality))
        .collect();
    let schema = FeatureSchema {
        columns: keep.iter().map(|&c| dataset.schema.columns[c].clone()).collect(),
    };
    let rows = dataset
        .rows
        .iter()
        .map(|r| Observation {
            features: keep.iter().map(|&c| r.features[c]).collect(),
            ..r.clone()
        })
        .collect();
    Ok(Dataset { schema, rows })
}
