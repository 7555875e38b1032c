//! Synthetic cohorts, data partitioning and the two-arm federated experiment.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdf::{CohortDataset, ParticipantRecord, PartialDate, Value, DEFAULT_WAVES};
use crate::federated::{
    self, ClientData, ClientId, EvalReport, FedConfig, FedError, GlobalStats, InProcessTransport, RoundMetrics,
    SessionResult, StationPolicy, StationStats, Tap,
};
use crate::pairing::default_catalog;
use crate::profile::{validate, BundleBuilder, ProfileSchema, ResourceBundle, Violation};
use crate::projection::{FlatRow, FlatTable, ProjectionError, ProjectionSpec, Reject};
use crate::survival::{
    corrected_resampled_ttest, fill_values, impute, normalize, Interval, ModelWeights,
    SurvivalBatch, SurvivalError, TrainingConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Federated(#[from] FedError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Profile(#[from] crate::profile::ProfileError),
    #[error(transparent)]
    Cdf(#[from] crate::cdf::CdfError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn argument(msg: impl Into<String>) -> HarnessError {
    HarnessError::Argument(msg.into())
}

// --- Synthetic cohort ---------------------------------------------------------

/// Truncated normal marginal with a log-hazard coefficient per SD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub beta: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, sd: f64, min: f64, max: f64, beta: f64) -> Self {
        Self { mean, sd, min, max, beta }
    }

    fn check(&self, name: &str) -> Result<(), HarnessError> {
        let finite = [self.mean, self.sd, self.min, self.max, self.beta].iter().all(|v| v.is_finite());
        if !finite || self.sd < 0.0 || self.min > self.max || self.mean < self.min || self.mean > self.max {
            return Err(argument(format!("bad marginal for {name}")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.sd == 0.0 {
            return self.mean;
        }
        let normal = Normal::new(self.mean, self.sd).expect("checked sd");
        for _ in 0..1000 {
            let v = normal.sample(rng);
            if (self.min..=self.max).contains(&v) {
                return v;
            }
        }
        self.mean
    }

    fn z(&self, v: f64) -> f64 {
        if self.sd == 0.0 {
            0.0
        } else {
            (v - self.mean) / self.sd
        }
    }
}

/// A baseline measurement stored under a CDF variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub variable: String,
    pub decimals: u32,
    #[serde(flatten)]
    pub marginal: Gaussian,
}

fn measurement(variable: &str, decimals: u32, marginal: Gaussian) -> Measurement {
    Measurement {
        variable: variable.into(),
        decimals,
        marginal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n: usize,
    pub female_fraction: f64,
    pub male_beta: f64,
    pub age: Gaussian,
    pub measurements: Vec<Measurement>,
    /// never, ex, current.
    pub smoking_probabilities: [f64; 3],
    pub smoking_beta: [f64; 3],
    /// Cigarettes per day for ex and current smokers.
    pub smoking_quantity: Gaussian,
    pub type_2_diabetes: f64,
    pub type_2_diabetes_beta: f64,
    pub hypertension: f64,
    pub hypertension_beta: f64,
    /// λ₀, events per year at η = 0.
    pub baseline_hazard: f64,
    /// Uniform censoring window, years.
    pub censoring: [f64; 2],
    pub prevalent_cvd: f64,
    /// Chance that a baseline measurement is absent.
    pub missing_rate: f64,
    /// Scheduled years since baseline, one per wave.
    pub wave_offsets: Vec<f64>,
    pub wave_jitter: f64,
    /// Chance of skipping an intermediate wave.
    pub wave_skip: f64,
    /// stroke, myocardial infarction, heart failure.
    pub event_mix: [f64; 3],
}

const EVENT_PREFIXES: [&str; 3] = ["STROKE", "MI", "HF"];

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n: 30_000,
            female_fraction: 0.589,
            male_beta: 0.35,
            age: Gaussian::new(44.4, 13.1, 18.0, 90.0, 0.85),
            measurements: vec![
                measurement("SYSTOLIC_BP", 0, Gaussian::new(127.1, 16.1, 80.0, 220.0, 0.30)),
                measurement("DIASTOLIC_BP", 0, Gaussian::new(73.7, 9.5, 40.0, 130.0, 0.05)),
                measurement("HDL_CHOL", 2, Gaussian::new(1.5, 0.4, 0.3, 4.0, -0.15)),
                measurement("LDL_CHOL", 2, Gaussian::new(3.3, 0.9, 0.5, 9.0, 0.10)),
                measurement("TOTAL_CHOL", 2, Gaussian::new(5.1, 1.0, 2.0, 12.0, 0.10)),
                measurement("HBA1C", 0, Gaussian::new(36.7, 5.1, 20.0, 120.0, 0.10)),
                measurement("CREATININE", 0, Gaussian::new(76.2, 14.7, 30.0, 300.0, 0.05)),
                measurement("ALBUMIN", 0, Gaussian::new(45.1, 2.4, 30.0, 60.0, -0.05)),
            ],
            smoking_probabilities: [0.458, 0.365, 0.177],
            smoking_beta: [0.0, 0.15, 0.50],
            smoking_quantity: Gaussian::new(12.1, 11.2, 1.0, 60.0, 0.0),
            type_2_diabetes: 0.027,
            type_2_diabetes_beta: 0.55,
            hypertension: 0.247,
            hypertension_beta: 0.30,
            baseline_hazard: 0.006,
            censoring: [2.6, 10.0],
            prevalent_cvd: 0.019,
            missing_rate: 0.02,
            wave_offsets: vec![0.0, 1.6, 3.2, 4.8, 6.4, 8.0, 10.0],
            wave_jitter: 0.15,
            wave_skip: 0.05,
            event_mix: [0.35, 0.35, 0.30],
        }
    }
}

fn check_probabilities(name: &str, p: &[f64]) -> Result<(), HarnessError> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(argument(format!("{name} must be probabilities summing to 1")));
    }
    Ok(())
}

impl SynthParams {
    pub fn check(&self) -> Result<(), HarnessError> {
        self.age.check("age")?;
        self.smoking_quantity.check("smoking quantity")?;
        for m in &self.measurements {
            m.marginal.check(&m.variable)?;
        }
        check_probabilities("smoking probabilities", &self.smoking_probabilities)?;
        check_probabilities("event mix", &self.event_mix)?;
        for (name, p) in [
            ("female fraction", self.female_fraction),
            ("type 2 diabetes prevalence", self.type_2_diabetes),
            ("hypertension prevalence", self.hypertension),
            ("prevalent CVD rate", self.prevalent_cvd),
            ("missing rate", self.missing_rate),
            ("wave skip rate", self.wave_skip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(argument(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.baseline_hazard > 0.0 && self.baseline_hazard.is_finite()) {
            return Err(argument("baseline hazard must be positive"));
        }
        let [lo, hi] = self.censoring;
        if !(0.0 < lo && lo <= hi && hi.is_finite()) {
            return Err(argument("censoring window must satisfy 0 < lo <= hi"));
        }
        if self.wave_offsets.len() != DEFAULT_WAVES.len()
            || self.wave_offsets[0] != 0.0
            || self.wave_offsets.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(argument(format!(
                "wave offsets must be {} increasing values starting at 0",
                DEFAULT_WAVES.len()
            )));
        }
        let gap = self.wave_offsets.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if !(0.0..gap / 2.0).contains(&self.wave_jitter) {
            return Err(argument("wave jitter must be below half the smallest wave gap"));
        }
        Ok(())
    }
}

/// What the generator knows but the records only hint at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentOutcome {
    pub id: String,
    pub eta: f64,
    /// Years to the first CVD event.
    pub event_time: f64,
    /// Years to loss of follow-up.
    pub censor_time: f64,
    pub prevalent: bool,
}

impl LatentOutcome {
    pub fn observed_event(&self) -> bool {
        !self.prevalent && self.event_time <= self.censor_time
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub dataset: CohortDataset,
    pub truth: Vec<LatentOutcome>,
}

fn round_to(v: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (v * f).round() / f
}

fn categorical(rng: &mut ChaCha8Rng, probabilities: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

fn flag(yes: bool) -> Value {
    Value::text(if yes { "yes" } else { "no" })
}

fn add_days(d: NaiveDate, days: f64) -> NaiveDate {
    d.checked_add_days(Days::new(days.round().max(0.0) as u64)).expect("date in range")
}

/// Draws participants from the marginals and writes them as wave-structured
/// CDF records: baseline measurements at 1A, condition follow-up flags and
/// assessment dates at every attended wave.
pub fn synth_cohort(params: &SynthParams, seed: u64) -> Result<SynthCohort, HarnessError> {
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epoch = NaiveDate::from_ymd_opt(2006, 1, 1).expect("valid date");
    let mut records = Vec::with_capacity(params.n);
    let mut truth = Vec::with_capacity(params.n);
    let [c_lo, c_hi] = params.censoring;
    for i in 0..params.n {
        let id = format!("P{i:06}");
        let mut r = ParticipantRecord::new(&id);
        let baseline = add_days(epoch, rng.random_range(0..2922) as f64);
        r.set("DATE", "1A", Value::Date(PartialDate::from_naive(baseline)));

        let female = rng.random::<f64>() < params.female_fraction;
        r.set("GENDER", "1A", Value::text(if female { "female" } else { "male" }));
        let mut eta = if female { 0.0 } else { params.male_beta };

        let age = params.age.draw(&mut rng);
        r.set("AGE", "1A", Value::Integer(age.floor() as i64));
        eta += params.age.beta * params.age.z(age);

        for m in &params.measurements {
            let v = m.marginal.draw(&mut rng);
            eta += m.marginal.beta * m.marginal.z(v);
            if rng.random::<f64>() >= params.missing_rate {
                r.set(&m.variable, "1A", Value::Decimal(round_to(v, m.decimals)));
            }
        }

        let smoking = categorical(&mut rng, &params.smoking_probabilities);
        eta += params.smoking_beta[smoking];
        r.set("SMOKING_STATUS", "1A", Value::text(["never", "ex", "current"][smoking]));
        let quantity = if smoking == 0 {
            0.0
        } else {
            round_to(params.smoking_quantity.draw(&mut rng), 0)
        };
        if rng.random::<f64>() >= params.missing_rate {
            r.set("SMOKING_QUANTITY", "1A", Value::Decimal(quantity));
        }

        for (prefix, prevalence, beta) in [
            ("T2D", params.type_2_diabetes, params.type_2_diabetes_beta),
            ("HYPERTENSION", params.hypertension, params.hypertension_beta),
        ] {
            let present = rng.random::<f64>() < prevalence;
            r.set(&format!("{prefix}_PRESENCE"), "1A", flag(present));
            if present {
                eta += beta;
                let start = (age - rng.random_range(0.0..15.0)).max(18.0).min(age).floor();
                r.set(&format!("{prefix}_STARTAGE"), "1A", Value::Integer(start as i64));
            }
        }

        let prevalent = rng.random::<f64>() < params.prevalent_cvd;
        let kind = categorical(&mut rng, &params.event_mix);
        let u: f64 = rng.random();
        let event_time = -(1.0 - u).ln() / (params.baseline_hazard * eta.exp());
        let censor_time = rng.random_range(c_lo..=c_hi);

        for (k, prefix) in EVENT_PREFIXES.iter().enumerate() {
            let at_baseline = prevalent && k == kind;
            r.set(&format!("{prefix}_PRESENCE"), "1A", flag(at_baseline));
            if at_baseline {
                let start = (age - rng.random_range(1.0..10.0)).floor();
                r.set(&format!("{prefix}_STARTAGE"), "1A", Value::Integer(start as i64));
            }
        }

        // Waves after the censoring time are never attended; the event is
        // reported at the first attended wave after it happened.
        let offsets: Vec<f64> = params
            .wave_offsets
            .iter()
            .enumerate()
            .map(|(w, &o)| if w == 0 { 0.0 } else { o + rng.random_range(-1.0..=1.0) * params.wave_jitter })
            .collect();
        let final_wave = offsets.iter().rposition(|&o| o <= censor_time).unwrap_or(0);
        for (w, wave) in DEFAULT_WAVES.iter().enumerate() {
            if w > final_wave {
                break;
            }
            let skipped = w > 0 && w < final_wave && rng.random::<f64>() < params.wave_skip;
            if skipped {
                continue;
            }
            let date = add_days(baseline, offsets[w] * 365.25);
            r.set("DATE", wave, Value::Date(PartialDate::from_naive(date)));
            let reported = !prevalent && w > 0 && offsets[w] >= event_time;
            for (k, prefix) in EVENT_PREFIXES.iter().enumerate() {
                r.set(&format!("{prefix}_FOLLOWUP"), wave, flag(reported && k == kind));
            }
            if reported {
                break;
            }
        }

        records.push(r);
        truth.push(LatentOutcome {
            id,
            eta,
            event_time,
            censor_time,
            prevalent,
        });
    }
    Ok(SynthCohort {
        dataset: CohortDataset::from_records(records)?,
        truth,
    })
}

// --- Harmonization ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Harmonized {
    pub bundles: Vec<ResourceBundle>,
    pub violations: Vec<Violation>,
}

/// CDF records to validated resource bundles with the default rules and schema.
pub fn harmonize(dataset: &CohortDataset) -> Result<Harmonized, HarnessError> {
    let schema = ProfileSchema::default_schema();
    let builder = BundleBuilder::new(default_catalog(), schema.clone())?;
    let bundles = builder.build_all(dataset);
    let violations = bundles.iter().flat_map(|b| validate(b, &schema)).collect();
    Ok(Harmonized { bundles, violations })
}

#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub table: FlatTable,
    pub rejects: Vec<Reject>,
    pub violations: Vec<Violation>,
}

/// Harmonize and flatten; rejected participants (prevalent CVD, missing
/// dates) are excluded from the table.
pub fn prepare_cohort(dataset: &CohortDataset, spec: &ProjectionSpec) -> Result<PreparedCohort, HarnessError> {
    let h = harmonize(dataset)?;
    let projection = spec.compile()?;
    projection.check_schema(&ProfileSchema::default_schema())?;
    let (table, rejects) = projection.flatten(&h.bundles);
    Ok(PreparedCohort {
        table,
        rejects,
        violations: h.violations,
    })
}

// --- Partitioning -------------------------------------------------------------

/// Splits `n` into integer parts proportional to `fractions`: floors first,
/// then leftover units to the largest fractional remainders, earlier parts
/// winning ties.
pub fn allocate(n: usize, fractions: &[f64]) -> Result<Vec<usize>, HarnessError> {
    if fractions.is_empty()
        || fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(argument("fractions must be non-negative and sum to 1"));
    }
    // Quotas in exact integer arithmetic on a fine grid, so 0.2 * 74115 is
    // 14823 and not 14823.000000000002.
    const SCALE: u128 = 1 << 40;
    let units: Vec<u128> = fractions.iter().map(|f| (f * SCALE as f64).round() as u128).collect();
    let total: u128 = units.iter().sum();
    let quotas: Vec<(u128, u128)> = units
        .iter()
        .map(|&u| ((n as u128 * u) / total, (n as u128 * u) % total))
        .collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.0 as usize).collect();
    let left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.cmp(&quotas[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn cut(table: &FlatTable, fractions: &[f64], seed: u64) -> Result<Vec<FlatTable>, HarnessError> {
    let sizes = allocate(table.len(), fractions)?;
    let idx = shuffled(table.len(), seed);
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        out.push(table.select(&idx[start..start + s]));
        start += s;
    }
    Ok(out)
}

/// Random disjoint row partition, one table per fraction.
pub fn partition(table: &FlatTable, fractions: &[f64], seed: u64) -> Result<Vec<FlatTable>, HarnessError> {
    cut(table, fractions, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: FlatTable,
    pub valid: FlatTable,
    pub test: FlatTable,
}

pub fn split_tvt(table: &FlatTable, ratio: [f64; 3], seed: u64) -> Result<Splits, HarnessError> {
    let mut parts = cut(table, &ratio, seed)?.into_iter();
    Ok(Splits {
        train: parts.next().expect("three parts"),
        valid: parts.next().expect("three parts"),
        test: parts.next().expect("three parts"),
    })
}

// --- WHAS ---------------------------------------------------------------------

pub const WHAS_COLUMNS: [&str; 5] = ["age", "sex", "bmi", "chf", "miord"];

/// Accepted header spellings per column, after lowercasing.
const WHAS_ALIASES: [(&str, &[&str]); 7] = [
    ("age", &["age"]),
    ("sex", &["sex", "gender"]),
    ("bmi", &["bmi"]),
    ("chf", &["chf"]),
    ("miord", &["miord", "mi_order"]),
    ("time", &["lenfol", "time", "duration"]),
    ("event", &["fstat", "status", "event"]),
];

/// Loads the five-predictor WHAS table with follow-up length and status.
pub fn load_whas<R: Read>(input: R) -> Result<FlatTable, HarnessError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let mut positions = Vec::new();
    let mut missing = Vec::new();
    for (name, aliases) in WHAS_ALIASES {
        match header.iter().position(|h| aliases.contains(&h.as_str())) {
            Some(i) => positions.push(i),
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::Format(format!("missing WHAS columns: {}", missing.join(", "))));
    }
    let id_col = header.iter().position(|h| h == "id");
    let mut table = FlatTable::new(
        WHAS_COLUMNS.iter().map(|c| c.to_string()).collect(),
        vec![false, true, false, true, true],
    );
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, HarnessError> {
            let cell = rec.get(positions[i]).unwrap_or("");
            cell.parse::<f64>()
                .map_err(|_| HarnessError::Format(format!("row {}: {:?} is not a number", line + 1, cell)))
        };
        let cells = (0..5).map(|i| num(i).map(Some)).collect::<Result<Vec<_>, _>>()?;
        let event = num(6)?;
        if event != 0.0 && event != 1.0 {
            return Err(HarnessError::Format(format!("row {}: status must be 0 or 1", line + 1)));
        }
        table.rows.push(FlatRow {
            id: id_col
                .and_then(|i| rec.get(i))
                .map(str::to_string)
                .unwrap_or_else(|| (line + 1).to_string()),
            cells,
            event_time: num(5)?,
            event: event == 1.0,
        });
    }
    Ok(table)
}

// --- Experiment ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synth {
        #[serde(default)]
        params: SynthParams,
        #[serde(default)]
        cohort_seed: u64,
    },
    Whas {
        path: PathBuf,
    },
    /// A flattened table as written by `FlatTable::write_csv`.
    Table {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub client_fractions: Vec<f64>,
    pub split: [f64; 3],
    pub rounds: u32,
    pub seeds: Vec<u64>,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            dataset: DatasetSource::Synth {
                params: SynthParams::default(),
                cohort_seed: 2024,
            },
            client_fractions: vec![0.5, 0.3, 0.2],
            split: [0.6, 0.2, 0.2],
            rounds: federated::DEFAULT_ROUNDS,
            seeds: (0..10).collect(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), HarnessError> {
        allocate(100, &self.client_fractions)?;
        allocate(100, &self.split)?;
        if self.rounds == 0 {
            return Err(argument("rounds must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(argument("at least one seed is required"));
        }
        self.training.check()?;
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.check()?;
        Ok(cfg)
    }

    /// Makes relative dataset paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        match &mut self.dataset {
            DatasetSource::Whas { path } | DatasetSource::Table { path } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransportConfig {
    InProcess,
    /// The server listens on `bind`; stations connect to it.
    Tcp { bind: String },
}

/// One FedAvg session, possibly across processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub experiment: ExperimentConfig,
    pub transport: TransportConfig,
    pub seed: u64,
    pub timeout_secs: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            transport: TransportConfig::InProcess,
            seed: 0,
            timeout_secs: federated::DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

impl SessionConfig {
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg: SessionConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.experiment.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.experiment.check()?;
        if cfg.timeout_secs == 0 {
            return Err(argument("timeout_secs must be positive"));
        }
        Ok(cfg)
    }

    pub fn clients(&self) -> usize {
        self.experiment.client_fractions.len()
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs(self.timeout_secs)
    }
}

/// The modelling table plus what the stations enforce.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub table: FlatTable,
    pub spec: Option<ProjectionSpec>,
    pub excluded: usize,
}

pub fn load_dataset(source: &DatasetSource) -> Result<ExperimentData, HarnessError> {
    match source {
        DatasetSource::Synth { params, cohort_seed } => {
            let cohort = synth_cohort(params, *cohort_seed)?;
            let spec = ProjectionSpec::default_spec();
            let prepared = prepare_cohort(&cohort.dataset, &spec)?;
            if let Some(v) = prepared.violations.first() {
                return Err(HarnessError::Format(format!(
                    "{} profile violations, first on {}",
                    prepared.violations.len(),
                    v.resource_id
                )));
            }
            Ok(ExperimentData {
                table: prepared.table,
                spec: Some(spec),
                excluded: prepared.rejects.len(),
            })
        }
        DatasetSource::Whas { path } => Ok(ExperimentData {
            table: load_whas(std::fs::File::open(path)?)?,
            spec: None,
            excluded: 0,
        }),
        DatasetSource::Table { path } => Ok(ExperimentData {
            table: FlatTable::read_csv(std::fs::File::open(path)?)?,
            spec: None,
            excluded: 0,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub client: ClientId,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Per-client preprocessing: impute, scale to [0, 1] with the client's own
/// ranges, then split.
pub fn prepare_client(part: &FlatTable, split: [f64; 3], seed: u64) -> Result<(ClientData, SplitSizes), HarnessError> {
    let fill = fill_values(part)?;
    let imputed = impute(part)?;
    let (scaled, bounds) = normalize(&imputed)?;
    let s = split_tvt(&scaled, split, seed)?;
    let sizes = SplitSizes {
        client: 0,
        train: s.train.len(),
        valid: s.valid.len(),
        test: s.test.len(),
    };
    let data = ClientData {
        train: SurvivalBatch::from_table(&s.train)?,
        valid: SurvivalBatch::from_table(&s.valid)?,
        test: SurvivalBatch::from_table(&s.test)?,
        stats: StationStats {
            bounds,
            fill,
            categorical: part.categorical.clone(),
            rows: part.len(),
        },
    };
    Ok((data, sizes))
}

/// Training seed of client `k` in run `seed`.
pub fn client_seed(seed: u64, k: ClientId) -> u64 {
    federated::round_seed(seed.wrapping_mul(0x0100_0000_01B3).wrapping_add(k as u64), u32::MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub broadcasts: usize,
    pub local_updates: usize,
    pub weight_messages: usize,
}

fn counts<T: federated::Transport>(tap: &Tap<T>) -> MessageCounts {
    MessageCounts {
        broadcasts: tap.count("broadcast"),
        local_updates: tap.count("local_update"),
        weight_messages: tap.count("broadcast") + tap.count("local_update"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub sizes: Vec<SplitSizes>,
    /// Global model after rounds 1..=I.
    pub fedavg: Vec<RoundMetrics>,
    /// Each client's locally trained model, rounds 1..=I.
    pub local_models: Vec<RoundMetrics>,
    pub without_aggregation: RoundMetrics,
    pub fedavg_messages: MessageCounts,
    pub without_aggregation_messages: MessageCounts,
}

/// Everything needed to export the model of one run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub seed: u64,
    pub weights: ModelWeights,
    pub stats: GlobalStats,
    pub calibration: Vec<(ClientId, EvalReport)>,
    pub rounds: u32,
}

/// State of client `k` (1-based) holding partition `part` in run `seed`.
pub fn client_state(
    part: &FlatTable,
    k: ClientId,
    policy: Option<StationPolicy>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(federated::ClientState, SplitSizes), HarnessError> {
    let (client_data, mut s) = prepare_client(part, cfg.split, client_seed(seed, k) ^ 0x5eed)?;
    s.client = k;
    let training = TrainingConfig {
        seed: client_seed(seed, k),
        ..cfg.training.clone()
    };
    Ok((federated::ClientState::new(k, client_data, policy, training), s))
}

/// The station for client `k` of run `seed`, as a separate process would
/// build it: only partition `k` is kept.
pub fn station_state(
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    seed: u64,
    k: ClientId,
    policy: Option<StationPolicy>,
) -> Result<federated::ClientState, HarnessError> {
    let parts = partition(&data.table, &cfg.client_fractions, seed)?;
    let part = (k as usize)
        .checked_sub(1)
        .and_then(|i| parts.get(i))
        .ok_or_else(|| argument(&format!("client {k} is not in 1..={}", parts.len())))?;
    Ok(client_state(part, k, policy, cfg, seed)?.0)
}

fn build_clients(
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Vec<federated::ClientState>, Vec<SplitSizes>), HarnessError> {
    let parts = partition(&data.table, &cfg.client_fractions, seed)?;
    let policy = data.spec.as_ref().map(StationPolicy::for_spec);
    let mut clients = Vec::with_capacity(parts.len());
    let mut sizes = Vec::with_capacity(parts.len());
    for (k, part) in parts.iter().enumerate() {
        let (client, s) = client_state(part, k as ClientId + 1, policy.clone(), cfg, seed)?;
        clients.push(client);
        sizes.push(s);
    }
    Ok((clients, sizes))
}

/// Server side of one FedAvg session: join, statistics, I rounds.
pub fn fedavg_session<T: federated::Transport>(
    transport: &mut T,
    spec: Option<&ProjectionSpec>,
    input_dim: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(SessionResult, TrainedModel), HarnessError> {
    federated::join(transport, spec, cfg.rounds)?;
    let stats = federated::federated_stats(transport)?;
    let fed_cfg = FedConfig {
        rounds: cfg.rounds,
        seed,
        keep_trajectory: false,
    };
    let session = federated::server_run(&fed_cfg, input_dim, transport)?;
    let model = TrainedModel {
        seed,
        weights: session.weights.clone(),
        stats,
        calibration: session.final_reports.clone(),
        rounds: cfg.rounds,
    };
    Ok((session, model))
}

/// One seed: partition, per-client preparation, then both arms.
pub fn run_seed(data: &ExperimentData, cfg: &ExperimentConfig, seed: u64) -> Result<(SeedRun, TrainedModel), HarnessError> {
    let (clients, sizes) = build_clients(data, cfg, seed)?;
    let p = data.table.width();

    let mut tap = Tap::new(InProcessTransport::new(clients.clone()));
    let (session, model) = fedavg_session(&mut tap, data.spec.as_ref(), p, cfg, seed)?;
    let fedavg_messages = counts(&tap);

    let mut tap = Tap::new(InProcessTransport::new(clients));
    federated::join(&mut tap, data.spec.as_ref(), cfg.rounds)?;
    let without = federated::local_only_run(seed, &mut tap)?;
    let without_messages = counts(&tap);

    Ok((
        SeedRun {
            seed,
            sizes,
            fedavg: session.rounds,
            local_models: session.local_models,
            without_aggregation: without,
            fedavg_messages,
            without_aggregation_messages: without_messages,
        },
        model,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub without_aggregation: Option<Interval>,
    pub fedavg: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub rows: usize,
    pub excluded: usize,
    pub runs: Vec<SeedRun>,
    pub failures: Vec<(u64, String)>,
    pub summary: Vec<SummaryRow>,
}

fn interval(samples: &[Option<f64>], n_train: usize, n_test: usize) -> Option<Interval> {
    let v: Vec<f64> = samples.iter().flatten().copied().collect();
    if v.len() < 2 || v.len() != samples.len() {
        return None;
    }
    corrected_resampled_ttest(&v, n_train, n_test, 0.95).ok()
}

fn mean_usize(values: impl Iterator<Item = usize>) -> usize {
    let v: Vec<usize> = values.collect();
    (v.iter().sum::<usize>() as f64 / v.len().max(1) as f64).round() as usize
}

/// Global and per-client rows, each with a without-aggregation and a
/// FedAvg-after-I-rounds column.
pub fn summarize(runs: &[SeedRun]) -> Vec<SummaryRow> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let train_all = mean_usize(runs.iter().map(|r| r.sizes.iter().map(|s| s.train).sum()));
    let test_all = mean_usize(runs.iter().map(|r| r.sizes.iter().map(|s| s.test).sum()));
    let last = |r: &SeedRun| r.fedavg.last().cloned();
    let mut rows = vec![SummaryRow {
        label: "Global".into(),
        without_aggregation: interval(
            &runs.iter().map(|r| r.without_aggregation.global).collect::<Vec<_>>(),
            train_all,
            test_all,
        ),
        fedavg: interval(
            &runs.iter().map(|r| last(r).and_then(|m| m.global)).collect::<Vec<_>>(),
            train_all,
            test_all,
        ),
    }];
    for s in &first.sizes {
        let k = s.client;
        let local_c = |m: &RoundMetrics| m.local.iter().find(|(id, _)| *id == k).and_then(|(_, c)| *c);
        let size = |f: fn(&SplitSizes) -> usize| {
            mean_usize(runs.iter().filter_map(|r| r.sizes.iter().find(|s| s.client == k).map(f)))
        };
        rows.push(SummaryRow {
            label: format!("Local (on client{k})"),
            without_aggregation: interval(
                &runs.iter().map(|r| local_c(&r.without_aggregation)).collect::<Vec<_>>(),
                size(|s| s.train),
                size(|s| s.test),
            ),
            fedavg: interval(
                &runs.iter().map(|r| last(r).as_ref().and_then(local_c)).collect::<Vec<_>>(),
                size(|s| s.train),
                size(|s| s.test),
            ),
        });
    }
    rows
}

/// Runs every seed. A failing seed is recorded and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentResult, Option<TrainedModel>, ExperimentData), HarnessError> {
    cfg.check()?;
    let data = load_dataset(&cfg.dataset)?;
    let (result, model) = run_on(&data, cfg)?;
    Ok((result, model, data))
}

pub fn run_on(data: &ExperimentData, cfg: &ExperimentConfig) -> Result<(ExperimentResult, Option<TrainedModel>), HarnessError> {
    cfg.check()?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut model = None;
    for &seed in &cfg.seeds {
        match run_seed(data, cfg, seed) {
            Ok((run, m)) => {
                runs.push(run);
                model.get_or_insert(m);
            }
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let summary = summarize(&runs);
    Ok((
        ExperimentResult {
            name: cfg.name.clone(),
            rows: data.table.len(),
            excluded: data.excluded,
            runs,
            failures,
            summary,
        },
        model,
    ))
}

/// Mean global C per round across seeds.
pub fn mean_global_curve(runs: &[SeedRun]) -> Vec<Option<f64>> {
    let rounds = runs.iter().map(|r| r.fedavg.len()).max().unwrap_or(0);
    (0..rounds)
        .map(|i| {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.fedavg.get(i).and_then(|m| m.global)).collect();
            (v.len() == runs.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

/// Rows `seed,round,series,c_statistic`; series is `global` or `client<k>`.
pub fn write_curves<W: Write>(runs: &[SeedRun], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "round", "series", "c_statistic"])?;
    let fmt = |c: Option<f64>| c.map(|v| v.to_string()).unwrap_or_default();
    for r in runs {
        for m in &r.fedavg {
            w.write_record([r.seed.to_string(), m.round.to_string(), "global".into(), fmt(m.global)])?;
            for (k, c) in &m.local {
                w.write_record([r.seed.to_string(), m.round.to_string(), format!("client{k}"), fmt(*c)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cell(i: &Option<Interval>) -> String {
    match i {
        Some(i) => format!("{:.3} ({:.3}-{:.3})", i.mean, i.lo, i.hi),
        None => "n/a".into(),
    }
}

/// `label | without aggregation | FedAvg (after I updates)` as a text table.
pub fn format_summary(result: &ExperimentResult) -> String {
    let rounds = result.runs.first().map(|r| r.fedavg.len()).unwrap_or(0);
    let mut rows = vec![[
        "Model evaluation".to_string(),
        "Without aggregation".to_string(),
        format!("FedAvg (after {rounds} updates)"),
    ]];
    for r in &result.summary {
        rows.push([r.label.clone(), cell(&r.without_aggregation), cell(&r.fedavg)]);
    }
    let widths: Vec<usize> = (0..3).map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{:<w0$}  {:<w1$}  {}\n", r[0], r[1], r[2], w0 = widths[0], w1 = widths[1]));
    }
    out
}

/// `result.json`, `summary.txt` and `curves.csv` under `dir`.
pub fn write_artifacts(result: &ExperimentResult, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(result)?)?;
    std::fs::write(dir.join("summary.txt"), format_summary(result))?;
    write_curves(&result.runs, std::fs::File::create(dir.join("curves.csv"))?)?;
    Ok(())
}

/// Model package for a trained run. The baseline hazard comes from the
/// stations' test predictions of the final global model.
pub fn export_trained(
    model: &TrainedModel,
    spec: &ProjectionSpec,
    config: &[u8],
) -> Result<crate::twin::ModelPackage, crate::twin::TwinError> {
    let calibration: Vec<federated::Prediction> =
        model.calibration.iter().flat_map(|(_, r)| r.predictions.iter().copied()).collect();
    let source = format!(
        "pooled test predictions of the final global model on {} stations",
        model.calibration.len()
    );
    crate::twin::ModelPackage::export(crate::twin::ExportInputs {
        weights: &model.weights,
        spec,
        bounds: &model.stats.bounds,
        medians: &model.stats.fill,
        calibration: &calibration,
        calibration_source: &source,
        config,
        rounds: model.rounds,
        seed: model.seed,
    })
}
