//! Monte Carlo harness: seeded trials over an (N, p) grid, NMSE and timing
//! records, CSV/JSON emission and the per-cell summary.

use crate::error::{Error, Result};
use crate::model::{generate_measurements, sample_sparse_signal, ModelParams};
use crate::numerics::least_squares_init;
use crate::pipeline::{
    run_bht_mle, run_mle_baseline, BhtMleConfig, InfeasiblePolicy, RecoveryFlag,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub const CSV_HEADER: [&str; 9] = [
    "algorithm",
    "m",
    "n_meas",
    "p",
    "trial_index",
    "seed",
    "nmse_db",
    "wall_time_s",
    "flags",
];

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "ONEBIT_BHT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    BhtMle,
    Mle,
    LsInit,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::BhtMle, Algorithm::Mle, Algorithm::LsInit];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::BhtMle => "bht_mle",
            Algorithm::Mle => "mle",
            Algorithm::LsInit => "ls_init",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown algorithm {s:?} (expected bht_mle, mle or ls_init)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub m: usize,
    pub n_meas_grid: Vec<usize>,
    pub p_grid: Vec<f64>,
    pub sigma_e: f64,
    pub sigma_n: f64,
    pub sigma_r: f64,
    pub trials: usize,
    pub base_seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub infeasible_policy: InfeasiblePolicy,
    /// When false every `wall_time_s` is written as 0 so repeated sweeps are
    /// byte-identical.
    pub timing: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            m: 200,
            n_meas_grid: vec![400, 500, 600, 700, 800],
            p_grid: vec![0.1, 0.2],
            sigma_e: 0.1,
            sigma_n: 0.1,
            sigma_r: 1.0,
            trials: 100,
            base_seed: 0,
            algorithms: vec![Algorithm::BhtMle, Algorithm::Mle],
            infeasible_policy: InfeasiblePolicy::Project,
            timing: true,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    fn params(&self, n_meas: usize, p: f64) -> ModelParams {
        ModelParams {
            m: self.m,
            n_meas,
            p,
            sigma_e: self.sigma_e,
            sigma_n: self.sigma_n,
            sigma_r: self.sigma_r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidSpec("trials must be at least 1".into()));
        }
        if self.n_meas_grid.is_empty() || self.p_grid.is_empty() || self.algorithms.is_empty() {
            return Err(Error::InvalidSpec("grids and algorithm list must be non-empty".into()));
        }
        for &n in &self.n_meas_grid {
            for &p in &self.p_grid {
                self.params(n, p).validate()?;
            }
        }
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.algorithms.len() * self.p_grid.len() * self.n_meas_grid.len() * self.trials
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub algorithm: Algorithm,
    pub m: usize,
    pub n_meas: usize,
    pub p: f64,
    pub trial_index: usize,
    pub seed: u64,
    /// `-inf` on exact recovery, NaN when the algorithm failed.
    #[serde(with = "nonfinite")]
    pub nmse_db: f64,
    pub wall_time_s: f64,
    pub flags: BTreeSet<RecoveryFlag>,
}

impl TrialRecord {
    pub fn is_sentinel(&self) -> bool {
        self.nmse_db == f64::NEG_INFINITY
    }

    pub fn is_failure(&self) -> bool {
        self.flags.contains(&RecoveryFlag::Failed) || self.nmse_db.is_nan()
    }

    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        self.algorithm
            .cmp(&other.algorithm)
            .then(self.p.total_cmp(&other.p))
            .then(self.n_meas.cmp(&other.n_meas))
            .then(self.trial_index.cmp(&other.trial_index))
    }
}

/// JSON has no literal for infinities or NaN; those are written as strings.
mod nonfinite {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

/// `20·log₁₀(‖s − ŝ‖/‖s‖)`; exact recovery gives `-inf`.
pub fn nmse_db(s_true: &DVector<f64>, s_hat: &DVector<f64>) -> f64 {
    assert_eq!(s_true.len(), s_hat.len(), "length mismatch");
    let ref_norm = s_true.norm();
    assert!(ref_norm > 0.0, "reference signal must be nonzero");
    20.0 * ((s_true - s_hat).norm() / ref_norm).log10()
}

fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trial seed. Keyed on the value of `p` rather than its grid position so
/// that editing either grid leaves the remaining cells' data untouched.
pub fn derive_seed(base_seed: u64, p: f64, n_meas: usize, trial: usize) -> u64 {
    [p.to_bits(), n_meas as u64, trial as u64]
        .into_iter()
        .fold(splitmix64(base_seed), |h, x| splitmix64(h ^ x))
}

/// Draws one dataset and runs every requested algorithm on it.
pub fn run_trial(spec: &ExperimentSpec, p: f64, n_meas: usize, trial_index: usize) -> Result<Vec<TrialRecord>> {
    let params = spec.params(n_meas, p);
    let seed = derive_seed(spec.base_seed, p, n_meas, trial_index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal = sample_sparse_signal(&params, &mut rng)?;
    let meas = generate_measurements(&signal, &params, &mut rng)?;

    let records = spec
        .algorithms
        .iter()
        .map(|&algorithm| {
            let start = Instant::now();
            let outcome = run_algorithm(algorithm, &meas.a_mat, &meas.y, spec);
            let elapsed = start.elapsed().as_secs_f64();
            let (nmse, wall, flags) = match outcome {
                Ok((s_hat, wall, flags)) => (nmse_db(&signal.s, &s_hat), wall, flags),
                Err(e) => {
                    log::warn!("{algorithm} failed on trial {trial_index} (p={p}, N={n_meas}): {e}");
                    (f64::NAN, elapsed, BTreeSet::from([RecoveryFlag::Failed]))
                }
            };
            TrialRecord {
                algorithm,
                m: spec.m,
                n_meas,
                p,
                trial_index,
                seed,
                nmse_db: nmse,
                wall_time_s: if spec.timing { wall } else { 0.0 },
                flags,
            }
        })
        .collect();
    Ok(records)
}

fn run_algorithm(
    algorithm: Algorithm,
    a_mat: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &ExperimentSpec,
) -> Result<(DVector<f64>, f64, BTreeSet<RecoveryFlag>)> {
    match algorithm {
        Algorithm::BhtMle => {
            let config = BhtMleConfig {
                infeasible_policy: spec.infeasible_policy,
                ..BhtMleConfig::default()
            };
            let r = run_bht_mle(a_mat, y, spec.sigma_e, spec.sigma_n, &config)?;
            Ok((r.s_hat, r.wall_time, r.flags))
        }
        Algorithm::Mle => {
            let config = BhtMleConfig::default();
            let r = run_mle_baseline(a_mat, y, spec.sigma_e, spec.sigma_n, &config.solver, spec.infeasible_policy)?;
            Ok((r.s_hat, r.wall_time, r.flags))
        }
        Algorithm::LsInit => {
            let start = Instant::now();
            let s = least_squares_init(a_mat, y);
            Ok((s, start.elapsed().as_secs_f64(), BTreeSet::new()))
        }
    }
}

/// Runs the full grid in parallel. Records come back sorted by
/// (algorithm, p, n_meas, trial_index) whatever the completion order.
pub fn run_monte_carlo(spec: &ExperimentSpec) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    let cells: Vec<(f64, usize, usize)> = spec
        .p_grid
        .iter()
        .flat_map(|&p| {
            spec.n_meas_grid
                .iter()
                .flat_map(move |&n| (0..spec.trials).map(move |t| (p, n, t)))
        })
        .collect();
    let nested: Vec<Vec<TrialRecord>> = cells
        .into_par_iter()
        .map(|(p, n, t)| run_trial(spec, p, n, t))
        .collect::<Result<_>>()?;
    let mut records: Vec<TrialRecord> = nested.into_iter().flatten().collect();
    records.sort_by(TrialRecord::sort_key_cmp);
    Ok(records)
}

/// Worker cap from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::Parse(format!("unknown format {s:?} (expected csv or json)"))),
        }
    }
}

fn join_flags(flags: &BTreeSet<RecoveryFlag>) -> String {
    flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(";")
}

fn parse_flags(field: &str) -> Result<BTreeSet<RecoveryFlag>> {
    field
        .split(';')
        .filter(|s| !s.is_empty())
        .map(RecoveryFlag::from_str)
        .collect()
}

pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.algorithm.as_str().to_string(),
            r.m.to_string(),
            r.n_meas.to_string(),
            r.p.to_string(),
            r.trial_index.to_string(),
            r.seed.to_string(),
            r.nmse_db.to_string(),
            r.wall_time_s.to_string(),
            join_flags(&r.flags),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| Error::Parse(format!("missing column {}", CSV_HEADER[i])))?;
    raw.parse()
        .map_err(|e| Error::Parse(format!("column {}: {raw:?}: {e}", CSV_HEADER[i])))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse(format!("unexpected header {:?}", header)));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        out.push(TrialRecord {
            algorithm: field(&row, 0)?,
            m: field(&row, 1)?,
            n_meas: field(&row, 2)?,
            p: field(&row, 3)?,
            trial_index: field(&row, 4)?,
            seed: field(&row, 5)?,
            nmse_db: field(&row, 6)?,
            wall_time_s: field(&row, 7)?,
            flags: parse_flags(row.get(8).unwrap_or(""))?,
        });
    }
    Ok(out)
}

pub fn write_json<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, records)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    Ok(serde_json::from_reader(input)?)
}

/// Aggregate over one (algorithm, N, p) cell. Means and std use finite
/// NMSE values only; sentinels and failures are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub algorithm: Algorithm,
    pub n_meas: usize,
    pub p: f64,
    pub count: usize,
    pub sentinel: usize,
    pub failed: usize,
    pub mean_nmse_db: f64,
    pub std_nmse_db: f64,
    pub median_wall_time_s: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

pub fn summarize(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(Algorithm, usize, u64), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.algorithm, r.n_meas, r.p.to_bits())).or_default().push(r);
    }
    let mut out: Vec<CellSummary> = cells
        .into_iter()
        .map(|((algorithm, n_meas, p_bits), rs)| {
            let vals: Vec<f64> = rs.iter().map(|r| r.nmse_db).filter(|x| x.is_finite()).collect();
            let n = vals.len();
            let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                f64::NAN
            } else {
                (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            let mut times: Vec<f64> = rs.iter().map(|r| r.wall_time_s).collect();
            CellSummary {
                algorithm,
                n_meas,
                p: f64::from_bits(p_bits),
                count: n,
                sentinel: rs.iter().filter(|r| r.is_sentinel()).count(),
                failed: rs.iter().filter(|r| r.is_failure()).count(),
                mean_nmse_db: mean,
                std_nmse_db: std,
                median_wall_time_s: median(&mut times),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.algorithm
            .cmp(&b.algorithm)
            .then(a.p.total_cmp(&b.p))
            .then(a.n_meas.cmp(&b.n_meas))
    });
    out
}

pub fn write_summary_csv<W: Write>(summary: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "algorithm",
        "n_meas",
        "p",
        "count",
        "sentinel",
        "failed",
        "mean_nmse_db",
        "std_nmse_db",
        "median_wall_time_s",
    ])?;
    for c in summary {
        w.write_record([
            c.algorithm.as_str().to_string(),
            c.n_meas.to_string(),
            c.p.to_string(),
            c.count.to_string(),
            c.sentinel.to_string(),
            c.failed.to_string(),
            c.mean_nmse_db.to_string(),
            c.std_nmse_db.to_string(),
            c.median_wall_time_s.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Path of the companion summary: `runs.csv` → `runs.summary.csv`.
pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    path.with_file_name(format!("{stem}.summary.{ext}"))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Writes the records and the companion summary; returns the summary path.
pub fn emit_results(records: &[TrialRecord], format: OutputFormat, path: &Path) -> Result<PathBuf> {
    let summary = summarize(records);
    let spath = summary_path(path);
    match format {
        OutputFormat::Csv => {
            write_csv(records, create(path)?)?;
            write_summary_csv(&summary, create(&spath)?)?;
        }
        OutputFormat::Json => {
            write_json(records, create(path)?)?;
            serde_json::to_writer_pretty(create(&spath)?, &summary)?;
        }
    }
    Ok(spath)
}
