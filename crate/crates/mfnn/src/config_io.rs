//! Experiment configs, synthetic datasets, seeded substreams, and result files.
//!
//! Every run is described by an [`ExperimentConfig`] loaded from JSON, and all
//! randomness flows through [`split_stream`], which derives one ChaCha stream
//! per (layer, node, purpose) tag. Streams are prefix-stable: the first k
//! draws of a node's stream do not depend on how wide the rest of the network
//! is, which is what lets width sweeps couple narrow nets to wide ones.
//!
//! Result rows use 17 significant digits everywhere so CSV and JSON files
//! round-trip `f64` values exactly.

use crate::funcs::{Activation, Loss};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("dataset row {row} has sup-norm {norm} exceeding 1")]
    RowNormExceeded { row: usize, norm: f64 },
    #[error("dataset contains non-finite values")]
    NonFiniteData,
    #[error("record set is ragged or empty: {0}")]
    BadRecords(&'static str),
    #[error("io failure at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io { path: path.to_path_buf(), source }
}

/// Formats an `f64` with enough digits (17 significant) to round-trip exactly.
pub fn fmt_float_full(x: f64) -> String {
    format!("{x:.16e}")
}

/// Stream purposes, the third coordinate of a stream tag.
pub mod purpose {
    pub const DATA: u32 = 1;
    pub const LABEL: u32 = 2;
    pub const WEIGHT: u32 = 3;
    pub const RESAMPLE: u32 = 4;
    pub const MC: u32 = 5;
    /// Auxiliary picks in tests and harnesses (coordinate choices and such).
    pub const PICK: u32 = 6;
}

/// Seed material for one derived random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.0)
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

/// Derives the stream for `(layer, node, purpose)` under a root seed.
///
/// The tag is embedded verbatim in the ChaCha seed alongside a fixed domain
/// constant, so distinct tags give distinct keys by construction.
pub fn split_stream(seed: u64, tag: (u32, u32, u32)) -> StreamKey {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..12].copy_from_slice(&tag.0.to_le_bytes());
    bytes[12..16].copy_from_slice(&tag.1.to_le_bytes());
    bytes[16..20].copy_from_slice(&tag.2.to_le_bytes());
    bytes[20..32].copy_from_slice(b"mfnn-stream1");
    StreamKey(bytes)
}

/// Fills a vector with standard normal draws from one stream.
pub fn normal_draws(key: StreamKey, count: usize) -> Vec<f64> {
    let mut rng = key.rng();
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

/// A fixed supervised dataset. Rows of `x` are samples with sup-norm at most 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// N x d sample matrix.
    pub x: DMatrix<f64>,
    /// N targets.
    pub y: DVector<f64>,
    /// Largest row sup-norm, at most 1 by the type invariant.
    pub x_inf_bound: f64,
    /// For N <= 64 samples: whether no two rows are exactly parallel.
    /// `None` when the quadratic check was skipped.
    pub non_parallel: Option<bool>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self, ConfigError> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(ConfigError::Invalid("dataset must be nonempty".into()));
        }
        if x.nrows() != y.len() {
            return Err(ConfigError::Invalid(format!(
                "x has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::NonFiniteData);
        }
        let mut bound: f64 = 0.0;
        for i in 0..x.nrows() {
            let norm = x.row(i).amax();
            if norm > 1.0 + 1e-9 {
                return Err(ConfigError::RowNormExceeded { row: i, norm });
            }
            bound = bound.max(norm);
        }
        let non_parallel = if x.nrows() <= 64 { Some(no_parallel_rows(&x)) } else { None };
        Ok(Dataset { x, y, x_inf_bound: bound, non_parallel })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Exact cross-product test: rows i, j are parallel iff all 2x2 minors vanish.
fn no_parallel_rows(x: &DMatrix<f64>) -> bool {
    let (n, d) = (x.nrows(), x.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let mut parallel = true;
            'minors: for a in 0..d {
                for b in (a + 1)..d {
                    if x[(i, a)] * x[(j, b)] != x[(i, b)] * x[(j, a)] {
                        parallel = false;
                        break 'minors;
                    }
                }
            }
            // With d = 1 every pair is parallel by convention (no minors).
            if parallel {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Normalized Gaussian rows with a smooth scalar target.
    GaussianRegression,
    /// Two noisy clusters with labels -1 and +1.
    TwoCluster,
}

/// Draws a dataset of the given kind. Rows are scaled to sup-norm at most 1;
/// row i only consumes stream (0, i+1, DATA), so growing `n` extends the
/// dataset without redrawing earlier rows.
pub fn make_synthetic_dataset(
    n: usize,
    d: usize,
    seed: u64,
    kind: DatasetKind,
) -> Result<Dataset, ConfigError> {
    if n == 0 || d == 0 {
        return Err(ConfigError::Invalid("dataset dims must be positive".into()));
    }
    let clamp_row = |row: &mut [f64]| {
        let norm = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm > 1.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    };
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    match kind {
        DatasetKind::GaussianRegression => {
            let u = normal_draws(split_stream(seed, (0, 0, purpose::LABEL)), d);
            for i in 0..n {
                let mut row = normal_draws(split_stream(seed, (0, (i + 1) as u32, purpose::DATA)), d);
                clamp_row(&mut row);
                let dot: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
                y[i] = dot.tanh();
                for j in 0..d {
                    x[(i, j)] = row[j];
                }
            }
        }
        DatasetKind::TwoCluster => {
            let raw = normal_draws(split_stream(seed, (0, 0, purpose::DATA)), d);
            let norm = raw.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            let center: Vec<f64> = raw.iter().map(|v| 0.5 * v / norm).collect();
            for i in 0..n {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let noise = normal_draws(split_stream(seed, (0, (i + 1) as u32, purpose::DATA)), d);
                let mut row: Vec<f64> =
                    (0..d).map(|j| sign * center[j] + 0.15 * noise[j]).collect();
                clamp_row(&mut row);
                y[i] = sign;
                for j in 0..d {
                    x[(i, j)] = row[j];
                }
            }
        }
    }
    Dataset::new(x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub d: usize,
}

/// Named numeric tolerances with study-level defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tolerances(pub BTreeMap<String, f64>);

impl Tolerances {
    pub fn get_or(&self, key: &str, default: f64) -> f64 {
        self.0.get(key).copied().unwrap_or(default)
    }

    /// Relative eigenvalue cutoff for inversions.
    pub fn rel_tol(&self) -> f64 {
        self.get_or("rel_tol", 1e-10)
    }

    /// Relative clamp for roundoff-negative eigenvalues.
    pub fn eig_clamp(&self) -> f64 {
        self.get_or("eig_clamp", 1e-12)
    }

    /// Gauss-Hermite order per dimension.
    pub fn quad_order(&self) -> usize {
        self.get_or("quad_order", 64.0) as usize
    }

    /// Monte Carlo particle count for sampled kernels.
    pub fn mc_samples(&self) -> usize {
        self.get_or("mc_samples", 1e5) as usize
    }

    /// Pass threshold for final training loss in convergence studies.
    pub fn final_loss(&self) -> f64 {
        self.get_or("final_loss", 0.02)
    }
}

/// One experiment described in JSON. `widths` lists hidden-layer widths
/// (length `depth`); sweeps use `m_grid` instead and ignore `widths` sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub widths: Vec<usize>,
    pub depth: usize,
    pub sigma1: f64,
    pub eta: f64,
    pub steps: usize,
    pub activation: String,
    pub loss: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub m_grid: Vec<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.widths.len() != self.depth {
            return fail(format!(
                "widths has {} entries but depth is {}",
                self.widths.len(),
                self.depth
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.m_grid.iter().any(|&w| w == 0) {
            return fail("widths must be positive".into());
        }
        if !(self.sigma1.is_finite() && self.sigma1 > 0.0) {
            return fail(format!("sigma1 must be positive, got {}", self.sigma1));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if self.dataset.n == 0 || self.dataset.d == 0 {
            return fail("dataset dims must be positive".into());
        }
        self.parsed_activation()?;
        self.parsed_loss()?;
        Ok(())
    }

    pub fn parsed_activation(&self) -> Result<Activation, ConfigError> {
        self.activation.parse().map_err(|e| ConfigError::Invalid(format!("{e}")))
    }

    pub fn parsed_loss(&self) -> Result<Loss, ConfigError> {
        self.loss.parse().map_err(|e| ConfigError::Invalid(format!("{e}")))
    }

    pub fn make_dataset(&self) -> Result<Dataset, ConfigError> {
        make_synthetic_dataset(self.dataset.n, self.dataset.d, self.seed, self.dataset.kind)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// One recorded training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    /// Accumulated time `step * eta`.
    pub time: f64,
    pub loss: f64,
    /// Largest absolute weight per layer, input side first.
    pub max_weight: Vec<f64>,
    /// Spread of hidden features per layer (0 for single-node layers).
    pub feature_spread: Vec<f64>,
    /// Residual-branch sup-norm; `None` for non-residual runs.
    pub skip_perturbation: Option<f64>,
}

/// Checks records are finite with strictly increasing steps and equal shapes.
pub fn check_records(records: &[RunRecord]) -> Result<(), ConfigError> {
    let first = records.first().ok_or(ConfigError::BadRecords("empty"))?;
    let (wlen, slen) = (first.max_weight.len(), first.feature_spread.len());
    let mut prev: Option<usize> = None;
    for r in records {
        if r.max_weight.len() != wlen || r.feature_spread.len() != slen {
            return Err(ConfigError::BadRecords("ragged vector fields"));
        }
        let finite = r.time.is_finite()
            && r.loss.is_finite()
            && r.max_weight.iter().all(|v| v.is_finite())
            && r.feature_spread.iter().all(|v| v.is_finite())
            && r.skip_perturbation.map_or(true, |v| v.is_finite());
        if !finite {
            return Err(ConfigError::BadRecords("non-finite observable"));
        }
        if let Some(p) = prev {
            if r.step <= p {
                return Err(ConfigError::BadRecords("steps not strictly increasing"));
            }
        }
        prev = Some(r.step);
    }
    Ok(())
}

/// Recording cadence: step 0, the final step, and every `every`-th step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Recorder {
    pub every: usize,
}

impl Recorder {
    pub fn every(every: usize) -> Self {
        Recorder { every: every.max(1) }
    }

    /// Every step for runs up to 1000 steps, about 1000 rows otherwise.
    pub fn auto(k_steps: usize) -> Self {
        Recorder::every(k_steps.div_ceil(1000))
    }

    pub fn should_record(&self, step: usize, total: usize) -> bool {
        step == 0 || step == total || step % self.every == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
}

/// Writes records to `path`. CSV columns carry one header per vector entry;
/// JSON is a pretty-printed array. Both formats round-trip floats exactly.
pub fn emit_results(
    records: &[RunRecord],
    path: &Path,
    format: EmitFormat,
) -> Result<(), ConfigError> {
    check_records(records)?;
    match format {
        EmitFormat::Json => {
            let file = std::fs::File::create(path).map_err(io_err(path))?;
            let mut w = std::io::BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, records)?;
            w.flush().map_err(io_err(path))?;
        }
        EmitFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            let (nw, ns) = (records[0].max_weight.len(), records[0].feature_spread.len());
            let mut header = vec!["step".to_string(), "time".to_string(), "loss".to_string()];
            header.extend((1..=nw).map(|k| format!("max_w_{k}")));
            header.extend((1..=ns).map(|k| format!("spread_{k}")));
            header.push("skip".to_string());
            w.write_record(&header)?;
            for r in records {
                let mut row = vec![r.step.to_string(), fmt_float_full(r.time), fmt_float_full(r.loss)];
                row.extend(r.max_weight.iter().map(|&v| fmt_float_full(v)));
                row.extend(r.feature_spread.iter().map(|&v| fmt_float_full(v)));
                row.push(r.skip_perturbation.map(fmt_float_full).unwrap_or_default());
                w.write_record(&row)?;
            }
            w.flush().map_err(io_err(path))?;
        }
    }
    Ok(())
}

/// Reads back a CSV written by [`emit_results`].
pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>, ConfigError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let nw = headers.iter().filter(|h| h.starts_with("max_w_")).count();
    let ns = headers.iter().filter(|h| h.starts_with("spread_")).count();
    let parse = |s: &str| -> Result<f64, ConfigError> {
        s.parse::<f64>().map_err(|e| ConfigError::Invalid(format!("bad float field: {e}")))
    };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let mut it = row.iter();
        let step = it
            .next()
            .ok_or(ConfigError::BadRecords("missing step"))?
            .parse::<usize>()
            .map_err(|_| ConfigError::BadRecords("bad step"))?;
        let time = parse(it.next().ok_or(ConfigError::BadRecords("missing time"))?)?;
        let loss = parse(it.next().ok_or(ConfigError::BadRecords("missing loss"))?)?;
        let mut max_weight = Vec::with_capacity(nw);
        for _ in 0..nw {
            max_weight.push(parse(it.next().ok_or(ConfigError::BadRecords("missing weight"))?)?);
        }
        let mut feature_spread = Vec::with_capacity(ns);
        for _ in 0..ns {
            feature_spread.push(parse(it.next().ok_or(ConfigError::BadRecords("missing spread"))?)?);
        }
        let skip = it.next().ok_or(ConfigError::BadRecords("missing skip column"))?;
        let skip_perturbation = if skip.is_empty() { None } else { Some(parse(skip)?) };
        out.push(RunRecord { step, time, loss, max_weight, feature_spread, skip_perturbation });
    }
    Ok(out)
}

/// Reads back a JSON array written by [`emit_results`].
pub fn read_records_json(path: &Path) -> Result<Vec<RunRecord>, ConfigError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
