//! Desk-scale studies behind the CLI: width sweeps, kernel convergence,
//! coupling audits, refinement ladders, training convergence, and the
//! activation/loss assumption audit.
//!
//! Every study reads one [`ExperimentConfig`], produces a [`StudyReport`]
//! whose verdicts are pure functions of the measured points and the
//! configured tolerances, and is bitwise reproducible for a fixed config.
//! Grid points run on a bounded worker pool; results do not depend on the
//! worker count because every point derives its randomness from its own
//! stream tags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::config_io::{
    emit_results, fmt_float_full, ConfigError, Dataset, EmitFormat, ExperimentConfig, Recorder,
    RunRecord,
};
use crate::dnn::{train_dnn, DnnError};
use crate::flowsim::{
    evolve, step_refinement, width_refinement, FlowError, FlowModel, Integrator,
};
use crate::funcs::{assumption_audit, Activation, FuncsError, Loss};
use crate::meanfield::{
    construct_ideal_dnn, construct_ideal_resnet, empirical_gram, eps1_audit_dnn,
    eps1_audit_resnet, gram_chain, init_dnn_fixed_variance, init_dnn_regression,
    init_dnn_standard, init_resnet_regression, mc_beta_gram, BetaGramChain, GramChain,
    MeanFieldError,
};
use crate::numerics::{certify_psd, fit_loglog_slope, NumericsError};
use crate::resnet::{resnet_forward, train_resnet, ResNetError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Funcs(#[from] FuncsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dnn(#[from] DnnError),
    #[error(transparent)]
    Res(#[from] ResNetError),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("invalid study setup: {0}")]
    Invalid(String),
}

/// Which network family a family-parameterized study targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Dnn,
    Res,
}

impl FromStr for Family {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self, StudyError> {
        match s {
            "dnn" => Ok(Family::Dnn),
            "resnet" => Ok(Family::Res),
            other => Err(StudyError::Invalid(format!("unknown family `{other}`"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Dnn => "dnn",
            Family::Res => "resnet",
        })
    }
}

/// One named pass/fail decision with a human-readable explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// One measured point of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub label: String,
    /// Abscissa used for fits (width, step size, or time).
    pub x: f64,
    /// Primary measurement.
    pub value: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub points: Vec<StudyPoint>,
    /// Log-log slope of `value` against `x` where the study fits one.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub verdicts: Vec<Verdict>,
    pub wall_ms: u128,
}

impl StudyReport {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    /// Everything except the wall clock, for reproducibility checks.
    pub fn same_results(&self, other: &StudyReport) -> bool {
        self.study == other.study
            && self.points == other.points
            && self.slope == other.slope
            && self.intercept == other.intercept
            && self.verdicts == other.verdicts
    }

    /// Writes `{study}.json` and `{study}_points.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<(), StudyError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| ConfigError::Io { path: dir.to_path_buf(), source: e })?;
        let json_path = dir.join(format!("{}.json", self.study));
        let text = serde_json::to_string_pretty(self).map_err(ConfigError::from)?;
        std::fs::write(&json_path, text)
            .map_err(|e| ConfigError::Io { path: json_path.clone(), source: e })?;
        let keys: BTreeSet<&str> =
            self.points.iter().flat_map(|p| p.extra.keys().map(String::as_str)).collect();
        let csv_path = dir.join(format!("{}_points.csv", self.study));
        let mut writer = csv::Writer::from_path(&csv_path).map_err(ConfigError::from)?;
        let mut header = vec!["label", "x", "value"];
        header.extend(keys.iter());
        writer.write_record(&header).map_err(ConfigError::from)?;
        for p in &self.points {
            let mut row = vec![p.label.clone(), fmt_float_full(p.x), fmt_float_full(p.value)];
            for k in &keys {
                row.push(p.extra.get(*k).map(|v| fmt_float_full(*v)).unwrap_or_default());
            }
            writer.write_record(&row).map_err(ConfigError::from)?;
        }
        writer.flush().map_err(|e| ConfigError::Io { path: csv_path, source: e })?;
        Ok(())
    }
}

/// Runs one job per item on a bounded worker pool. Results keep item order;
/// they cannot depend on the worker count because jobs are independent.
fn run_grid<T: Sync, R: Send>(items: &[T], job: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("job completed"))
        .collect()
}

fn finish(
    study: &str,
    points: Vec<StudyPoint>,
    slope: Option<f64>,
    intercept: Option<f64>,
    verdicts: Vec<Verdict>,
    started: Instant,
) -> StudyReport {
    StudyReport {
        study: study.to_string(),
        points,
        slope,
        intercept,
        verdicts,
        wall_ms: started.elapsed().as_millis(),
    }
}

/// Fits a log-log slope and turns a window check into a verdict.
fn slope_verdict(
    name: &str,
    xs: &[f64],
    ys: &[f64],
    lo: f64,
    hi: f64,
) -> (Option<f64>, Option<f64>, Verdict) {
    match fit_loglog_slope(xs, ys) {
        Ok(fit) => {
            let pass = (lo..=hi).contains(&fit.slope);
            let detail = format!("slope {:.4} vs window [{lo}, {hi}]", fit.slope);
            (Some(fit.slope), Some(fit.intercept), Verdict { name: name.into(), pass, detail })
        }
        Err(e) => (
            None,
            None,
            Verdict { name: name.into(), pass: false, detail: format!("degenerate fit: {e}") },
        ),
    }
}

fn max_spread_at_layer(records: &[RunRecord], layer_index: usize) -> f64 {
    records
        .iter()
        .map(|r| r.feature_spread.get(layer_index).copied().unwrap_or(0.0))
        .fold(0.0, f64::max)
}

fn c_out(cfg: &ExperimentConfig) -> f64 {
    cfg.tolerances.get_or("c_out", 0.5)
}

/// Feature-collapse sweep: fixed-variance nets lose layer-2 feature spread
/// as width grows, while regression-initialized nets keep it bounded below.
pub fn study_degeneracy(cfg: &ExperimentConfig) -> Result<StudyReport, StudyError> {
    let started = Instant::now();
    if cfg.depth < 2 {
        return Err(StudyError::Invalid("degeneracy sweep needs depth at least 2".into()));
    }
    if cfg.m_grid.is_empty() {
        return Err(StudyError::Invalid("degeneracy sweep needs a nonempty m_grid".into()));
    }
    let data = cfg.make_dataset()?;
    let act = cfg.parsed_activation()?;
    let loss = cfg.parsed_loss()?;
    let tol = &cfg.tolerances;
    let results = run_grid(&cfg.m_grid, |&m| -> Result<(f64, f64), StudyError> {
        let widths = vec![m; cfg.depth];
        let naive = init_dnn_fixed_variance(&data, &widths, cfg.sigma1, act, cfg.seed)?;
        let (_, naive_records) =
            train_dnn(naive, &data, loss, cfg.eta, cfg.steps, Recorder::every(1))?;
        let (reg, _) = init_dnn_regression(
            &data,
            &widths,
            cfg.sigma1,
            c_out(cfg),
            act,
            cfg.seed,
            tol.rel_tol(),
        )?;
        let (_, reg_records) =
            train_dnn(reg, &data, loss, cfg.eta, cfg.steps, Recorder::every(1))?;
        Ok((max_spread_at_layer(&naive_records, 1), max_spread_at_layer(&reg_records, 1)))
    });
    let mut points = Vec::with_capacity(cfg.m_grid.len());
    for (&m, res) in cfg.m_grid.iter().zip(results) {
        let (delta_naive, delta_reg) = res?;
        let extra = BTreeMap::from([("delta_regression".to_string(), delta_reg)]);
        points.push(StudyPoint { label: format!("m={m}"), x: m as f64, value: delta_naive, extra });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.value).collect();
    let (slope, intercept, slope_v) = slope_verdict(
        "delta_slope",
        &xs,
        &ys,
        tol.get_or("degeneracy_slope_lo", -0.7),
        tol.get_or("degeneracy_slope_hi", -0.3),
    );
    let retention = tol.get_or("delta_retention", 0.1);
    let first_reg = points.first().and_then(|p| p.extra.get("delta_regression")).copied();
    let last_reg = points.last().and_then(|p| p.extra.get("delta_regression")).copied();
    let retention_v = match (first_reg, last_reg) {
        (Some(small), Some(large)) => Verdict {
            name: "regression_delta_retention".into(),
            pass: large >= retention * small,
            detail: format!(
                "regression spread {large:.4e} at widest vs {small:.4e} at narrowest, floor {retention}"
            ),
        },
        _ => Verdict {
            name: "regression_delta_retention".into(),
            pass: false,
            detail: "no grid points".into(),
        },
    };
    Ok(finish("degeneracy", points, slope, intercept, vec![slope_v, retention_v], started))
}

fn hadamard4_dataset() -> Result<Dataset, ConfigError> {
    let x = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 1.0, 1.0, 1.0, //
            1.0, -1.0, 1.0, -1.0, //
            1.0, 1.0, -1.0, -1.0, //
            1.0, -1.0, -1.0, 1.0,
        ],
    );
    Dataset::new(x, DVector::zeros(4))
}

/// Kernel convergence: empirical first-level Grams against the analytic
/// kernel across widths, plus quadrature sanity checks.
pub fn study_gram(cfg: &ExperimentConfig) -> Result<StudyReport, StudyError> {
    let started = Instant::now();
    if cfg.m_grid.is_empty() {
        return Err(StudyError::Invalid("gram sweep needs a nonempty m_grid".into()));
    }
    let data = cfg.make_dataset()?;
    let act = cfg.parsed_activation()?;
    let tol = &cfg.tolerances;
    let chain = gram_chain(&data, cfg.sigma1, act, 2, tol.quad_order())?;
    let k1 = chain.ks[1].clone();
    let k1_sup = k1.amax();
    let devs = run_grid(&cfg.m_grid, |&m| -> Result<f64, StudyError> {
        let (_, cache) = init_dnn_standard(&data, &[m], cfg.sigma1, act, cfg.seed)?;
        Ok((empirical_gram(&cache.thetas[0], act) - &k1).amax())
    });
    let mut points = Vec::with_capacity(cfg.m_grid.len());
    for (&m, dev) in cfg.m_grid.iter().zip(devs) {
        let dev = dev?;
        let extra = BTreeMap::from([("rel_dev".to_string(), dev / k1_sup)]);
        points.push(StudyPoint { label: format!("m={m}"), x: m as f64, value: dev, extra });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.value).collect();
    let (slope, intercept, slope_v) = slope_verdict(
        "gram_slope",
        &xs,
        &ys,
        tol.get_or("gram_slope_lo", -0.7),
        tol.get_or("gram_slope_hi", -0.3),
    );
    let rel_cap = tol.get_or("gram_rel_dev", 0.05);
    let last_rel = points.last().map(|p| p.extra["rel_dev"]).unwrap_or(f64::INFINITY);
    let rel_v = Verdict {
        name: "largest_m_rel_dev".into(),
        pass: last_rel < rel_cap,
        detail: format!("relative deviation {last_rel:.4e} at widest point, cap {rel_cap}"),
    };
    // Orthogonal-row sanity: the chain on Hadamard rows is diagonal with one
    // repeated moment on the diagonal.
    let sanity = hadamard4_dataset().map_err(StudyError::from).and_then(|had| {
        let c = gram_chain(&had, cfg.sigma1, act, 2, tol.quad_order())?;
        let k = &c.ks[1];
        let mut off: f64 = 0.0;
        let mut diag_spread: f64 = 0.0;
        for i in 0..4 {
            diag_spread = diag_spread.max((k[(i, i)] - k[(0, 0)]).abs());
            for j in 0..4 {
                if i != j {
                    off = off.max(k[(i, j)].abs());
                }
            }
        }
        Ok((off, diag_spread))
    });
    let sanity_v = match sanity {
        Ok((off, spread)) => Verdict {
            name: "orthogonal_data_sanity".into(),
            pass: off < 1e-10 && spread < 1e-10,
            detail: format!("off-diagonal {off:.2e}, diagonal spread {spread:.2e}"),
        },
        Err(e) => Verdict {
            name: "orthogonal_data_sanity".into(),
            pass: false,
            detail: format!("failed: {e}"),
        },
    };
    // Quadrature versus Monte Carlo on the same kernel law.
    let mc_v = match mc_beta_gram(&data, cfg.sigma1, act, act, 2, tol.mc_samples(), cfg.seed) {
        Ok(mc) => {
            let dev = (&mc.kbetas[0] - &k1).amax();
            let budget = 5.0 * mc.standard_errors[0] + 1e-8;
            Verdict {
                name: "quadrature_vs_mc".into(),
                pass: dev < budget,
                detail: format!("max deviation {dev:.4e} vs budget {budget:.4e}"),
            }
        }
        Err(e) => Verdict {
            name: "quadrature_vs_mc".into(),
            pass: false,
            detail: format!("failed: {e}"),
        },
    };
    Ok(finish("gram", points, slope, intercept, vec![slope_v, rel_v, sanity_v, mc_v], started))
}

/// Measures eps1 for one width of the fully connected family.
fn eps1_point_dnn(
    cfg: &ExperimentConfig,
    data: &Dataset,
    act: Activation,
    chain: &GramChain,
    m: usize,
) -> Result<StudyPoint, StudyError> {
    let tol = &cfg.tolerances;
    let widths = vec![m; cfg.depth];
    let (net, cache) =
        init_dnn_regression(data, &widths, cfg.sigma1, c_out(cfg), act, cfg.seed, tol.rel_tol())?;
    let ideal =
        construct_ideal_dnn(&net, &cache, chain, c_out(cfg), tol.rel_tol(), tol.eig_clamp(), cfg.seed)?;
    let report = eps1_audit_dnn(&net, &ideal)?;
    let fallbacks = ideal.fallback_used.iter().filter(|&&b| b).count();
    let extra = BTreeMap::from([
        ("first_layer".to_string(), report.first_layer),
        ("middle".to_string(), report.middle),
        ("last".to_string(), report.last),
        ("fallbacks".to_string(), fallbacks as f64),
    ]);
    Ok(StudyPoint { label: format!("m={m}"), x: m as f64, value: report.eps1, extra })
}

/// Measures eps1 for one width of the residual family.
fn eps1_point_res(
    cfg: &ExperimentConfig,
    data: &Dataset,
    act: Activation,
    chain: &BetaGramChain,
    m: usize,
) -> Result<StudyPoint, StudyError> {
    let tol = &cfg.tolerances;
    let (net, cache) = init_resnet_regression(
        data,
        m,
        cfg.depth,
        cfg.sigma1,
        c_out(cfg),
        act,
        act,
        cfg.seed,
        tol.rel_tol(),
    )?;
    let ideal = construct_ideal_resnet(
        &net,
        &cache,
        chain,
        c_out(cfg),
        tol.rel_tol(),
        tol.eig_clamp(),
        cfg.seed,
    )?;
    let report = eps1_audit_resnet(&net, &cache, &ideal)?;
    let fallbacks = ideal.fallback_used.iter().filter(|&&b| b).count();
    let max_residual = report.residual.iter().copied().fold(0.0, f64::max);
    let extra = BTreeMap::from([
        ("first_layer".to_string(), report.first_layer),
        ("middle".to_string(), report.middle),
        ("last".to_string(), report.last),
        ("max_residual".to_string(), max_residual),
        ("fallbacks".to_string(), fallbacks as f64),
    ]);
    Ok(StudyPoint { label: format!("m={m}"), x: m as f64, value: report.eps1, extra })
}

/// Coupling strength sweep: eps1 between the regression-initialized net and
/// its ideal double, across widths, for either family.
pub fn study_eps1(cfg: &ExperimentConfig, family: Family) -> Result<StudyReport, StudyError> {
    let started = Instant::now();
    if cfg.m_grid.is_empty() {
        return Err(StudyError::Invalid("eps1 sweep needs a nonempty m_grid".into()));
    }
    if cfg.depth < 2 {
        return Err(StudyError::Invalid("eps1 sweep needs depth at least 2".into()));
    }
    let data = cfg.make_dataset()?;
    let act = cfg.parsed_activation()?;
    let tol = &cfg.tolerances;
    let (points, fixed_point_v) = match family {
        Family::Dnn => {
            let chain = gram_chain(&data, cfg.sigma1, act, cfg.depth, tol.quad_order())?;
            let results = run_grid(&cfg.m_grid, |&m| eps1_point_dnn(cfg, &data, act, &chain, m));
            let points = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            (points, fixed_point_verdict_dnn(cfg, &data, act)?)
        }
        Family::Res => {
            let chain = mc_beta_gram(
                &data,
                cfg.sigma1,
                act,
                act,
                cfg.depth,
                tol.mc_samples(),
                cfg.seed,
            )?;
            let results = run_grid(&cfg.m_grid, |&m| eps1_point_res(cfg, &data, act, &chain, m));
            let points = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            (points, fixed_point_verdict_res(cfg, &data, act)?)
        }
    };
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.value).collect();
    let (slope, intercept, slope_v) = slope_verdict(
        "eps1_slope",
        &xs,
        &ys,
        tol.get_or("eps1_slope_lo", -0.75),
        tol.get_or("eps1_slope_hi", -0.3),
    );
    let fallback_total: f64 = points.iter().map(|p| p.extra["fallbacks"]).sum();
    let fallback_v = Verdict {
        name: "no_fallbacks_in_sweep".into(),
        pass: fallback_total == 0.0,
        detail: format!("{fallback_total} resampling fallbacks across the sweep"),
    };
    let study = format!("eps1_{family}");
    Ok(finish(&study, points, slope, intercept, vec![slope_v, fixed_point_v, fallback_v], started))
}

/// Feeding the empirical kernels back as the analytic chain must give an
/// eps1 of (numerically) zero: the coupling is exact at its fixed point.
fn fixed_point_verdict_dnn(
    cfg: &ExperimentConfig,
    data: &Dataset,
    act: Activation,
) -> Result<Verdict, StudyError> {
    let tol = &cfg.tolerances;
    let m = *cfg.m_grid.iter().min().expect("nonempty grid");
    let widths = vec![m; cfg.depth];
    let (net, cache) =
        init_dnn_regression(data, &widths, cfg.sigma1, c_out(cfg), act, cfg.seed, tol.rel_tol())?;
    let mut ks = vec![(&data.x * data.x.transpose()) / data.dim() as f64];
    for t in &cache.thetas[..cfg.depth - 1] {
        ks.push(empirical_gram(t, act));
    }
    let lambda_mins =
        ks.iter().map(|k| certify_psd(k, 1e-6).map(|c| c.lambda_min)).collect::<Result<_, _>>()?;
    let chain = GramChain {
        ks,
        lambda_mins,
        lambda_bar: 0.0,
        sigma1: cfg.sigma1,
        activation: act,
        quad_order: tol.quad_order(),
    };
    let ideal =
        construct_ideal_dnn(&net, &cache, &chain, c_out(cfg), tol.rel_tol(), tol.eig_clamp(), cfg.seed)?;
    let eps1 = eps1_audit_dnn(&net, &ideal)?.eps1;
    Ok(Verdict {
        name: "fixed_point_eps1_zero".into(),
        pass: eps1 < 1e-6,
        detail: format!("eps1 {eps1:.4e} against its own empirical kernels"),
    })
}

fn fixed_point_verdict_res(
    cfg: &ExperimentConfig,
    data: &Dataset,
    act: Activation,
) -> Result<Verdict, StudyError> {
    let tol = &cfg.tolerances;
    let m = *cfg.m_grid.iter().min().expect("nonempty grid");
    let (net, cache) = init_resnet_regression(
        data,
        m,
        cfg.depth,
        cfg.sigma1,
        c_out(cfg),
        act,
        act,
        cfg.seed,
        tol.rel_tol(),
    )?;
    let kbetas: Vec<DMatrix<f64>> =
        cache.betas[..cfg.depth - 1].iter().map(|b| empirical_gram(b, act)).collect();
    let lambda_mins = kbetas
        .iter()
        .map(|k| certify_psd(k, 1e-6).map(|c| c.lambda_min))
        .collect::<Result<Vec<_>, _>>()?;
    let chain = BetaGramChain {
        lambda_bar: lambda_mins.iter().copied().fold(f64::INFINITY, f64::min),
        lambda_mins,
        standard_errors: vec![0.0; kbetas.len()],
        kbetas,
        samples: 0,
        sigma1: cfg.sigma1,
        h1: act,
        h2: act,
    };
    let ideal = construct_ideal_resnet(
        &net,
        &cache,
        &chain,
        c_out(cfg),
        tol.rel_tol(),
        tol.eig_clamp(),
        cfg.seed,
    )?;
    let eps1 = eps1_audit_resnet(&net, &cache, &ideal)?.eps1;
    Ok(Verdict {
        name: "fixed_point_eps1_zero".into(),
        pass: eps1 < 1e-6,
        detail: format!("eps1 {eps1:.4e} against its own empirical kernels"),
    })
}

/// Step-size ladder plus width ladder, both against finer references.
pub fn study_refine(cfg: &ExperimentConfig) -> Result<StudyReport, StudyError> {
    let started = Instant::now();
    let data = cfg.make_dataset()?;
    let act = cfg.parsed_activation()?;
    let loss = cfg.parsed_loss()?;
    let tol = &cfg.tolerances;
    let (net, _) = init_dnn_regression(
        &data,
        &cfg.widths,
        cfg.sigma1,
        c_out(cfg),
        act,
        cfg.seed,
        tol.rel_tol(),
    )?;
    let model = FlowModel::Dnn(net);
    let t_end = tol.get_or("t_end", 1.0);
    let base_steps = cfg.steps.max(1);
    let step = step_refinement(&model, &data, loss, t_end, base_steps, 3, 16, Integrator::Euler)?;
    let mut points = Vec::new();
    for (i, (&eta, &dev)) in step.etas.iter().zip(&step.weight_devs).enumerate() {
        let extra = BTreeMap::from([("loss_dev".to_string(), step.loss_devs[i])]);
        points.push(StudyPoint { label: format!("eta={eta}"), x: eta, value: dev, extra });
    }
    let (rlo, rhi) = (tol.get_or("euler_ratio_lo", 1.4), tol.get_or("euler_ratio_hi", 2.8));
    let ratios_ok = step.ratios.iter().all(|r| (rlo..=rhi).contains(r));
    let euler_v = Verdict {
        name: "euler_order".into(),
        pass: ratios_ok && !step.ratios.is_empty(),
        detail: format!("halving ratios {:?} vs window [{rlo}, {rhi}]", step.ratios),
    };
    // Width ladder under the same dynamics.
    let ref_width = tol.get_or("ref_width", 4096.0) as usize;
    let factory = |m: usize| {
        init_dnn_regression(
            &data,
            &vec![m; cfg.depth],
            cfg.sigma1,
            c_out(cfg),
            act,
            cfg.seed,
            tol.rel_tol(),
        )
        .map(|(net, _)| FlowModel::Dnn(net))
    };
    let width = width_refinement(
        factory,
        &cfg.m_grid,
        ref_width,
        &data,
        loss,
        cfg.eta,
        cfg.steps,
        Integrator::Euler,
        Recorder::auto(cfg.steps),
    )?;
    for (&m, &dev) in width.widths.iter().zip(&width.sup_loss_devs) {
        points.push(StudyPoint {
            label: format!("m={m}"),
            x: m as f64,
            value: dev,
            extra: BTreeMap::new(),
        });
    }
    let xs: Vec<f64> = width.widths.iter().map(|&m| m as f64).collect();
    let (slope, intercept, width_v) = slope_verdict(
        "width_slope",
        &xs,
        &width.sup_loss_devs,
        tol.get_or("width_slope_lo", -0.8),
        tol.get_or("width_slope_hi", -0.25),
    );
    Ok(finish("refine", points, slope, intercept, vec![euler_v, width_v], started))
}

/// Trains the configured residual net to its horizon and checks the final
/// loss and the branch-perturbation invariant along the way.
pub fn study_converge(cfg: &ExperimentConfig) -> Result<StudyReport, StudyError> {
    let started = Instant::now();
    if cfg.depth < 2 {
        return Err(StudyError::Invalid("convergence study needs depth at least 2".into()));
    }
    let data = cfg.make_dataset()?;
    let act = cfg.parsed_activation()?;
    let loss = cfg.parsed_loss()?;
    let tol = &cfg.tolerances;
    let m = *cfg.widths.first().ok_or_else(|| StudyError::Invalid("missing width".into()))?;
    let (net, _) = init_resnet_regression(
        &data,
        m,
        cfg.depth,
        cfg.sigma1,
        c_out(cfg),
        act,
        act,
        cfg.seed,
        tol.rel_tol(),
    )?;
    let sup_h2 = net.h2().sup_abs();
    let (_, records) =
        train_resnet(net, &data, loss, cfg.eta, cfg.steps, Recorder::auto(cfg.steps))?;
    if let Some(path) = &cfg.output {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => EmitFormat::Json,
            _ => EmitFormat::Csv,
        };
        emit_results(&records, path, format)?;
    }
    let initial = records.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let final_loss = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let skip_violations = records
        .iter()
        .filter(|r| r.skip_perturbation.map(|s| s > sup_h2).unwrap_or(true))
        .count();
    // Decimate the curve into at most ~64 report points.
    let stride = (records.len() / 64).max(1);
    let mut points = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if i % stride == 0 || i + 1 == records.len() {
            let extra = BTreeMap::from([(
                "skip_perturbation".to_string(),
                r.skip_perturbation.unwrap_or(0.0),
            )]);
            points.push(StudyPoint {
                label: format!("k={}", r.step),
                x: r.time,
                value: r.loss,
                extra,
            });
        }
    }
    let cap = tol.final_loss();
    let final_v = Verdict {
        name: "final_loss".into(),
        pass: final_loss < cap,
        detail: format!("final loss {final_loss:.4e} vs cap {cap} (initial {initial:.4e})"),
    };
    let skip_v = Verdict {
        name: "skip_bound".into(),
        pass: skip_violations == 0,
        detail: format!("{skip_violations} records exceeded sup|h2| = {sup_h2}"),
    };
    // Interpolating labels are a fixed point: zero loss from step 0 onward.
    let interp_v = {
        let probe_m = m.min(16);
        let (probe, _) = init_resnet_regression(
            &data,
            probe_m,
            cfg.depth,
            cfg.sigma1,
            c_out(cfg),
            act,
            act,
            cfg.seed,
            tol.rel_tol(),
        )?;
        let outputs = resnet_forward(&probe, &data)?.output;
        let retargeted = Dataset::new(data.x.clone(), outputs)?;
        let (_, zero_records) =
            train_resnet(probe, &retargeted, Loss::Squared, cfg.eta, 5, Recorder::every(1))?;
        let all_zero = zero_records.iter().all(|r| r.loss == 0.0);
        Verdict {
            name: "interpolation_fixed_point".into(),
            pass: all_zero,
            detail: format!(
                "losses {:?} after retargeting labels to the initial outputs",
                zero_records.iter().map(|r| r.loss).collect::<Vec<_>>()
            ),
        }
    };
    Ok(finish("converge", points, None, None, vec![final_v, skip_v, interp_v], started))
}

/// Audits the activation/loss catalog against the boundedness and
/// smoothness assumptions, including the expected failures.
pub fn study_audit(cfg: &ExperimentConfig) -> Result<StudyReport, StudyError> {
    let started = Instant::now();
    let tol = &cfg.tolerances;
    let radius = tol.get_or("audit_radius", 10.0);
    let grid_points = tol.get_or("audit_points", 2001.0) as usize;
    let activations = [Activation::Tanh, Activation::ScaledTanh { c: 0.8 }, Activation::BoundedSoftplus];
    let losses = [Loss::PseudoHuber { delta: 1.0 }, Loss::Logistic];
    let mut verdicts = Vec::new();
    let mut points = Vec::new();
    for a in activations {
        for l in losses {
            let report = assumption_audit(a, l, radius, grid_points)?;
            let name = format!("{a}+{l}");
            let extra = BTreeMap::from([
                ("sup_activation".to_string(), report.activation.sup_abs),
                ("sup_activation_deriv".to_string(), report.activation.sup_deriv),
                ("activation_deriv_lipschitz".to_string(), report.activation.deriv_lipschitz),
                ("sup_loss_deriv".to_string(), report.loss.sup_deriv),
                ("loss_deriv_lipschitz".to_string(), report.loss.lipschitz),
            ]);
            points.push(StudyPoint {
                label: name.clone(),
                x: points.len() as f64,
                value: if report.compliant() { 1.0 } else { 0.0 },
                extra,
            });
            verdicts.push(Verdict {
                name,
                pass: report.compliant(),
                detail: format!(
                    "h_bounded={} h_deriv_bounded={} h_deriv_lipschitz={} phi_deriv_bounded={} phi_lipschitz={}",
                    report.h_bounded,
                    report.h_deriv_bounded,
                    report.h_deriv_lipschitz,
                    report.phi_deriv_bounded,
                    report.phi_lipschitz
                ),
            });
        }
    }
    // The configured pair must itself pass.
    let act = cfg.parsed_activation()?;
    let loss = cfg.parsed_loss()?;
    let configured = assumption_audit(act, loss, radius, grid_points)?;
    verdicts.push(Verdict {
        name: "configured_pair".into(),
        pass: configured.compliant() && act.declared_compliant() && loss.declared_compliant(),
        detail: format!("{act}+{loss}"),
    });
    // Known violators must be flagged, not silently accepted.
    let squared = assumption_audit(Activation::Tanh, Loss::Squared, radius, grid_points)?;
    verdicts.push(Verdict {
        name: "squared_loss_flagged".into(),
        pass: !squared.compliant() && !Loss::Squared.declared_compliant(),
        detail: "squared loss has an unbounded derivative and must not certify".into(),
    });
    let linear = assumption_audit(Activation::Linear, Loss::PseudoHuber { delta: 1.0 }, radius, grid_points)?;
    verdicts.push(Verdict {
        name: "linear_activation_flagged".into(),
        pass: !linear.compliant() && !Activation::Linear.declared_compliant(),
        detail: "the linear test activation is unbounded and must not certify".into(),
    });
    Ok(finish("audit", points, None, None, verdicts, started))
}

/// Euler trajectories must equal the discrete training loops bitwise; checked
/// over a handful of derived configs.
pub fn study_flow_identity(cfg: &ExperimentConfig) -> Result<StudyReport, StudyError> {
    let started = Instant::now();
    let data = cfg.make_dataset()?;
    let act = cfg.parsed_activation()?;
    let loss = cfg.parsed_loss()?;
    let tol = &cfg.tolerances;
    let mut verdicts = Vec::new();
    let mut points = Vec::new();
    for (i, &(m, depth, steps)) in
        [(6, 2, 9), (10, 3, 7), (4, 2, 12), (8, 4, 5), (12, 2, 6)].iter().enumerate()
    {
        let seed = cfg.seed.wrapping_add(i as u64);
        let widths = vec![m; depth];
        let (dnn, _) = init_dnn_regression(
            &data, &widths, cfg.sigma1, c_out(cfg), act, seed, tol.rel_tol(),
        )?;
        let (trained, train_records) =
            train_dnn(dnn.clone(), &data, loss, cfg.eta, steps, Recorder::every(2))?;
        let out = evolve(
            FlowModel::Dnn(dnn),
            &data,
            loss,
            cfg.eta,
            steps,
            Integrator::Euler,
            Recorder::every(2),
        )?;
        let net_match = match &out.model {
            FlowModel::Dnn(n) => n.weights() == trained.weights(),
            _ => false,
        };
        let records_match = out.records == train_records;
        let (rnet, _) = init_resnet_regression(
            &data, m, depth.max(2), cfg.sigma1, c_out(cfg), act, act, seed, tol.rel_tol(),
        )?;
        let (rtrained, rtrain_records) =
            train_resnet(rnet.clone(), &data, loss, cfg.eta, steps, Recorder::every(2))?;
        let rout = evolve(
            FlowModel::Res(rnet),
            &data,
            loss,
            cfg.eta,
            steps,
            Integrator::Euler,
            Recorder::every(2),
        )?;
        let rnet_match = match &rout.model {
            FlowModel::Res(n) => {
                n.v1() == rtrained.v1() && n.mids() == rtrained.mids() && n.v_out() == rtrained.v_out()
            }
            _ => false,
        };
        let rrecords_match = rout.records == rtrain_records;
        let pass = net_match && records_match && rnet_match && rrecords_match;
        points.push(StudyPoint {
            label: format!("config{i}"),
            x: i as f64,
            value: if pass { 1.0 } else { 0.0 },
            extra: BTreeMap::new(),
        });
        verdicts.push(Verdict {
            name: format!("euler_identity_config{i}"),
            pass,
            detail: format!(
                "m={m} depth={depth} steps={steps}: dnn weights {net_match}, dnn records {records_match}, res weights {rnet_match}, res records {rrecords_match}"
            ),
        });
    }
    Ok(finish("flow_identity", points, None, None, verdicts, started))
}
