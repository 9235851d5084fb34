//! Explicit integration of the width-scaled descent field, and refinement
//! studies that separate time-discretization error from finite-width error.
//!
//! One scaled descent step is exactly an explicit Euler step of the
//! continuous-time field, so [`evolve`] with [`Integrator::Euler`] reproduces
//! the training loops bit for bit; the midpoint rule gives a second-order
//! reference for measuring how far the discrete trajectory sits from the
//! continuous one. [`step_refinement`] compares a ladder of step sizes
//! against a much finer reference trajectory at shared grid times, and
//! [`width_refinement`] compares recorded losses across widths against a
//! wide reference model built by a caller-supplied factory.

use crate::config_io::{Dataset, Recorder, RunRecord};
use crate::dnn::{
    dnn_backward, dnn_forward, dnn_loss, dnn_run_record, scaled_gd_step, DnnError, DnnNet,
};
use crate::funcs::Loss;
use crate::meanfield::MeanFieldError;
use crate::numerics::{fit_loglog_slope, LogLogFit};
use crate::resnet::{
    resnet_backward, resnet_forward, resnet_loss, resnet_run_record, resnet_step, ResNet,
    ResNetError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Dnn(#[from] DnnError),
    #[error(transparent)]
    Res(#[from] ResNetError),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid argument: {0}")]
    Invalid(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Midpoint,
}

/// Either network family, advanced by the same integrators.
#[derive(Clone, Debug)]
pub enum FlowModel {
    Dnn(DnnNet),
    Res(ResNet),
}

impl FlowModel {
    /// Largest weight magnitude across all layers.
    pub fn max_abs(&self) -> f64 {
        let per_layer = match self {
            FlowModel::Dnn(net) => net.max_abs_per_layer(),
            FlowModel::Res(net) => net.max_abs_per_layer(),
        };
        per_layer.into_iter().fold(0.0, f64::max)
    }

    /// Largest entrywise weight distance to another state of the same shape.
    pub fn weight_dev(&self, other: &FlowModel) -> Result<f64, FlowError> {
        match (self, other) {
            (FlowModel::Dnn(a), FlowModel::Dnn(b)) => {
                if a.widths() != b.widths() {
                    return Err(FlowError::Invalid("model shapes differ"));
                }
                Ok(a.weights()
                    .iter()
                    .zip(b.weights())
                    .map(|(wa, wb)| (wa - wb).amax())
                    .fold(0.0, f64::max))
            }
            (FlowModel::Res(a), FlowModel::Res(b)) => {
                if a.width() != b.width() || a.depth() != b.depth() {
                    return Err(FlowError::Invalid("model shapes differ"));
                }
                let mut dev = (a.v1() - b.v1()).amax();
                for (va, vb) in a.mids().iter().zip(b.mids()) {
                    dev = dev.max((va - vb).amax());
                }
                Ok(dev.max((a.v_out() - b.v_out()).amax()))
            }
            _ => Err(FlowError::Invalid("mismatched model kinds")),
        }
    }
}

/// Mean loss of the current state.
pub fn flow_loss(model: &FlowModel, data: &Dataset, loss: Loss) -> Result<f64, FlowError> {
    match model {
        FlowModel::Dnn(net) => Ok(dnn_loss(&dnn_forward(net, data)?, &data.y, loss)),
        FlowModel::Res(net) => Ok(resnet_loss(&resnet_forward(net, data)?, &data.y, loss)),
    }
}

/// One integrator step of size `eta`.
fn advance(
    model: FlowModel,
    data: &Dataset,
    loss: Loss,
    eta: f64,
    integrator: Integrator,
) -> Result<FlowModel, FlowError> {
    match model {
        FlowModel::Dnn(net) => {
            let cache = dnn_forward(&net, data)?;
            let (_, grads) = dnn_backward(&net, &cache, data, loss)?;
            let next = match integrator {
                Integrator::Euler => scaled_gd_step(net, &grads, eta),
                Integrator::Midpoint => {
                    let half = scaled_gd_step(net.clone(), &grads, eta * 0.5);
                    let half_cache = dnn_forward(&half, data)?;
                    let (_, mid_grads) = dnn_backward(&half, &half_cache, data, loss)?;
                    scaled_gd_step(net, &mid_grads, eta)
                }
            };
            Ok(FlowModel::Dnn(next))
        }
        FlowModel::Res(net) => {
            let cache = resnet_forward(&net, data)?;
            let back = resnet_backward(&net, &cache, data, loss)?;
            let next = match integrator {
                Integrator::Euler => resnet_step(net, &back.grads, eta),
                Integrator::Midpoint => {
                    let half = resnet_step(net.clone(), &back.grads, eta * 0.5);
                    let half_cache = resnet_forward(&half, data)?;
                    let mid = resnet_backward(&half, &half_cache, data, loss)?;
                    resnet_step(net, &mid.grads, eta)
                }
            };
            Ok(FlowModel::Res(next))
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowOutcome {
    pub model: FlowModel,
    pub records: Vec<RunRecord>,
}

/// Integrates for `k_steps` steps of size `eta`, recording on the same
/// cadence as the training loops. The Euler path performs the identical
/// sequence of primitive calls as training and therefore matches it bitwise.
pub fn evolve(
    model: FlowModel,
    data: &Dataset,
    loss: Loss,
    eta: f64,
    k_steps: usize,
    integrator: Integrator,
    rec: Recorder,
) -> Result<FlowOutcome, FlowError> {
    match model {
        FlowModel::Dnn(mut net) => {
            let mut records = Vec::new();
            for step in 0..=k_steps {
                let cache = dnn_forward(&net, data)?;
                let loss_value = dnn_loss(&cache, &data.y, loss);
                if !loss_value.is_finite() {
                    return Err(FlowError::NonFiniteLoss { step });
                }
                if rec.should_record(step, k_steps) {
                    records.push(dnn_run_record(&net, &cache, loss_value, step, eta));
                }
                if step < k_steps {
                    let (_, grads) = dnn_backward(&net, &cache, data, loss)?;
                    net = match integrator {
                        Integrator::Euler => scaled_gd_step(net, &grads, eta),
                        Integrator::Midpoint => {
                            let half = scaled_gd_step(net.clone(), &grads, eta * 0.5);
                            let half_cache = dnn_forward(&half, data)?;
                            let (_, mid_grads) = dnn_backward(&half, &half_cache, data, loss)?;
                            scaled_gd_step(net, &mid_grads, eta)
                        }
                    };
                }
            }
            Ok(FlowOutcome { model: FlowModel::Dnn(net), records })
        }
        FlowModel::Res(mut net) => {
            let mut records = Vec::new();
            for step in 0..=k_steps {
                let cache = resnet_forward(&net, data)?;
                let loss_value = resnet_loss(&cache, &data.y, loss);
                if !loss_value.is_finite() {
                    return Err(FlowError::NonFiniteLoss { step });
                }
                if rec.should_record(step, k_steps) {
                    records.push(resnet_run_record(&net, &cache, loss_value, step, eta));
                }
                if step < k_steps {
                    let back = resnet_backward(&net, &cache, data, loss)?;
                    net = match integrator {
                        Integrator::Euler => resnet_step(net, &back.grads, eta),
                        Integrator::Midpoint => {
                            let half = resnet_step(net.clone(), &back.grads, eta * 0.5);
                            let half_cache = resnet_forward(&half, data)?;
                            let mid = resnet_backward(&half, &half_cache, data, loss)?;
                            resnet_step(net, &mid.grads, eta)
                        }
                    };
                }
            }
            Ok(FlowOutcome { model: FlowModel::Res(net), records })
        }
    }
}

/// Deviations of a ladder of step sizes from a finer reference trajectory.
#[derive(Clone, Debug)]
pub struct StepRefinementReport {
    /// Step size per ladder level, halving between levels.
    pub etas: Vec<f64>,
    /// Sup over shared grid times of the normalized weight deviation from
    /// the reference trajectory.
    pub weight_devs: Vec<f64>,
    /// Sup over shared grid times of the loss deviation from the reference.
    pub loss_devs: Vec<f64>,
    /// `weight_devs[i] / weight_devs[i+1]`: near 2 for a first-order method.
    pub ratios: Vec<f64>,
}

/// Runs `levels` trajectories with `base_steps * 2^i` steps over `[0, t_end]`
/// plus a reference with `base_steps * ref_multiplier` steps, comparing all
/// of them at the coarse grid times. Weight deviations are normalized by one
/// plus the largest reference weight at the matching time.
pub fn step_refinement(
    model: &FlowModel,
    data: &Dataset,
    loss: Loss,
    t_end: f64,
    base_steps: usize,
    levels: usize,
    ref_multiplier: usize,
    integrator: Integrator,
) -> Result<StepRefinementReport, FlowError> {
    if base_steps == 0 || levels == 0 || !(t_end > 0.0) {
        return Err(FlowError::Invalid("need positive horizon, steps, and levels"));
    }
    let finest = 1usize << (levels - 1);
    if ref_multiplier % finest != 0 || ref_multiplier <= finest {
        return Err(FlowError::Invalid(
            "reference multiplier must be a strict multiple of the finest ladder level",
        ));
    }
    let eta0 = t_end / base_steps as f64;
    let mut states: Vec<Option<FlowModel>> = (0..levels).map(|_| Some(model.clone())).collect();
    let mut reference = model.clone();
    let mut weight_devs = vec![0.0f64; levels];
    let mut loss_devs = vec![0.0f64; levels];
    for j in 0..=base_steps {
        let ref_loss = flow_loss(&reference, data, loss)?;
        if !ref_loss.is_finite() {
            return Err(FlowError::NonFiniteLoss { step: j });
        }
        let ref_scale = 1.0 + reference.max_abs();
        for (i, slot) in states.iter().enumerate() {
            let st = slot.as_ref().expect("state present between advances");
            let l = flow_loss(st, data, loss)?;
            if !l.is_finite() {
                return Err(FlowError::NonFiniteLoss { step: j });
            }
            weight_devs[i] = weight_devs[i].max(st.weight_dev(&reference)? / ref_scale);
            loss_devs[i] = loss_devs[i].max((l - ref_loss).abs());
        }
        if j < base_steps {
            for (i, slot) in states.iter_mut().enumerate() {
                let sub = 1usize << i;
                let eta = eta0 / sub as f64;
                let mut st = slot.take().expect("state present between advances");
                for _ in 0..sub {
                    st = advance(st, data, loss, eta, integrator)?;
                }
                *slot = Some(st);
            }
            let eta_ref = eta0 / ref_multiplier as f64;
            for _ in 0..ref_multiplier {
                reference = advance(reference, data, loss, eta_ref, integrator)?;
            }
        }
    }
    let etas: Vec<f64> = (0..levels).map(|i| eta0 / (1usize << i) as f64).collect();
    let ratios: Vec<f64> =
        (0..levels.saturating_sub(1)).map(|i| weight_devs[i] / weight_devs[i + 1]).collect();
    Ok(StepRefinementReport { etas, weight_devs, loss_devs, ratios })
}

/// Loss deviations of a family of widths from a wide reference model.
#[derive(Clone, Debug)]
pub struct WidthRefinementReport {
    pub widths: Vec<usize>,
    pub ref_width: usize,
    /// Sup over recorded steps of |loss_m - loss_ref|.
    pub sup_loss_devs: Vec<f64>,
    /// Log-log fit of deviation against width, when the fit is well posed.
    pub slope: Option<LogLogFit>,
}

/// Evolves `factory(m)` for each width plus the reference width under
/// identical settings and compares recorded losses step by step.
pub fn width_refinement<F>(
    factory: F,
    widths: &[usize],
    ref_width: usize,
    data: &Dataset,
    loss: Loss,
    eta: f64,
    k_steps: usize,
    integrator: Integrator,
    rec: Recorder,
) -> Result<WidthRefinementReport, FlowError>
where
    F: Fn(usize) -> Result<FlowModel, MeanFieldError>,
{
    if widths.is_empty() {
        return Err(FlowError::Invalid("need at least one width"));
    }
    if widths.iter().any(|&m| m >= ref_width) {
        return Err(FlowError::Invalid("reference width must exceed every studied width"));
    }
    let reference = evolve(factory(ref_width)?, data, loss, eta, k_steps, integrator, rec)?;
    let mut sup_loss_devs = Vec::with_capacity(widths.len());
    for &m in widths {
        let out = evolve(factory(m)?, data, loss, eta, k_steps, integrator, rec)?;
        if out.records.len() != reference.records.len() {
            return Err(FlowError::Invalid("record cadences differ between widths"));
        }
        let mut sup: f64 = 0.0;
        for (a, b) in out.records.iter().zip(&reference.records) {
            if a.step != b.step {
                return Err(FlowError::Invalid("record steps differ between widths"));
            }
            sup = sup.max((a.loss - b.loss).abs());
        }
        sup_loss_devs.push(sup);
    }
    let xs: Vec<f64> = widths.iter().map(|&m| m as f64).collect();
    let slope = fit_loglog_slope(&xs, &sup_loss_devs).ok();
    Ok(WidthRefinementReport { widths: widths.to_vec(), ref_width, sup_loss_devs, slope })
}
