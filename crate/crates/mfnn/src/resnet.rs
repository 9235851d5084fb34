//! Residual networks with width-scaled gradient descent.
//!
//! All residual blocks share one width m. Features carry a persistent state
//! beta that each block nudges through a bounded branch:
//!
//! ```text
//! beta_1 = (1/d) X V_1,
//! alpha_l = (1/m) h1(beta_{l-1}) V_l,   beta_l = h2(alpha_l) + beta_{l-1},
//! output  = (1/m) h1(beta_L) V_{L+1},
//! ```
//!
//! for l in 2..=L, so consecutive states differ by at most sup |h2| in every
//! coordinate no matter how training moves the weights. [`skip_perturbation`]
//! reports that difference from the cached branch values, making the bound
//! exact rather than subject to re-subtraction roundoff.
//!
//! Layer l's gradient is scaled by eta * m_{l-1} * m_l exactly as in the
//! fully connected case, with m_0 = d and m_{L+1} = 1.

use crate::config_io::{Dataset, Recorder, RunRecord};
use crate::funcs::{h_eval, h_prime, Activation, Loss};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResNetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

/// Residual net weights: input map `v1` (d x m), square residual maps for
/// layers 2..=L, and the output weights (length m).
#[derive(Clone, Debug, PartialEq)]
pub struct ResNet {
    v1: DMatrix<f64>,
    mids: Vec<DMatrix<f64>>,
    v_out: DVector<f64>,
    h1: Activation,
    h2: Activation,
}

impl ResNet {
    pub fn from_parts(
        v1: DMatrix<f64>,
        mids: Vec<DMatrix<f64>>,
        v_out: DVector<f64>,
        h1: Activation,
        h2: Activation,
    ) -> Result<Self, ResNetError> {
        let m = v1.ncols();
        if v1.nrows() == 0 || m == 0 {
            return Err(ResNetError::ShapeMismatch("input map is empty".into()));
        }
        if mids.is_empty() {
            return Err(ResNetError::ShapeMismatch(
                "need at least one residual block (depth >= 2)".into(),
            ));
        }
        for (k, v) in mids.iter().enumerate() {
            if v.nrows() != m || v.ncols() != m {
                return Err(ResNetError::ShapeMismatch(format!(
                    "residual block {} is {}x{}, want {m}x{m}",
                    k + 2,
                    v.nrows(),
                    v.ncols()
                )));
            }
        }
        if v_out.len() != m {
            return Err(ResNetError::ShapeMismatch(format!(
                "output layer has {} weights, want {m}",
                v_out.len()
            )));
        }
        let finite = v1.iter().all(|v| v.is_finite())
            && mids.iter().all(|b| b.iter().all(|v| v.is_finite()))
            && v_out.iter().all(|v| v.is_finite());
        if !finite {
            return Err(ResNetError::ShapeMismatch("non-finite weights".into()));
        }
        Ok(ResNet { v1, mids, v_out, h1, h2 })
    }

    pub fn v1(&self) -> &DMatrix<f64> {
        &self.v1
    }

    pub fn mids(&self) -> &[DMatrix<f64>] {
        &self.mids
    }

    pub fn v_out(&self) -> &DVector<f64> {
        &self.v_out
    }

    pub fn h1(&self) -> Activation {
        self.h1
    }

    pub fn h2(&self) -> Activation {
        self.h2
    }

    pub fn width(&self) -> usize {
        self.v1.ncols()
    }

    /// Number of feature layers L (so there are L - 1 residual blocks).
    pub fn depth(&self) -> usize {
        self.mids.len() + 1
    }

    pub fn input_dim(&self) -> usize {
        self.v1.nrows()
    }

    /// Largest absolute weight per layer, input side first.
    pub fn max_abs_per_layer(&self) -> Vec<f64> {
        let mut out = vec![self.v1.amax()];
        out.extend(self.mids.iter().map(|v| v.amax()));
        out.push(self.v_out.amax());
        out
    }
}

/// Forward features for the whole dataset.
#[derive(Clone, Debug)]
pub struct ResCache {
    /// `betas[k]` is beta_{k+1}, N x m, for k in 0..L.
    pub betas: Vec<DMatrix<f64>>,
    /// h1 of each beta block, matching `betas`.
    pub h1_betas: Vec<DMatrix<f64>>,
    /// `alphas[k]` is alpha_{k+2}, N x m, for k in 0..L-1.
    pub alphas: Vec<DMatrix<f64>>,
    /// Branch values h2(alpha) actually added to the state, matching `alphas`.
    pub h2_alphas: Vec<DMatrix<f64>>,
    /// Scalar outputs, one per sample.
    pub output: DVector<f64>,
}

pub fn resnet_forward(net: &ResNet, data: &Dataset) -> Result<ResCache, ResNetError> {
    if data.dim() != net.input_dim() {
        return Err(ResNetError::ShapeMismatch(format!(
            "data dimension {} vs net input {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let m = net.width() as f64;
    let l = net.depth();
    let mut betas = Vec::with_capacity(l);
    let mut h1_betas = Vec::with_capacity(l);
    let mut alphas = Vec::with_capacity(l - 1);
    let mut h2_alphas = Vec::with_capacity(l - 1);
    let beta1 = (&data.x * &net.v1) / data.dim() as f64;
    h1_betas.push(h_eval(net.h1, &beta1));
    betas.push(beta1);
    for v in &net.mids {
        let alpha = (h1_betas.last().unwrap() * v) / m;
        let h2a = h_eval(net.h2, &alpha);
        let beta = &h2a + betas.last().unwrap();
        h1_betas.push(h_eval(net.h1, &beta));
        betas.push(beta);
        alphas.push(alpha);
        h2_alphas.push(h2a);
    }
    let out = (h1_betas.last().unwrap() * DMatrix::from_column_slice(net.width(), 1, net.v_out.as_slice())) / m;
    let output = DVector::from_column_slice(out.as_slice());
    Ok(ResCache { betas, h1_betas, alphas, h2_alphas, output })
}

/// Mean loss over samples.
pub fn resnet_loss(cache: &ResCache, y: &DVector<f64>, loss: Loss) -> f64 {
    assert_eq!(cache.output.len(), y.len(), "output/target length mismatch");
    let n = y.len() as f64;
    cache.output.iter().zip(y.iter()).map(|(&o, &t)| loss.eval(o, t)).sum::<f64>() / n
}

/// Gradients matching the weight layout of [`ResNet`].
#[derive(Clone, Debug)]
pub struct ResGrads {
    pub g1: DMatrix<f64>,
    pub mids: Vec<DMatrix<f64>>,
    pub g_out: DVector<f64>,
}

/// Backward sensitivities plus gradients. Each sensitivity block equals N
/// times the gradient of the mean loss in the matching feature block.
#[derive(Clone, Debug)]
pub struct ResBackward {
    pub d_out: DVector<f64>,
    /// `d_betas[k]` matches `betas[k]`.
    pub d_betas: Vec<DMatrix<f64>>,
    /// `d_alphas[k]` matches `alphas[k]`.
    pub d_alphas: Vec<DMatrix<f64>>,
    pub grads: ResGrads,
}

pub fn resnet_backward(
    net: &ResNet,
    cache: &ResCache,
    data: &Dataset,
    loss: Loss,
) -> Result<ResBackward, ResNetError> {
    let l = net.depth();
    if cache.betas.len() != l || cache.output.len() != data.n() || data.dim() != net.input_dim() {
        return Err(ResNetError::ShapeMismatch("cache does not match net and data".into()));
    }
    let n = data.n() as f64;
    let m = net.width() as f64;
    let d_out = DVector::from_fn(data.n(), |i, _| loss.deriv1(cache.output[i], data.y[i]));
    let d_out_mat = DMatrix::from_column_slice(data.n(), 1, d_out.as_slice());
    let v_out_row = DMatrix::from_row_slice(1, net.width(), net.v_out.as_slice());
    let mut d_betas = vec![DMatrix::zeros(0, 0); l];
    let mut d_alphas = vec![DMatrix::zeros(0, 0); l - 1];
    // Top state feels the output layer.
    d_betas[l - 1] =
        ((&d_out_mat * v_out_row) / m).component_mul(&h_prime(net.h1, &cache.betas[l - 1]));
    // Walk blocks downward: branch sensitivity, then the state one level down
    // (through-the-branch term plus the identity skip term).
    for k in (0..l - 1).rev() {
        d_alphas[k] = d_betas[k + 1].component_mul(&h_prime(net.h2, &cache.alphas[k]));
        d_betas[k] = ((&d_alphas[k] * net.mids[k].transpose()) / m)
            .component_mul(&h_prime(net.h1, &cache.betas[k]))
            + &d_betas[k + 1];
    }
    let g1 = (data.x.transpose() * &d_betas[0]) / (n * data.dim() as f64);
    let mids = (0..l - 1)
        .map(|k| (cache.h1_betas[k].transpose() * &d_alphas[k]) / (n * m))
        .collect();
    let g_out_mat = (cache.h1_betas[l - 1].transpose() * &d_out_mat) / (n * m);
    let g_out = DVector::from_column_slice(g_out_mat.as_slice());
    Ok(ResBackward { d_out, d_betas, d_alphas, grads: ResGrads { g1, mids, g_out } })
}

/// One descent step with per-layer width factors eta * m_{l-1} * m_l.
pub fn resnet_step(mut net: ResNet, grads: &ResGrads, eta: f64) -> ResNet {
    let d = net.input_dim() as f64;
    let m = net.width() as f64;
    net.v1 -= &grads.g1 * (eta * d * m);
    for (v, g) in net.mids.iter_mut().zip(&grads.mids) {
        *v -= g * (eta * m * m);
    }
    net.v_out -= &grads.g_out * (eta * m);
    net
}

/// Largest coordinate moved by any residual branch: sup over blocks, samples,
/// and nodes of |beta_l - beta_{l-1}|, read off the cached branch values so
/// the sup |h2| bound holds exactly.
pub fn skip_perturbation(cache: &ResCache) -> f64 {
    cache.h2_alphas.iter().map(|b| b.amax()).fold(0.0, f64::max)
}

/// Largest spread between node features in a block (max minus min per row).
fn block_spread(block: &DMatrix<f64>) -> f64 {
    if block.ncols() < 2 {
        return 0.0;
    }
    let mut spread: f64 = 0.0;
    for n in 0..block.nrows() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..block.ncols() {
            let v = block[(n, i)];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        spread = spread.max(hi - lo);
    }
    spread
}

/// Builds the standard observable row for one recorded step.
pub fn resnet_run_record(
    net: &ResNet,
    cache: &ResCache,
    loss_value: f64,
    step: usize,
    eta: f64,
) -> RunRecord {
    RunRecord {
        step,
        time: step as f64 * eta,
        loss: loss_value,
        max_weight: net.max_abs_per_layer(),
        feature_spread: cache.betas.iter().map(block_spread).collect(),
        skip_perturbation: Some(skip_perturbation(cache)),
    }
}

/// Runs `k_steps` scaled descent steps, mirroring the fully connected loop.
pub fn train_resnet(
    net: ResNet,
    data: &Dataset,
    loss: Loss,
    eta: f64,
    k_steps: usize,
    rec: Recorder,
) -> Result<(ResNet, Vec<RunRecord>), ResNetError> {
    let mut net = net;
    let mut records = Vec::new();
    for step in 0..=k_steps {
        let cache = resnet_forward(&net, data)?;
        let loss_value = resnet_loss(&cache, &data.y, loss);
        if !loss_value.is_finite() {
            return Err(ResNetError::NonFiniteLoss { step });
        }
        if rec.should_record(step, k_steps) {
            records.push(resnet_run_record(&net, &cache, loss_value, step, eta));
        }
        if step < k_steps {
            let back = resnet_backward(&net, &cache, data, loss)?;
            net = resnet_step(net, &back.grads, eta);
        }
    }
    Ok((net, records))
}
