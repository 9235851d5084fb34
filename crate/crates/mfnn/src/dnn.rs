//! Fully connected networks under width-scaled gradient descent.
//!
//! Layer widths are m_0 = d (input), m_1..m_L (hidden), m_{L+1} = 1 (output).
//! Features propagate through averaged sums,
//!
//! ```text
//! theta_1 = (1/d) X W_1,    theta_l = (1/m_{l-1}) h(theta_{l-1}) W_l,
//! ```
//!
//! with no activation on the raw inputs, and the training loss averages a
//! scalar loss over samples. Gradient descent multiplies the gradient of
//! layer l by eta * m_{l-1} * m_l, which is what keeps per-node update sizes
//! width-independent; [`scaled_gd_step`] is the single update primitive every
//! harness in this crate goes through.
//!
//! The sensitivity blocks D_l cached by [`dnn_backward`] equal N times the
//! loss gradient in the corresponding features, a convention checked directly
//! by finite differences in the tests.

use crate::config_io::{Dataset, Recorder, RunRecord};
use crate::funcs::{h_eval, h_prime, Activation, Loss};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("layer {layer} has {has} nodes, need at least {needed}")]
    DegenerateWidth { layer: usize, has: usize, needed: usize },
}

/// Weights of a fully connected net; `weights[k]` maps layer k to layer k+1
/// and has shape m_k x m_{k+1} (so `weights[0]` is d x m_1 and the last
/// matrix has one column).
#[derive(Clone, Debug, PartialEq)]
pub struct DnnNet {
    weights: Vec<DMatrix<f64>>,
    activation: Activation,
}

impl DnnNet {
    pub fn from_weights(
        weights: Vec<DMatrix<f64>>,
        activation: Activation,
    ) -> Result<Self, DnnError> {
        if weights.len() < 2 {
            return Err(DnnError::ShapeMismatch(format!(
                "need at least input and output layers, got {} matrices",
                weights.len()
            )));
        }
        for (k, w) in weights.iter().enumerate() {
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(DnnError::ShapeMismatch(format!("layer {} is empty", k + 1)));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(DnnError::ShapeMismatch(format!(
                    "layer {} has non-finite weights",
                    k + 1
                )));
            }
        }
        for k in 0..weights.len() - 1 {
            if weights[k].ncols() != weights[k + 1].nrows() {
                return Err(DnnError::ShapeMismatch(format!(
                    "layer {} outputs {} nodes but layer {} expects {}",
                    k + 1,
                    weights[k].ncols(),
                    k + 2,
                    weights[k + 1].nrows()
                )));
            }
        }
        if weights.last().unwrap().ncols() != 1 {
            return Err(DnnError::ShapeMismatch("output layer must have one node".into()));
        }
        Ok(DnnNet { weights, activation })
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of hidden layers L.
    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    /// Widths m_0..m_{L+1} including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut out = vec![self.input_dim()];
        out.extend(self.weights.iter().map(|w| w.ncols()));
        out
    }

    /// Largest absolute weight per layer, input side first.
    pub fn max_abs_per_layer(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.amax()).collect()
    }
}

/// Features of one forward pass over the whole dataset.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    /// `thetas[k]` is theta_{k+1}, an N x m_{k+1} block, for k in 0..L.
    pub thetas: Vec<DMatrix<f64>>,
    /// Activations h(theta_{k+1}) matching `thetas`.
    pub h_thetas: Vec<DMatrix<f64>>,
    /// Scalar outputs theta_{L+1}, one per sample.
    pub output: DVector<f64>,
}

pub fn dnn_forward(net: &DnnNet, data: &Dataset) -> Result<FeatureCache, DnnError> {
    if data.dim() != net.input_dim() {
        return Err(DnnError::ShapeMismatch(format!(
            "data dimension {} vs net input {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let l = net.depth();
    let mut thetas = Vec::with_capacity(l);
    let mut h_thetas = Vec::with_capacity(l);
    let theta1 = (&data.x * &net.weights[0]) / data.dim() as f64;
    h_thetas.push(h_eval(net.activation, &theta1));
    thetas.push(theta1);
    for k in 1..l {
        let m_prev = net.weights[k].nrows() as f64;
        let theta = (&h_thetas[k - 1] * &net.weights[k]) / m_prev;
        h_thetas.push(h_eval(net.activation, &theta));
        thetas.push(theta);
    }
    let m_last = net.weights[l].nrows() as f64;
    let out = (&h_thetas[l - 1] * &net.weights[l]) / m_last;
    let output = DVector::from_column_slice(out.as_slice());
    Ok(FeatureCache { thetas, h_thetas, output })
}

/// Mean loss over samples.
pub fn dnn_loss(cache: &FeatureCache, y: &DVector<f64>, loss: Loss) -> f64 {
    assert_eq!(cache.output.len(), y.len(), "output/target length mismatch");
    let n = y.len() as f64;
    cache.output.iter().zip(y.iter()).map(|(&o, &t)| loss.eval(o, t)).sum::<f64>() / n
}

/// Backward sensitivities; each block equals N times the gradient of the mean
/// loss in the corresponding feature block.
#[derive(Clone, Debug)]
pub struct BackwardCache {
    /// Output sensitivities: loss slope per sample.
    pub d_out: DVector<f64>,
    /// `ds[k]` matches `thetas[k]` in shape.
    pub ds: Vec<DMatrix<f64>>,
}

/// Loss gradients, one block per weight matrix.
#[derive(Clone, Debug)]
pub struct DnnGrads {
    pub g: Vec<DMatrix<f64>>,
}

pub fn dnn_backward(
    net: &DnnNet,
    cache: &FeatureCache,
    data: &Dataset,
    loss: Loss,
) -> Result<(BackwardCache, DnnGrads), DnnError> {
    let l = net.depth();
    if cache.thetas.len() != l
        || cache.output.len() != data.n()
        || data.dim() != net.input_dim()
    {
        return Err(DnnError::ShapeMismatch("cache does not match net and data".into()));
    }
    let n = data.n() as f64;
    let d_out = DVector::from_fn(data.n(), |i, _| loss.deriv1(cache.output[i], data.y[i]));
    let mut ds = vec![DMatrix::zeros(0, 0); l];
    // Top hidden layer folds the output weights; below that each layer pulls
    // sensitivities through its outgoing weights, dividing by its own width.
    let d_out_mat = DMatrix::from_column_slice(data.n(), 1, d_out.as_slice());
    for k in (0..l).rev() {
        let up = if k == l - 1 { &d_out_mat } else { &ds[k + 1] };
        let m_k = net.weights[k + 1].nrows() as f64;
        let back = (up * net.weights[k + 1].transpose()) / m_k;
        ds[k] = back.component_mul(&h_prime(net.activation, &cache.thetas[k]));
    }
    let mut g = Vec::with_capacity(l + 1);
    g.push((data.x.transpose() * &ds[0]) / (n * data.dim() as f64));
    for k in 1..l {
        let m_prev = net.weights[k].nrows() as f64;
        g.push((cache.h_thetas[k - 1].transpose() * &ds[k]) / (n * m_prev));
    }
    let m_last = net.weights[l].nrows() as f64;
    g.push((cache.h_thetas[l - 1].transpose() * &d_out_mat) / (n * m_last));
    Ok((BackwardCache { d_out, ds }, DnnGrads { g }))
}

/// One descent step: layer l moves by `eta * m_{l-1} * m_l` times its
/// gradient, with m_0 = d and m_{L+1} = 1.
pub fn scaled_gd_step(mut net: DnnNet, grads: &DnnGrads, eta: f64) -> DnnNet {
    assert_eq!(net.weights.len(), grads.g.len(), "gradient/weight layer mismatch");
    for (w, g) in net.weights.iter_mut().zip(&grads.g) {
        let rate = eta * (w.nrows() * w.ncols()) as f64;
        *w -= g * rate;
    }
    net
}

/// Builds the standard observable row for one recorded step.
pub fn dnn_run_record(
    net: &DnnNet,
    cache: &FeatureCache,
    loss_value: f64,
    step: usize,
    eta: f64,
) -> RunRecord {
    let l = net.depth();
    RunRecord {
        step,
        time: step as f64 * eta,
        loss: loss_value,
        max_weight: net.max_abs_per_layer(),
        feature_spread: (1..=l).map(|layer| feature_spread(cache, layer).unwrap_or(0.0)).collect(),
        skip_perturbation: None,
    }
}

/// Runs `k_steps` scaled descent steps, recording on the recorder's cadence
/// (step 0 and the final step always included). Fails fast on a non-finite
/// loss instead of training through the blowup.
pub fn train_dnn(
    net: DnnNet,
    data: &Dataset,
    loss: Loss,
    eta: f64,
    k_steps: usize,
    rec: Recorder,
) -> Result<(DnnNet, Vec<RunRecord>), DnnError> {
    let mut net = net;
    let mut records = Vec::new();
    for step in 0..=k_steps {
        let cache = dnn_forward(&net, data)?;
        let loss_value = dnn_loss(&cache, &data.y, loss);
        if !loss_value.is_finite() {
            return Err(DnnError::NonFiniteLoss { step });
        }
        if rec.should_record(step, k_steps) {
            records.push(dnn_run_record(&net, &cache, loss_value, step, eta));
        }
        if step < k_steps {
            let (_, grads) = dnn_backward(&net, &cache, data, loss)?;
            net = scaled_gd_step(net, &grads, eta);
        }
    }
    Ok((net, records))
}

/// Largest sup-norm distance between two node feature columns at a hidden
/// layer (1-based index). Computed per sample as max minus min, which equals
/// the pairwise definition exactly.
pub fn feature_spread(cache: &FeatureCache, layer: usize) -> Result<f64, DnnError> {
    if layer == 0 || layer > cache.thetas.len() {
        return Err(DnnError::ShapeMismatch(format!("no hidden layer {layer}")));
    }
    let theta = &cache.thetas[layer - 1];
    if theta.ncols() < 2 {
        return Err(DnnError::DegenerateWidth { layer, has: theta.ncols(), needed: 2 });
    }
    let mut spread: f64 = 0.0;
    for n in 0..theta.nrows() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..theta.ncols() {
            let v = theta[(n, i)];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        spread = spread.max(hi - lo);
    }
    Ok(spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config_io::{check_records, make_synthetic_dataset, normal_draws, split_stream, purpose, DatasetKind};
    use approx::assert_abs_diff_eq;

    /// Random net with the given hidden widths, entries O(1).
    fn seeded_net(d: usize, hidden: &[usize], activation: Activation, seed: u64) -> DnnNet {
        let mut dims = vec![d];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let weights = (0..dims.len() - 1)
            .map(|k| {
                let draws = normal_draws(
                    split_stream(seed, (k as u32 + 1, 0, purpose::WEIGHT)),
                    dims[k] * dims[k + 1],
                );
                DMatrix::from_vec(dims[k], dims[k + 1], draws)
            })
            .collect();
        DnnNet::from_weights(weights, activation).unwrap()
    }

    fn toy_data(n: usize, d: usize, seed: u64) -> Dataset {
        make_synthetic_dataset(n, d, seed, DatasetKind::GaussianRegression).unwrap()
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        let w1 = DMatrix::zeros(3, 4);
        let w_bad = DMatrix::zeros(5, 1);
        assert!(matches!(
            DnnNet::from_weights(vec![w1.clone(), w_bad], Activation::Tanh),
            Err(DnnError::ShapeMismatch(_))
        ));
        let w_wide = DMatrix::zeros(4, 2);
        assert!(DnnNet::from_weights(vec![w1.clone(), w_wide], Activation::Tanh).is_err());
        assert!(DnnNet::from_weights(vec![w1.clone()], Activation::Tanh).is_err());
        let mut w_nan = DMatrix::zeros(4, 1);
        w_nan[(0, 0)] = f64::NAN;
        assert!(DnnNet::from_weights(vec![w1, w_nan], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_net_is_identically_zero() {
        let net = DnnNet::from_weights(
            vec![DMatrix::zeros(3, 4), DMatrix::zeros(4, 2), DMatrix::zeros(2, 1)],
            Activation::Tanh,
        )
        .unwrap();
        let data = toy_data(5, 3, 1);
        let cache = dnn_forward(&net, &data).unwrap();
        assert!(cache.output.amax() == 0.0);
        for t in &cache.thetas {
            assert!(t.amax() == 0.0);
        }
        let expect: f64 =
            data.y.iter().map(|&t| Loss::Squared.eval(0.0, t)).sum::<f64>() / data.n() as f64;
        assert_abs_diff_eq!(dnn_loss(&cache, &data.y, Loss::Squared), expect, epsilon = 1e-15);
    }

    #[test]
    fn scalar_chain_matches_hand_computation() {
        // d = m = 1, L = 2, x = 1: theta_1 = w1, theta_2 = w2 tanh(w1),
        // output = w3 tanh(theta_2).
        let (w1, w2, w3) = (2.0, 0.5, 1.5);
        let net = DnnNet::from_weights(
            vec![
                DMatrix::from_element(1, 1, w1),
                DMatrix::from_element(1, 1, w2),
                DMatrix::from_element(1, 1, w3),
            ],
            Activation::Tanh,
        )
        .unwrap();
        let data = Dataset::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.3),
        )
        .unwrap();
        let cache = dnn_forward(&net, &data).unwrap();
        assert_abs_diff_eq!(cache.thetas[0][(0, 0)], w1, epsilon = 1e-15);
        assert_abs_diff_eq!(cache.thetas[1][(0, 0)], w2 * w1.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            cache.output[0],
            w3 * (w2 * w1.tanh()).tanh(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn forward_matches_naive_loops() {
        let data = toy_data(4, 3, 7);
        let net = seeded_net(3, &[6, 5, 4], Activation::Tanh, 11);
        let cache = dnn_forward(&net, &data).unwrap();
        let w = net.weights();
        for n in 0..4 {
            // Layer 1 from raw inputs.
            let mut theta_prev: Vec<f64> = (0..6)
                .map(|j| (0..3).map(|i| data.x[(n, i)] * w[0][(i, j)]).sum::<f64>() / 3.0)
                .collect();
            for j in 0..6 {
                assert_abs_diff_eq!(cache.thetas[0][(n, j)], theta_prev[j], epsilon = 1e-12);
            }
            // Hidden layers with activation on the previous layer.
            for (k, &width) in [5usize, 4].iter().enumerate() {
                let m_prev = w[k + 1].nrows();
                let theta: Vec<f64> = (0..width)
                    .map(|j| {
                        (0..m_prev)
                            .map(|i| theta_prev[i].tanh() * w[k + 1][(i, j)])
                            .sum::<f64>()
                            / m_prev as f64
                    })
                    .collect();
                for j in 0..width {
                    assert_abs_diff_eq!(cache.thetas[k + 1][(n, j)], theta[j], epsilon = 1e-12);
                }
                theta_prev = theta;
            }
            let out =
                (0..4).map(|i| theta_prev[i].tanh() * w[3][(i, 0)]).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(cache.output[n], out, epsilon = 1e-12);
        }
        // Loss agrees with a scalar loop.
        let ph = Loss::PseudoHuber { delta: 1.0 };
        let by_hand: f64 = (0..4)
            .map(|n| ph.eval(cache.output[n], data.y[n]))
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(dnn_loss(&cache, &data.y, ph), by_hand, epsilon = 1e-14);
    }

    /// Central difference of the mean loss in one weight coordinate.
    fn fd_grad(
        net: &DnnNet,
        data: &Dataset,
        loss: Loss,
        layer: usize,
        i: usize,
        j: usize,
        eps: f64,
    ) -> f64 {
        let probe = |delta: f64| {
            let mut weights = net.weights().to_vec();
            weights[layer][(i, j)] += delta;
            let bumped = DnnNet::from_weights(weights, net.activation()).unwrap();
            let cache = dnn_forward(&bumped, data).unwrap();
            dnn_loss(&cache, &data.y, loss)
        };
        (probe(eps) - probe(-eps)) / (2.0 * eps)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let data = toy_data(4, 3, 13);
        let net = seeded_net(3, &[6, 5, 4], Activation::Tanh, 17);
        let loss = Loss::PseudoHuber { delta: 1.0 };
        let cache = dnn_forward(&net, &data).unwrap();
        let (_, grads) = dnn_backward(&net, &cache, &data, loss).unwrap();
        let mut rng = split_stream(3, (0, 0, purpose::PICK)).rng();
        use rand::Rng;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let layer = rng.random_range(0..net.weights().len());
            let i = rng.random_range(0..net.weights()[layer].nrows());
            let j = rng.random_range(0..net.weights()[layer].ncols());
            let fd = fd_grad(&net, &data, loss, layer, i, j, 1e-5);
            let an = grads.g[layer][(i, j)];
            let rel = (an - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-6, "worst relative gradient error {worst}");
    }

    #[test]
    fn backward_sensitivities_scale_as_n_times_feature_gradient() {
        // Check D_l = N * dLoss/dtheta_l by finite differences on the features:
        // perturb theta_l and rerun only the tail of the forward pass.
        let data = toy_data(3, 2, 5);
        let net = seeded_net(2, &[4, 3], Activation::Tanh, 23);
        let loss = Loss::Squared;
        let cache = dnn_forward(&net, &data).unwrap();
        let (back, _) = dnn_backward(&net, &cache, &data, loss).unwrap();
        let l = net.depth();
        let tail_loss = |layer: usize, n: usize, i: usize, delta: f64| -> f64 {
            let mut theta = cache.thetas[layer].clone();
            theta[(n, i)] += delta;
            for k in layer + 1..l {
                let m_prev = net.weights()[k].nrows() as f64;
                theta = (h_eval(net.activation(), &theta) * &net.weights()[k]) / m_prev;
            }
            let m_last = net.weights()[l].nrows() as f64;
            let out = (h_eval(net.activation(), &theta) * &net.weights()[l]) / m_last;
            (0..data.n())
                .map(|s| loss.eval(out[(s, 0)], data.y[s]))
                .sum::<f64>()
                / data.n() as f64
        };
        let eps = 1e-6;
        for layer in 0..l {
            for n in 0..data.n() {
                for i in 0..cache.thetas[layer].ncols() {
                    let fd = (tail_loss(layer, n, i, eps) - tail_loss(layer, n, i, -eps))
                        / (2.0 * eps);
                    let an = back.ds[layer][(n, i)];
                    assert!(
                        (an - data.n() as f64 * fd).abs() < 1e-6 * (1.0 + an.abs()),
                        "layer {layer} sample {n} node {i}: {an} vs N*{fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn interpolating_net_has_zero_gradients() {
        let data = toy_data(4, 3, 19);
        let net = seeded_net(3, &[5, 5], Activation::Tanh, 29);
        let cache = dnn_forward(&net, &data).unwrap();
        // Make the targets equal to the outputs: every loss slope is exactly 0.
        let fitted = Dataset::new(data.x.clone(), cache.output.clone()).unwrap();
        let loss = Loss::PseudoHuber { delta: 1.0 };
        let (back, grads) = dnn_backward(&net, &cache, &fitted, loss).unwrap();
        assert_eq!(back.d_out.amax(), 0.0);
        for g in &grads.g {
            assert_eq!(g.amax(), 0.0);
        }
        // One training step leaves the net bitwise unchanged.
        let stepped = scaled_gd_step(net.clone(), &grads, 0.1);
        assert_eq!(stepped, net);
    }

    #[test]
    fn output_sensitivity_bounded_by_loss_slope_bound() {
        let data = toy_data(6, 3, 31);
        let net = seeded_net(3, &[8, 8], Activation::Tanh, 37);
        let cache = dnn_forward(&net, &data).unwrap();
        let (back, _) =
            dnn_backward(&net, &cache, &data, Loss::PseudoHuber { delta: 1.0 }).unwrap();
        assert!(back.d_out.amax() <= 1.0);
    }

    #[test]
    fn scaled_step_applies_width_factors() {
        let net = seeded_net(3, &[4, 2], Activation::Tanh, 41);
        let cache_w: Vec<DMatrix<f64>> = net.weights().to_vec();
        let grads = DnnGrads {
            g: net.weights().iter().map(|w| DMatrix::from_element(w.nrows(), w.ncols(), 1.0)).collect(),
        };
        let eta = 0.01;
        let stepped = scaled_gd_step(net, &grads, eta);
        // Layer factors: d*m1 = 12, m1*m2 = 8, m2*1 = 2.
        for (k, factor) in [(0usize, 12.0), (1, 8.0), (2, 2.0)] {
            for (a, b) in stepped.weights()[k].iter().zip(cache_w[k].iter()) {
                assert_eq!(*a, b - eta * factor);
            }
        }
    }

    #[test]
    fn train_composes_single_steps_bitwise() {
        let data = toy_data(4, 3, 43);
        let net = seeded_net(3, &[6, 6], Activation::Tanh, 47);
        let loss = Loss::PseudoHuber { delta: 1.0 };
        let eta = 0.05;
        let (trained, records) =
            train_dnn(net.clone(), &data, loss, eta, 3, Recorder::every(1)).unwrap();
        // Manual replay.
        let mut manual = net.clone();
        for _ in 0..3 {
            let cache = dnn_forward(&manual, &data).unwrap();
            let (_, grads) = dnn_backward(&manual, &cache, &data, loss).unwrap();
            manual = scaled_gd_step(manual, &grads, eta);
        }
        assert_eq!(trained, manual);
        assert_eq!(records.len(), 4);
        check_records(&records).unwrap();
        assert_eq!(records[3].time, 3.0 * eta);
        // K = 0 records the initial state and changes nothing.
        let (same, initial) =
            train_dnn(net.clone(), &data, loss, eta, 0, Recorder::every(1)).unwrap();
        assert_eq!(same, net);
        assert_eq!(initial.len(), 1);
        assert_eq!(initial[0].step, 0);
    }

    #[test]
    fn training_reduces_loss_on_easy_problem() {
        let data = toy_data(4, 3, 53);
        let net = seeded_net(3, &[16, 16], Activation::Tanh, 59);
        let (_, records) =
            train_dnn(net, &data, Loss::Squared, 0.05, 40, Recorder::every(40)).unwrap();
        assert!(records.last().unwrap().loss < records[0].loss);
    }

    #[test]
    fn divergence_is_reported_not_propagated() {
        // Linear activation with squared loss and a huge rate blows up fast.
        let data = toy_data(2, 2, 61);
        let net = seeded_net(2, &[3], Activation::Linear, 67);
        let out = train_dnn(net, &data, Loss::Squared, 50.0, 400, Recorder::every(100));
        assert!(matches!(out, Err(DnnError::NonFiniteLoss { .. })));
    }

    #[test]
    fn feature_spread_matches_pairwise_definition() {
        let data = toy_data(5, 3, 71);
        let net = seeded_net(3, &[9, 7], Activation::Tanh, 73);
        let cache = dnn_forward(&net, &data).unwrap();
        for layer in 1..=2 {
            let fast = feature_spread(&cache, layer).unwrap();
            let theta = &cache.thetas[layer - 1];
            let mut naive: f64 = 0.0;
            for i in 0..theta.ncols() {
                for j in 0..theta.ncols() {
                    for n in 0..theta.nrows() {
                        naive = naive.max((theta[(n, i)] - theta[(n, j)]).abs());
                    }
                }
            }
            assert_eq!(fast, naive);
        }
    }

    #[test]
    fn feature_spread_trivial_cases() {
        // Identical feature columns spread zero; a constructed two-node layer
        // has a known spread.
        let theta = DMatrix::from_row_slice(2, 2, &[0.4, 0.4, -0.1, -0.1]);
        let cache = FeatureCache {
            thetas: vec![theta],
            h_thetas: vec![DMatrix::zeros(2, 2)],
            output: DVector::zeros(2),
        };
        assert_eq!(feature_spread(&cache, 1).unwrap(), 0.0);
        let theta = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 3.0]);
        let cache = FeatureCache {
            thetas: vec![theta],
            h_thetas: vec![DMatrix::zeros(2, 2)],
            output: DVector::zeros(2),
        };
        assert_eq!(feature_spread(&cache, 1).unwrap(), 3.0);
        assert!(matches!(
            feature_spread(&cache, 2),
            Err(DnnError::ShapeMismatch(_))
        ));
        let single = FeatureCache {
            thetas: vec![DMatrix::zeros(2, 1)],
            h_thetas: vec![DMatrix::zeros(2, 1)],
            output: DVector::zeros(2),
        };
        assert!(matches!(
            feature_spread(&single, 1),
            Err(DnnError::DegenerateWidth { .. })
        ));
    }

    #[test]
    fn records_carry_spreads_and_weight_norms() {
        let data = toy_data(4, 3, 79);
        let net = seeded_net(3, &[6, 5], Activation::Tanh, 83);
        let (_, records) =
            train_dnn(net, &data, Loss::Squared, 0.02, 5, Recorder::every(1)).unwrap();
        for r in &records {
            assert_eq!(r.max_weight.len(), 3);
            assert_eq!(r.feature_spread.len(), 2);
            assert!(r.skip_perturbation.is_none());
            assert!(r.feature_spread.iter().all(|&s| s >= 0.0));
        }
    }
}
