//! Activation and loss catalogs with analytic derivatives and numeric audits.
//!
//! Training code only ever sees the two enums here, so every regularity
//! constant the experiments rely on (bounded values, bounded derivatives,
//! Lipschitz derivatives) can be checked in one place. [`assumption_audit`]
//! estimates those constants on a grid and reports, per bound, whether the
//! estimate stabilizes as the grid radius doubles; catalog entries that are
//! known to violate a bound (the squared loss, the linear test activation)
//! are also flagged by declaration.

use nalgebra::DMatrix;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FuncsError {
    #[error("unknown activation id: {0}")]
    UnknownActivation(String),
    #[error("unknown loss id: {0}")]
    UnknownLoss(String),
    #[error("audit grid needs at least two points per axis, got {0}")]
    AuditGrid(usize),
}

/// Numerically stable ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar activation applied coordinatewise at every hidden layer.
///
/// `Linear` is test support for closed-form checks; it is deliberately not
/// parseable from config files and fails the boundedness audit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    /// tanh(c * x); `c = 0` gives the zero function, useful as a switched-off
    /// residual branch.
    ScaledTanh { c: f64 },
    /// softplus(x) - softplus(x - 2), a smooth bounded bump with range (0, 2).
    BoundedSoftplus,
    /// Identity map, test support only.
    Linear,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::ScaledTanh { c } => (c * x).tanh(),
            Activation::BoundedSoftplus => softplus(x) - softplus(x - 2.0),
            Activation::Linear => x,
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::ScaledTanh { c } => {
                let t = (c * x).tanh();
                c * (1.0 - t * t)
            }
            Activation::BoundedSoftplus => sigmoid(x) - sigmoid(x - 2.0),
            Activation::Linear => 1.0,
        }
    }

    /// Analytic sup of |h|; infinity for the linear test activation.
    pub fn sup_abs(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::ScaledTanh { c } => {
                if c == 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            Activation::BoundedSoftplus => 2.0,
            Activation::Linear => f64::INFINITY,
        }
    }

    /// Whether the catalog declares this activation to satisfy the bounded
    /// value / bounded derivative / Lipschitz derivative requirements.
    pub fn declared_compliant(self) -> bool {
        !matches!(self, Activation::Linear)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Tanh => write!(f, "tanh"),
            Activation::ScaledTanh { c } => write!(f, "scaled_tanh({c})"),
            Activation::BoundedSoftplus => write!(f, "bounded_softplus"),
            Activation::Linear => write!(f, "linear"),
        }
    }
}

impl FromStr for Activation {
    type Err = FuncsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "tanh" => return Ok(Activation::Tanh),
            "bounded_softplus" => return Ok(Activation::BoundedSoftplus),
            _ => {}
        }
        if let Some(arg) = s.strip_prefix("scaled_tanh(").and_then(|r| r.strip_suffix(')')) {
            if let Ok(c) = arg.trim().parse::<f64>() {
                if c.is_finite() {
                    return Ok(Activation::ScaledTanh { c });
                }
            }
        }
        Err(FuncsError::UnknownActivation(s.to_string()))
    }
}

/// Per-sample loss phi(prediction, target).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    /// delta^2 (sqrt(1 + ((x-y)/delta)^2) - 1); derivative bounded by delta.
    PseudoHuber { delta: f64 },
    /// (x - y)^2; unbounded derivative, kept for convergence demonstrations.
    Squared,
    /// ln(1 + exp(-x y)) for targets y in {-1, +1}.
    Logistic,
}

impl Loss {
    pub fn eval(self, x: f64, y: f64) -> f64 {
        match self {
            Loss::PseudoHuber { delta } => {
                let r = (x - y) / delta;
                delta * delta * ((1.0 + r * r).sqrt() - 1.0)
            }
            Loss::Squared => (x - y) * (x - y),
            Loss::Logistic => softplus(-x * y),
        }
    }

    /// Partial derivative in the first (prediction) argument.
    pub fn deriv1(self, x: f64, y: f64) -> f64 {
        match self {
            Loss::PseudoHuber { delta } => {
                let r = (x - y) / delta;
                (x - y) / (1.0 + r * r).sqrt()
            }
            Loss::Squared => 2.0 * (x - y),
            Loss::Logistic => -y * sigmoid(-x * y),
        }
    }

    /// Whether the catalog declares this loss to satisfy the bounded /
    /// Lipschitz derivative requirements.
    pub fn declared_compliant(self) -> bool {
        !matches!(self, Loss::Squared)
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::PseudoHuber { delta } => write!(f, "pseudo_huber({delta})"),
            Loss::Squared => write!(f, "squared"),
            Loss::Logistic => write!(f, "logistic"),
        }
    }
}

impl FromStr for Loss {
    type Err = FuncsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "pseudo_huber" => return Ok(Loss::PseudoHuber { delta: 1.0 }),
            "squared" => return Ok(Loss::Squared),
            "logistic" => return Ok(Loss::Logistic),
            _ => {}
        }
        if let Some(arg) = s.strip_prefix("pseudo_huber(").and_then(|r| r.strip_suffix(')')) {
            if let Ok(delta) = arg.trim().parse::<f64>() {
                if delta.is_finite() && delta > 0.0 {
                    return Ok(Loss::PseudoHuber { delta });
                }
            }
        }
        Err(FuncsError::UnknownLoss(s.to_string()))
    }
}

/// Entrywise h over a feature block.
pub fn h_eval(a: Activation, m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| a.eval(x))
}

/// Entrywise h' over a feature block.
pub fn h_prime(a: Activation, m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| a.deriv(x))
}

pub fn phi_eval(l: Loss, x: f64, y: f64) -> f64 {
    l.eval(x, y)
}

pub fn phi_prime1(l: Loss, x: f64, y: f64) -> f64 {
    l.deriv1(x, y)
}

/// Grid estimates of the activation regularity constants.
#[derive(Clone, Copy, Debug)]
pub struct ActivationAudit {
    pub sup_abs: f64,
    pub sup_deriv: f64,
    /// Largest secant slope of h', an estimate of the Lipschitz constant of h'.
    pub deriv_lipschitz: f64,
}

/// Grid estimates of the loss regularity constants (first argument only).
#[derive(Clone, Copy, Debug)]
pub struct LossAudit {
    pub sup_deriv: f64,
    /// Largest secant slope of phi in its first argument.
    pub lipschitz: f64,
}

/// Outcome of auditing one (activation, loss) pair.
///
/// Each boolean reports whether the corresponding grid estimate stabilizes
/// when the grid radius doubles and the catalog declares the bound to hold.
#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub activation: ActivationAudit,
    pub loss: LossAudit,
    pub h_bounded: bool,
    pub h_deriv_bounded: bool,
    pub h_deriv_lipschitz: bool,
    pub phi_deriv_bounded: bool,
    pub phi_lipschitz: bool,
}

impl AssumptionReport {
    pub fn compliant(&self) -> bool {
        self.h_bounded
            && self.h_deriv_bounded
            && self.h_deriv_lipschitz
            && self.phi_deriv_bounded
            && self.phi_lipschitz
    }
}

fn linspace(radius: f64, points: usize) -> Vec<f64> {
    // Odd count so the grid contains 0, where several catalog maxima sit.
    let points = if points % 2 == 0 { points + 1 } else { points };
    let step = 2.0 * radius / (points - 1) as f64;
    (0..points).map(|k| -radius + step * k as f64).collect()
}

fn audit_activation_at(a: Activation, radius: f64, points: usize) -> ActivationAudit {
    let grid = linspace(radius, points);
    let mut sup_abs: f64 = 0.0;
    let mut sup_deriv: f64 = 0.0;
    let mut lip: f64 = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for &x in &grid {
        sup_abs = sup_abs.max(a.eval(x).abs());
        let d = a.deriv(x);
        sup_deriv = sup_deriv.max(d.abs());
        if let Some((px, pd)) = prev {
            lip = lip.max((d - pd).abs() / (x - px));
        }
        prev = Some((x, d));
    }
    ActivationAudit { sup_abs, sup_deriv, deriv_lipschitz: lip }
}

fn audit_loss_at(l: Loss, radius: f64, points: usize) -> LossAudit {
    let targets: Vec<f64> = match l {
        // Logistic targets are declared to live in {-1, +1}.
        Loss::Logistic => vec![-1.0, 1.0],
        _ => linspace(radius, (points / 8).max(3)),
    };
    let grid = linspace(radius, points);
    let mut sup_deriv: f64 = 0.0;
    let mut lip: f64 = 0.0;
    for &y in &targets {
        let mut prev: Option<(f64, f64)> = None;
        for &x in &grid {
            sup_deriv = sup_deriv.max(l.deriv1(x, y).abs());
            let v = l.eval(x, y);
            if let Some((px, pv)) = prev {
                lip = lip.max((v - pv).abs() / (x - px));
            }
            prev = Some((x, v));
        }
    }
    LossAudit { sup_deriv, lipschitz: lip }
}

/// True when the estimate barely moves as the grid radius doubles.
fn stabilizes(at_r: f64, at_2r: f64) -> bool {
    (at_2r - at_r).abs() <= 5e-3 * (1.0 + at_r.abs())
}

/// Estimates regularity constants for an (activation, loss) pair on grids of
/// radius `radius` and `2 * radius`, and checks each required bound.
///
/// The returned audits are the ones computed at `2 * radius` (the wider view).
pub fn assumption_audit(
    a: Activation,
    l: Loss,
    radius: f64,
    points: usize,
) -> Result<AssumptionReport, FuncsError> {
    if points < 2 {
        return Err(FuncsError::AuditGrid(points));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(FuncsError::AuditGrid(0));
    }
    let a1 = audit_activation_at(a, radius, points);
    let a2 = audit_activation_at(a, 2.0 * radius, points);
    let l1 = audit_loss_at(l, radius, points);
    let l2 = audit_loss_at(l, 2.0 * radius, points);
    let da = a.declared_compliant();
    let dl = l.declared_compliant();
    Ok(AssumptionReport {
        h_bounded: da && stabilizes(a1.sup_abs, a2.sup_abs),
        h_deriv_bounded: da && stabilizes(a1.sup_deriv, a2.sup_deriv),
        h_deriv_lipschitz: da && stabilizes(a1.deriv_lipschitz, a2.deriv_lipschitz),
        phi_deriv_bounded: dl && stabilizes(l1.sup_deriv, l2.sup_deriv),
        phi_lipschitz: dl && stabilizes(l1.lipschitz, l2.lipschitz),
        activation: a2,
        loss: l2,
    })
}
