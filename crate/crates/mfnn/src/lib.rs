//! Desk-scale experiments for width-scaled neural network training.
//!
//! The crate implements two discrete architectures, a fully connected net and a
//! residual net, trained by gradient descent whose per-layer rates carry explicit
//! width factors. Around them sit the pieces needed to compare finite-width runs
//! against their infinite-width descriptions: regression-based initializations,
//! analytic and Monte Carlo kernel recursions, coupled "ideal" particle systems,
//! and step/width refinement harnesses. [`experiments`] packages the standard
//! studies behind a small report type consumed by the companion CLI.
//!
//! Layer indices in doc comments are 1-based to match the update-rule
//! conventions; all storage is 0-based with the mapping stated on each field.

pub mod config_io;
pub mod dnn;
pub mod experiments;
pub mod flowsim;
pub mod funcs;
pub mod meanfield;
pub mod numerics;
pub mod resnet;
