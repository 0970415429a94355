//! Probabilistic integration of gridded model ensembles.
//!
//! This crate combines an ensemble of gridded model fields into a single
//! probabilistic prediction of a target field. The central method is Gaussian
//! process regression with a recursively defined infinite-width neural-network
//! covariance ([`nngp`]), fitted by maximum likelihood through a
//! Kronecker-factored loss ([`gpr`]). Reference integration methods
//! ([`baselines`]), forecast verification metrics ([`verify`]) and a
//! perfect-model experiment harness with a synthetic data generator
//! ([`experiments`]) round out the toolkit.
//!
//! Data enters through [`gridstore`]: gridded fields with latitude/longitude
//! axes, time-stacked binary storage (CGRID), ensemble manifests, and the
//! vectorization that turns an ensemble snapshot into a kernel input vector.



pub mod gpr;
pub mod gridstore;
pub mod nngp;
pub mod util;


pub use gridstore::{EnsembleData, FieldSeries, GridField, GridSpec, TimeCode, TrainingSet};
pub use nngp::KernelParams;
