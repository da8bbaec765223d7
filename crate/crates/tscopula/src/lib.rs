//! Copula-based probabilistic prediction for multivariate time series.
//!
//! The estimator factors the joint distribution of the values to be
//! inferred into univariate marginal distributions and a nonparametric
//! copula that couples them:
//!
//! * masked token windows over possibly unaligned, unevenly sampled series
//!   ([`data`]);
//! * two independent transformer encoders producing per-token embeddings
//!   for the marginal path and for the copula path ([`encoder`]);
//! * per-variable CDFs modeled as monotone sigmoidal flows whose parameters
//!   come from a hypernetwork ([`flow`]);
//! * an autoregressive attentional copula over the unit hypercube, each
//!   conditional a histogram distribution parametrized by causal attention
//!   ([`copula`]);
//! * the assembled density estimator with its two-stage training curriculum
//!  : fit marginals under an independence copula, freeze them, then fit
//!   the copula: alongside a joint-training ablation ([`estimator`]);
//! * closed-form bivariate ground-truth distributions for validation
//!   ([`oracle`]);
//! * proper scoring rules and a rolling-window backtesting harness
//!   ([`metrics`]).
//!
//! Training, sampling, and generation are deterministic functions of an
//! explicit seed.

pub mod copula;
pub mod data;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod tape;

pub use error::{Error, Result};
