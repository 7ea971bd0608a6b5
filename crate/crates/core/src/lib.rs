//! Predictive state temporal difference learning.
//!
//! The numerical core ([`features`], [`covariance`], [`compression`],
//! [`learners`], [`tpsr`]) is generic over [`Scalar`] (`f32` or `f64`). The
//! benchmark environments, the stopping-problem tools and the experiment
//! harness work in `f64`; the aliases below name the `f64` instances.

pub mod compression;
pub mod covariance;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod features;
pub mod io;
pub mod learners;
pub mod linalg;
pub mod scalar;
pub mod stopping;
pub mod tpsr;

pub use error::{Error, Result};

/// Library version recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use scalar::Scalar;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
pub type FeatureMatrix = features::FeatureMatrix<f64>;
pub type CovarianceSet<O = usize> = covariance::CovarianceSet<f64, O>;
pub type Subspace = compression::Subspace<f64>;
pub type ValueFunction = learners::ValueFunction<f64>;
pub type TpsrModel<O = usize> = tpsr::TpsrModel<f64, O>;
