//! Coherent multi-expert forecast combination for linearly constrained
//! time series.
//!
//! Collections such as energy generation broken down by zone and by source
//! obey linear aggregation constraints, yet base forecasts produced
//! independently per series and per forecasting method rarely satisfy them.
//! This crate combines all available base forecasts into a single coherent
//! forecast vector by constrained generalized least squares, and ships the
//! surrounding machinery needed to study that combination:
//!
//! - [`hierarchy`]: grouped-hierarchy specs and the zero-constraint matrix;
//! - [`covariance`]: residual panels and shrunk error covariances;
//! - [`combiner`]: the optimal coherent combination, single-expert
//!   reconciliation, per-series weighting schemes and sequential pipelines;
//! - [`baseline`]: simple deterministic expert forecasters;
//! - [`evaluation`]: rolling-origin experiments and relative accuracy tables;
//! - [`simulate`]: a seeded Monte Carlo study with known error covariance;
//! - [`io`]: CSV/JSON ingestion and report rendering.

pub mod baseline;
pub mod combiner;
pub mod covariance;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod io;
pub mod simulate;

pub use error::{Error, Result};
