//! Fairness-aware spatiotemporal graph forecasting.
//!
//! A graph forecaster over city regions whose adjacency is reweighted every
//! epoch by residual-aware attention, trained under an equality-enhancing
//! loss and evaluated with spatial and demographic fairness metrics.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which the CLI uses throughout.

pub mod data;
pub mod domain;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raa;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use domain::{
    build_distance_adjacency, row_normalize, DemandTensor, DemographicTable, ForecastWindow,
    RegionGraph, ResidualVector,
};
pub use error::{Error, Result};
pub use loss::{DdKind, LossConfig, Variant};
pub use metrics::MetricsReport;
pub use model::{Forecaster, ForecasterConfig};
pub use raa::AttentionState;
pub use scalar::Scalar;

pub type RegionGraph64 = RegionGraph<f64>;
pub type DemandTensor64 = DemandTensor<f64>;
pub type DemographicTable64 = DemographicTable<f64>;
pub type ResidualVector64 = ResidualVector<f64>;
pub type AttentionState64 = AttentionState<f64>;
pub type MetricsReport64 = MetricsReport<f64>;
pub type Forecaster64 = Forecaster<f64>;
