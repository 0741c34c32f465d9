//! Desk-scale global and regional grid forecasting.
//!
//! * [`fields`]: grid geometry, normalization, grid files and a synthetic atmosphere.
//! * [`saa`]: distance-decay prior and prior-modulated linear cross-attention.
//! * [`tmoe`]: month-conditioned Top-K expert routing.
//! * [`model`]: encoder / processor / decoder forecaster, training and rollout.
//! * [`metrics`]: latitude-weighted RMSE/ACC and great-circle track errors.
//! * [`cyclone`]: minimum-pressure cyclone tracking.
//! * [`ensemble`]: Perlin perturbations and ensemble-mean forecasts.

pub mod autograd;
pub mod cyclone;
pub mod ensemble;
pub mod error;
pub mod fields;
pub mod metrics;
pub mod model;
pub mod saa;
pub mod tmoe;

pub use error::{Error, Result};
