//! Implicit cooperative positioning for connected vehicles.
//!
//! Vehicles fuse their GNSS fixes with relative observations of shared
//! passive features (pedestrians, poles, traffic lights). The distributed
//! estimator runs Gaussian message passing on the vehicle/feature factor
//! graph, and vehicles agree on the feature messages through average
//! consensus over V2V links. A centralized Kalman filter and Fisher
//! information bounds serve as references.

pub mod bounds;
pub mod centralized;
pub mod cli;
pub mod config;
pub mod consensus;
pub mod gaussian;
pub mod gmp;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod network;
pub mod scenario;
