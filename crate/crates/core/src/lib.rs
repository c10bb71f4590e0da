//! Multimodal motion prediction with motion query pairs.
//!
//! The pipeline: synthetic or loaded [`scene`]s are normalized to the target
//! agent and vectorized into polylines; the [`encoder`] turns polylines into
//! context tokens; the [`decoder`] drives a stack of transformer layers with
//! one static intention query and one dynamic searching query per mode,
//! emitting per-layer Gaussian mixture trajectories; the [`objective`] trains
//! them; [`selection`] picks the final six trajectories and ensembles models;
//! [`metrics`] scores them.

pub mod batch;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod intention;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod registry;
pub mod runner;
pub mod scene;
pub mod selection;

pub use error::{Error, Result};
