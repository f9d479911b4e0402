//! Building blocks for collaborative training without sharing raw data.
//!
//! - [`model`]: softmax regression / one-hidden-layer MLP with manual backprop.
//! - [`data`]: CSV and IDX loaders plus client partitioning.
//! - [`privacy`]: update clipping, Gaussian noise, fixed-point secret sharing.
//! - [`aggregation`]: weighted FedAvg and secure-sum aggregation.
//! - [`wire`]: message schema and length-prefixed JSON framing.
//! - [`task`]: collaborative task definitions.
//!
//! Inner loops run on rayon when the `parallel` feature is enabled (the
//! default); results are bit-identical with it off.

pub mod aggregation;
pub mod data;
pub mod model;
pub mod par;
pub mod params;
pub mod privacy;
pub mod rng;
pub mod task;
pub mod wire;

#[cfg(feature = "tokio")]
pub mod wire_async;

pub use aggregation::ClientId;
pub use params::ParamVector;
