//! Multi-level travel time estimation: an external-attention link encoder with
//! a graph mixture of experts, a wide-deep-sequence route model, drift-gated
//! incremental learning and a cached serving simulator, all driven by a
//! synthetic traffic generator.

pub mod asil;
pub mod diffmath;
pub mod esgmoe;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod mxtt;
pub mod network;
pub mod params;
pub mod routemodel;
pub mod serving;
pub mod stea;
pub mod trafficgen;
pub mod trainer;

pub use error::{Error, Result};
