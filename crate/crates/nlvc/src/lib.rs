//! A desk-scale laboratory for a conditional inter-frame video codec.
//!
//! The pipeline codes each frame against temporal priors mined from two
//! propagated reference features: motion-compensated local contexts and
//! attention-based non-local contexts, fused into a conditional transform
//! with a Gaussian entropy model and an exact range coder. Training supports
//! cascaded losses over frame chains and a partial cascaded fine-tuning mode
//! that splits long chains into groups with detached state in between.
//!
//! Everything runs on a small f64 tape ([`tensor::Graph`]) so that every
//! gradient can be checked against central finite differences.

pub mod attention;
pub mod blocks;
pub mod codec;
pub mod config;
pub mod context;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod params;
pub mod runner;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
