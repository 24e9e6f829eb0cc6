//! Entity-aware news image captioning.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`tape`]), corpus preprocessing ([`corpus`]), the captioning model
//! ([`model`]), training and decoding ([`runtime`]), caption metrics
//! ([`eval`]), a synthetic corpus generator ([`synth`]) and the command
//! line front end ([`cli`]).

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod runtime;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
