//! Discrete entropy minimization for learned multi-agent communication.
//!
//! Agents exchange real-valued messages that are quantized onto a uniform
//! grid before transmission. The discrete entropy of those quantized
//! messages has no useful gradient, so [`entropy::pseudo_gradient`] supplies
//! a surrogate that moves each message value toward the more populated of
//! its two neighbouring bins. The trainer injects that surrogate at the
//! message outputs of the agents' networks during policy-gradient training.

pub mod agent;
pub mod autodiff;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod env;
pub mod error;
pub mod harness;
pub mod quantization;
pub mod trainer;

pub use error::{Error, Result};
pub use quantization::Quantizer;
