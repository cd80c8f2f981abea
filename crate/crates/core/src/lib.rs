//! Inverse tone mapping: a U-Net generator trained against a convolutional
//! discriminator with a hybrid pixel/gradient content loss.
//!
//! The crate carries the whole pipeline: a small reverse-mode autodiff engine
//! ([`tensor`]), the networks ([`nn`]), the objectives ([`loss`]), alternating
//! RMSProp training ([`train`]), HDR/LDR codecs ([`hdrio`]), training-pair
//! synthesis ([`dataset`]) and quality metrics ([`metrics`]).

pub mod cli;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod hdrio;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
