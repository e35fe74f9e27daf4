//! Algorithmic core of the rate-distortion-classification / rate-distortion-perception
//! compression lab.
//!
//! Everything in this crate is allocation-only (`no_std` + `alloc`): the shared domain
//! types, the subtractive dithered quantizer with its soft-gradient surrogate, the scalar
//! loss terms used by the neural trainer, and an exact brute-force oracle for the
//! information-theoretic rate functions on tiny discrete sources.
//!
//! File formats, the network engine, training and the command-line interface live in the
//! `rdpc-lab` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod datamodel;
mod error;
pub mod matrix;
pub mod objectives;
pub mod oracle;
pub mod quantizer;
pub mod stats;

pub use datamodel::{
    rate_of, ConstraintPoint, ConstraintRegion, CriticInit, CurvePoint, DiscreteSource, Mode,
    Objective, OptimizerSettings, QuantizerSpec, RunConfig, TradeoffParams, Violation,
};
pub use error::Error;
pub use matrix::Matrix;

pub type Result<T, E = Error> = core::result::Result<T, E>;
