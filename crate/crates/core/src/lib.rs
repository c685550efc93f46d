//! Training toolkit for bias-robust classifiers.
//!
//! A base model is trained jointly with one or more bias-only models whose
//! predictions reshape the base loss: product of experts, debiased focal
//! loss, RUBi, and the joint multi-bias variants. The crate also ships a
//! synthetic biased benchmark, a hard-set builder, evaluation utilities and
//! a config-driven experiment runner (`debias` binary).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod hardset;
pub mod losses;
pub mod math;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};
