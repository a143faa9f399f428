//! Gradient balancing for bimodal (image + text feature) linear-probe
//! classifiers: loss-proportional mutual-KL reweighting, conflict-gated
//! projection of the target gradient, a seeded synthetic data generator, a
//! training / evaluation harness, and numeric first-order loss-change checks.

pub mod balgrad;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod propositions;

pub use error::{Error, Result};
