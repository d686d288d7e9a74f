//! Test-adequacy analysis for DNN classifiers built on latent-space traces.
//!
//! The two headline metrics are Latent Space Class Dispersion ([`adequacy::lscd_per_class`])
//! and Distance-based Surprise Coverage ([`adequacy::dsc_coverage`]). Around them sit
//! the tools needed to evaluate those metrics end to end: a reference classifier,
//! pre-training mutation operators, coverage-guided fuzzing, an autoencoder
//! validity oracle, and the correlation and timing studies.

pub mod adequacy;
pub mod analysis;
pub mod fuzzing;
pub mod mutation;
pub mod numkit;
pub mod pipeline;
pub mod refmodel;
pub mod traces;
pub mod validity;
