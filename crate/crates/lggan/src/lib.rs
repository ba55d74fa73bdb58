//! Local-and-global adversarial image synthesis from semantic layouts.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`] — a small reverse-mode autodiff engine over `ndarray`
//! - [`nn`] — layers, weight init, and the Adam optimizer
//! - [`data`] — semantic maps, mask derivation, and datasets
//! - [`model`] — the generator branches, classifier, fusion, discriminators
//! - [`config`] / [`trainer`] / [`checkpoint`] — training runs
//! - [`metrics`] — image-quality scores and evaluation reports
//! - [`cli`] — the `lggan` binary's subcommands and artifact dumps
//!
//! Everything runs on the CPU in a single thread; given equal seeds and
//! configs, training is bit-for-bit reproducible.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
