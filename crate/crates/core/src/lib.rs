//! NorMuon: orthogonalized momentum with per-neuron second-moment
//! normalization, plus the baselines and ablations it is measured against.
//!
//! The pieces, bottom up:
//!
//! - [`matrix`], [`svd`], [`orthogonalize`]: dense f64 matrices, a one-sided
//!   Jacobi SVD and the quintic Newton-Schulz iteration.
//! - [`optim`]: AdamW, Muon, NorMuon and the ablation variants as stateful
//!   per-parameter update rules, with memory accounting.
//! - [`trainer`]: MLPs on seeded synthetic tasks, schedules and run records.
//! - [`diagnostics`]: spectra, condition numbers and per-neuron norm spread.
//! - [`distsim`]: row-sharded optimizer steps across simulated ranks with a
//!   byte-level communication ledger.
//! - [`experiment`], [`cli`]: config files, run directories and the
//!   `normuon` command.

pub mod error;
pub mod matrix;
pub mod orthogonalize;
pub mod rng;
pub mod svd;
pub mod diagnostics;
pub mod optim;
pub mod trainer;
pub mod distsim;
pub mod experiment;
pub mod cli;

pub use error::{Error, Result};
