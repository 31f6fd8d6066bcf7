//! Stacked ensembles of machine-learned force fields.
//!
//! Stage 1 trains a diverse suite of surrogate force fields on an
//! analytic reference potential. Stage 2 fuses their predictions with a
//! meta-model: either a graph-attention network that predicts forces
//! directly, or a learned scalar potential whose forces follow from the
//! chain rule through the base energies, base forces and coordinates.

pub mod autodiff;
pub mod basemodels;
pub mod cli;
pub mod error;
pub mod extxyz;
pub mod graph;
pub mod mdsim;
pub mod meta_conserv;
pub mod meta_direct;
pub mod metrics;
pub mod nn;
pub mod refpes;
pub mod split;
pub mod structure;
pub mod units;

pub use error::{Error, Result};
pub use structure::{BasePrediction, Dataset, ForceOutput, ForceProvider, LabeledStructure, Structure};
