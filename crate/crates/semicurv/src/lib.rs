//! Semi-supervised segmentation of curvilinear structures.
//!
//! The crate trains a residual-UNet student/teacher pair on partially
//! labelled image sets. Unlabelled images contribute through a consistency
//! objective: each image is warped by two random affine transforms, both
//! predictions are warped back into the original frame, and the aligned
//! posterior maps are compared with either an MSE or an N-pair loss.
//!
//! Module map:
//! * [`geometry`] — affine transforms, mirror extrapolation, differentiable warping
//! * [`losses`] — Dice, weighted BCE, MSE consistency and N-pair objectives
//! * [`posenc`] — sinusoid/linear coordinate channels for encoder features
//! * [`nn`] — parameter storage plus the conv/norm/pool layer zoo with explicit backward passes
//! * [`model`] — the residual UNet backbone and the student/teacher pair
//! * [`data`] — synthetic curve generator, dataset ingestion, splits, IoU/F1
//! * [`trainer`] — schedules, the training step, `fit`, checkpoints, ablation grids
//! * [`config`] — flat key-value run configuration and override handling
//! * [`check`] — finite-difference oracles shared by unit and acceptance tests

pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod trainer;

pub use error::{Error, Result};
