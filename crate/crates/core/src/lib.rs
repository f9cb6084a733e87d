//! Label-shift-aware pseudo-label selection for 3D lesion detection.
//!
//! The numeric core (geometry, matching and evaluation, priors, anchors,
//! selection) is generic over [`Scalar`], implemented for `f32`, `f64` and
//! the exact rational [`Rational64`]. The simulation and adaptation loop run
//! in `f64`.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod anchors;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod priors;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod simulation;

pub use num_rational::Rational64;

pub use adapt::{lambda_at, run_experiment, ArmKind, ArmState, Prepared, RoundRecord};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use geometry::{iou, total_variation, BinningConfig, Box3, Spacing};
pub use scalar::Scalar;

pub type Box3f = Box3<f64>;
pub type Box3q = Box3<Rational64>;
pub type Spacingf = Spacing<f64>;
pub type Spacingq = Spacing<Rational64>;
pub type BinningConfigf = BinningConfig<f64>;
pub type Detectionf = eval::Detection<f64>;
pub type Detectionq = eval::Detection<Rational64>;
pub type EvalCasef = eval::EvalCase<f64>;
pub type EvalCaseq = eval::EvalCase<Rational64>;
pub type PriorStatef = priors::PriorState<f64>;
pub type AnchorSetf = anchors::AnchorSet<f64>;
pub type PseudoLabelSetf = selection::PseudoLabelSet<f64>;
