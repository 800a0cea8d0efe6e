//! Equilibrium flow matching for conditional control, at desk scale.
//!
//! A stationary velocity field over action chunks is trained so that expert
//! demonstrations are zero-velocity attractors: the regression target is a
//! restoring direction whose magnitude decays to zero at the data end of the
//! noise-data interpolation, and the interpolation coefficient is never shown
//! to the network. Inference is then plain descent against the field with a
//! norm-based early exit, and the leftover field norm at the settled chunk
//! doubles as a training-free anomaly score.
//!
//! The crate also carries the time-conditioned rectified-flow baseline, a
//! quadrature oracle for the ideal field, a synthetic point-mass control task
//! with in/out-of-distribution condition splits, and the detection metrics
//! (AUROC, operating point, time saved).

pub mod ckpt;
pub mod error;
pub mod field;
pub mod infer;
pub mod net;
pub mod ood;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod rf;
pub mod rng;
pub mod schedule;
pub mod task;
pub mod train;

pub use error::{Error, Result};
