//! Online test-time adaptation of a 3D pose regressor on streams of noisy
//! 2D keypoint estimates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod diffmodel;
pub mod engine;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod selection;
pub mod streamgen;

pub use error::{Error, Result};
