// SPDX-License-Identifier: MIT OR Apache-2.0

//! Affine concept manipulation for vector representations.
//!
//! Fits transforms `x ↦ A x + b` that erase a linear concept, switch it to
//! its opposite, or steer it onto a second concept, while disturbing the
//! rest of the representation as little as possible in the covariance
//! weighted sense. The transforms are built from first and second moments
//! only, which can be accumulated in a single streaming pass.

pub mod cli;
pub mod error;
pub mod io;
pub mod linalg;
pub mod moments;
pub mod synth;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, RankPolicy, Vector};
pub use moments::{ConceptLabels, MomentEstimate, MomentSummary, SteeringVector};
pub use transforms::{AffineTransform, FitOptions, LinearLayer, Mode};
