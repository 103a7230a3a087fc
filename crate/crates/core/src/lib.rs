//! Two-stage single-image reflection removal: a reflection estimator
//! followed by a transmission network steered by reflection-aware guidance
//! blocks and mask-renormalized partial convolutions.

pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod selfcheck;
pub mod synthesis;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
