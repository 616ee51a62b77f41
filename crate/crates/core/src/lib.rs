//! Volumes, rigid registration, synthetic longitudinal cohorts and training
//! pair sampling.

pub mod augment;
pub mod batch;
pub mod error;
pub mod io;
pub mod registration;
pub mod rigid;
pub mod sampler;
pub mod ssim;
pub mod store;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use rigid::RigidTransform;
pub use volume::Volume3D;
