//! Minimal CPU neural-network stack: im2col-based convolutions with
//! hand-written backward passes, seeded initialization, and Adam.
//!
//! Nothing here is model-specific; the teacher/student architectures live in
//! [`crate::model`].

pub mod adam;
pub mod init;
pub mod layers;
pub mod ops;

pub use adam::{Adam, GradStore};
pub use layers::{Conv2d, ConvTranspose2d};
