//! Domain adaptation for StyleGAN2-style generators in restricted parameter
//! spaces.
//!
//! The crate covers the generator decomposition ([`arch`]), the trainable
//! parameterizations ([`paramspace`]), CLIP-style and adversarial objectives
//! ([`losses`]), StyleSpace directions and their algebra ([`directions`]),
//! the optimization loops ([`trainer`]), image translation and morphing
//! ([`apps`]), evaluation ([`metrics`]) and an HTTP service ([`service`]).
//! Everything runs on a small deterministic CPU reference implementation.

pub mod apps;
pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod directions;
pub mod error;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod paramspace;
pub mod recipe;
pub mod service;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Image, Tensor};
