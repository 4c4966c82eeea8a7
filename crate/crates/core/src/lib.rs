//! Desk-scale laboratory for self-supervised denoising of noisy multi-coil
//! MRI data (GSURE) followed by learned reconstruction with diffusion
//! posterior sampling and unrolled MoDL networks.

pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod gsure;
pub mod modl;
pub mod mri;
pub mod nnet;
pub mod par;
pub mod real;
pub mod tensor;

pub use error::{Error, Result};
pub use num_complex::{Complex, Complex32, Complex64};
pub use real::Real;
