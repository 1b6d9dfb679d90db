//! Variational state-space sequence model, desk scale.
//!
//! A sequence VAE whose decoder, posterior encoder and partial-posterior
//! encoder are stacked diagonal state-space models. Latents are discrete
//! (Z categorical components of N categories per timestep) under a uniform
//! prior; the output head is a fixed-variance Gaussian. Because latents are
//! independent across time given the conditioning sequence, sampling all T
//! positions takes two stacked forward passes instead of T sequential
//! steps, and carried layer states let generation pause and resume.
//!
//! This crate is `no_std` (with `alloc`): it holds the tensors, the reverse
//! mode tape, the scan kernels, the model math, the samplers, likelihood
//! estimators, the optimizer, and the binary codecs for checkpoints and
//! generation sessions. File, terminal and thread handling live in the
//! companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod real;
pub mod rng;
pub mod sampling;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;
mod wire;

pub use error::Error;
pub use real::Real;
pub use tensor::Tensor;
