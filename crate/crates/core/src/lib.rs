//! Disentangled generative information bottleneck at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`], [`optim`], [`rng`]: dense `f64`
//!   tensors with reverse-mode differentiation and Adam.
//! - [`gauss`]: diagonal Gaussians with reparameterized sampling and
//!   closed-form divergences.
//! - [`mi`]: variational lower bounds, the vCLUB and KL-marginal upper
//!   bounds, and exact discrete mutual information.
//! - [`model`], [`objective`], [`train`]: the five networks and the
//!   objectives they are trained under.
//! - [`data`], [`fsl`]: synthetic fixtures, episodes and few-shot evaluation.
//! - [`checkpoint`], [`config`], [`selfcheck`]: persistence and run plumbing.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fsl;
pub mod gauss;
pub mod gradcheck;
pub mod mi;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Primitive, Tape, Var};
pub use tensor::Tensor;
