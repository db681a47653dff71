//! Advection-diffusion-reaction graph neural networks.
//!
//! Node features evolve by an operator-split step per layer: a learned,
//! mass-conserving advection along directed edge velocities, an implicit
//! diffusion solve with per-channel coefficients, and a pointwise reaction
//! MLP. Everything is differentiated by the small reverse-mode [`tape`].

pub mod adr;
pub mod cg;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod splitting;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{erdos_renyi, EnergyReport, Graph};
pub use tape::{Tape, Var};
pub use tensor::Matrix;
