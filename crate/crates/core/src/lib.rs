//! Meshfree RBF collocation and the unraveled multilevel transformation
//! network (UMTN) for forecasting spatiotemporal dynamics observed at sparse,
//! irregular sites.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernels`], [`interpolation`], [`collocation`]: RBF numerics and a
//!   discrete-time collocation solver for linear PDEs.
//! - [`datagen`]: the synthetic convection–diffusion benchmark.
//! - [`autodiff`]: a small reverse-mode tape with Adam.
//! - [`model`], [`training`], [`evaluation`]: the network, its training loop
//!   and the MAE protocol.
//! - [`io`]: on-disk datasets, checkpoints and CSV ingestion.

pub mod autodiff;
pub mod collocation;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod interpolation;
pub mod io;
pub mod kernels;
pub mod model;
pub mod training;

pub use error::{Error, ErrorClass, Result};
