//! Dense-and-implicit channel attention for residual networks, desk scale.
//!
//! The crate bundles a small f64 tensor engine with reverse-mode autodiff,
//! the DIA-LSTM attention cell (a modified LSTM shared across the residual
//! blocks of a network stage) together with squeeze-excite and standard-LSTM
//! baselines, a configurable residual backbone with ablation switches, a
//! deterministic training harness for CIFAR-format and synthetic data, and
//! a random-forest feature-integration analysis over captured attention
//! vectors.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod forest;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ExplosionEvent, ExplosionSite, Result};
pub use tensor::Tensor;
