//! Hierarchical encoder-decoder transformer for 2-D medical image
//! segmentation, with a multi-scale context bridge, on a small define-by-run
//! autodiff engine.
//!
//! The crate is organized bottom-up: [`tensor`] holds the tape and its
//! backward rules, [`attention`], [`ffn`], [`blocks`], and [`bridge`] build
//! the network pieces, [`model`] assembles them, and [`train`] drives
//! optimization on the synthetic data from [`data`].

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod bridge;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ffn;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
