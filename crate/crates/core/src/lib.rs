//! Self-supervised hierarchical latent dynamics over video frame pairs.
//!
//! A vision transformer encodes two frames; midway networks infer motion
//! latents from the pair, backward networks refine lower-level features with
//! higher-level context, and gated forward predictors map the source
//! features plus motion to the target features. A DINO-style invariance
//! objective trains the class token alongside the dense forward loss.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod raster;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Mat;
