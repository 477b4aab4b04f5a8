//! Dual-branch RGB-D encoder-decoder built on a minimal deterministic
//! tensor engine with reverse-mode autodiff.
//!
//! The crate is organized around the training pipeline:
//! tensors/tape ([`tensor`], [`tape`]) -> model ([`encoder`], [`pretrain`],
//! [`segmentation`]) -> data ([`data`]) -> verification ([`gradcheck`]).

pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rdt;
pub mod rng;
pub mod segmentation;
pub mod tape;
pub mod tensor;
pub mod threads;
pub mod verify;

pub use error::{Error, Result};
pub use nn::{Forward, Mode};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{GradStore, Tape, Var};
pub use tensor::{Float, Tensor};
