//! Desk-scale set-prediction transformer for human–object interaction
//! style triplets, trained with decoding-path augmentation and
//! cross-path consistency regularization.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tape`]), a toy encoder–decoder model executed along multiple
//! decoding paths over one shared decoder ([`model`]), Hungarian and
//! cross matching ([`matching`]), supervision and consistency losses
//! ([`losses`]), a synthetic scene generator ([`data`]), and a training
//! engine with AdamW, mAP evaluation, checkpointing and an ablation
//! grid ([`train`], [`eval`], [`checkpoint`], [`ablate`]).

pub mod ablate;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};
