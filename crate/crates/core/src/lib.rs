//! Multimodal gene/image contrastive pretraining at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`ops`], [`graph`], [`gradcheck`]: dense `f64` tensors, a
//!   define-by-run reverse-mode tape and a finite-difference oracle.
//! * [`scan`], [`gene`]: the selective state-space gene encoder.
//! * [`image`]: the patch-attention image encoder.
//! * [`align`]: pooling, projection heads and the contrastive losses.
//! * [`decoder`]: the two-way attention fusion mask decoder and Dice loss.
//! * [`data`]: synthetic paired samples, the `MGIT` tensor container,
//!   manifests and batching.
//! * [`config`], [`checkpoint`], [`train`], [`verify`]: run configuration,
//!   persistence and the pretrain / finetune / evaluate / verify workflows.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gene;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scan;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, FormatError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bindings, ParamStore, Scope, Sgd};
pub use tensor::Tensor;
