//! Desk-scale laboratory for multi-label guided soft contrastive pretraining.
//!
//! The crate is organized bottom-up:
//!
//! * [`numcore`]: tensors, reverse-mode autodiff, gradient checking
//! * [`losses`]: InfoNCE, SupCon, SoftCon and their weighted combination
//! * [`labelsim`]: multi-hot scene labels and label-similarity targets
//! * [`encoder`]: micro ViT / MLP encoder, projector heads, masking, EMA
//! * [`trainkit`]: Siamese momentum-encoder pretraining loop
//! * [`datasynth`]: synthetic multi-label multispectral scene generator
//! * [`evalkit`]: linear probing, average precision, ablation harness
//! * [`checkpoint`] and [`config`]: persistence and run configuration

pub mod checkpoint;
pub mod config;
pub mod datasynth;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod labelsim;
pub mod losses;
pub mod numcore;
pub mod rng;
pub mod trainkit;

pub use error::{Error, Result};
pub use numcore::Tensor;
