//! One transformer, three roles: image encoder, text encoder, and
//! image-text fusion network, sharing a single parameter set.
//!
//! Pre-training combines an image-text contrastive loss, image-text
//! matching with optimal-transport patch alignment, and masked language
//! modeling under bidirectional and seq2seq attention, with one loss
//! sampled per iteration and an EMA momentum teacher providing soft
//! targets. Downstream adapters cover retrieval, VQA-style
//! classification, captioning, NLVR2 and SNLI-VE style heads.

pub mod backbone;
pub mod checkpoint;
pub mod diagnostics;
pub mod corpus;
pub mod downstream;
pub mod losses;
pub mod ot;
pub mod params;
pub mod teacher;
pub mod trainer;
pub mod tensor;
pub mod tokenize;

pub use tensor::{grad_check, GradCheckReport, Tensor, TensorError, TensorResult};
