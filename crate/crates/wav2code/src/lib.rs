//! Desk-scale implementation of codebook-based clean speech restoration for
//! noise-robust ASR: a contrastively pre-trained encoder backbone, a discrete
//! codebook storing a clean-speech prior, a Transformer code predictor, and an
//! interactive feature fusion network feeding a CTC head, together with the
//! synthetic corpus, staged trainer, and ablation harness that exercise them.

pub mod asr_eval;
pub mod autodiff;
pub mod backbone;
pub mod codebook;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod iffnet;
pub mod nn;
pub mod predictor;

pub use error::{Error, Result};
