//! Desk-scale multi-behavior sequential recommender.
//!
//! Two stages: (1) denoising pre-training of a frequency-domain backbone that
//! filters per-behavior views of an interaction sequence with learnable
//! chunked complex MLPs, and (2) customized prompt tuning, where the backbone
//! is frozen and small per-user prompt generators plus a prompt factor bank
//! adapt the model to a target behavior.
//!
//! Module map:
//! - `tensor`, `autodiff`, `numerics`: dense f64 math, reverse-mode AD, FFT
//!   kernels and the gradient-check harness
//! - `data`: interaction logs, filtering, temporal splits, synthetic corpus
//! - `embedding`: sequence embedding and per-behavior views
//! - `ebm`: the filtering backbone (chunked complex MLP, filter layers,
//!   encoder, parameter census)
//! - `pretrain`: ranking loss, negative sampling, training loop, checkpoints
//! - `prompt`: prompt generators, factor bank, coding-rate regularizer
//! - `tune`: frozen-backbone prompt tuning, parameter budget, ablations
//! - `eval`: leave-one-out ranking metrics
//! - `config`: the TOML run configuration and fingerprinting

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod ebm;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod optim;
pub mod pretrain;
pub mod prompt;
pub mod tune;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
