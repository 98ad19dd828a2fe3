//! Masked language and image modeling (MLIM) at desk scale.
//!
//! A shallow patch-local CNN turns images into an 8×8 grid of embeddings,
//! which are concatenated with caption word embeddings and fed through a
//! transformer encoder. Pre-training combines masked language modeling with
//! full-image reconstruction under modality-aware masking; fine-tuning on a
//! pair-matching task uses modality dropout.
//!
//! The crate is `no_std` (with `alloc`). The default `std` feature only adds
//! rayon-backed parallelism over micro-batch items; results are bitwise
//! identical with or without it.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

mod par;

pub use error::{Error, Result};
pub use model::Mlim;
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Matrix;
