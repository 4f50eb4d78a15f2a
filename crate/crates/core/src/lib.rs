//! Continual learning with compressed low-rank adapters.
//!
//! A small frozen transformer hosts per-task LoRA adapters. Each trained
//! adapter is flattened, compressed into a short latent code by a
//! contractive autoencoder, and reconstructed on demand. At inference the
//! adapter with the lowest perplexity on the input is selected, so no task
//! label is needed.

pub mod error;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
pub mod backbone;
pub mod codec;
pub mod lora;
pub mod harness;
pub mod cae;
pub mod selection;
pub mod store;
