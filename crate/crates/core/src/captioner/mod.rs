//! Desk-scale victim captioner.

mod config;
mod io;
mod model;
mod vocab;

pub use config::{ModelConfig, MLP_RATIO};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use model::{argmax, AttentionTrace, CaptionModel, Encoded, Memory, Provenance, Session};
pub use vocab::{words, Vocabulary, BOS, EOS, PAD, UNK};
