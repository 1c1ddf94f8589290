//! Convolutional image pyramid and transformer text encoder.

mod image;
mod text;

pub use image::{ImageConfig, ImageEncoder};
pub use text::{build_vocab, tokenize, TextConfig, TextEncoder, TokenizedPrompt, Vocab, CLS, PAD, UNK};
