//! Discretization of both modalities: byte-level BPE for text and a k-means
//! patch codebook for images.

mod bpe;
mod codebook;

pub use bpe::{train_bpe, TextTokenizer};
pub use codebook::{extract_patches, fit_codebook, patch_vector, VisualCodebook, MAX_ITERS, REL_TOLERANCE};
