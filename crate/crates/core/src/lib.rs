//! Unified autoregressive modeling of text and toy images with progressive
//! visual-vocabulary learning.
//!
//! Both modalities are mapped into one token-ID space ([`vocab`]), formatted
//! into unified sequences ([`prompt`]) and modeled by a single decoder-only
//! transformer ([`model`]). During unified pretraining, visual IDs are
//! activated one at a time and every not-yet-active visual ID is replaced by
//! `[MASK]` before the loss is computed ([`train`]).

pub mod corpus;
pub mod error;
pub mod evalx;
pub mod infer;
pub mod model;
pub mod prompt;
pub mod tok;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
