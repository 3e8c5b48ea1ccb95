//! Style-keyed prompt bank retrieval.
//!
//! Queries of different styles (sketches, art renderings, low-resolution
//! images, captions) are summarized by a frozen prototype encoder. The
//! prototype selects prompt tokens from a learnable key/value bank; the
//! tokens are injected into every layer of a frozen transformer encoder and
//! the resulting embeddings are ranked against a precomputed index.

pub mod binfile;
pub mod encoder;
pub mod error;
pub mod mat;
pub mod pipeline;
pub mod promptbank;
pub mod prototype;
pub mod retrieval;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
