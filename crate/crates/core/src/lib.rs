//! Joint CTC-attention speech recognizer with pluggable fusion of cached
//! self-supervised speech representations into a conformer encoder.
//!
//! The crate is organized around a file-based feature cache: heavyweight
//! representation extractors run elsewhere and leave their output in a small
//! binary format, and everything here (fusion, encoder, decoders, training,
//! scoring) consumes those files.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod params;
pub mod ssl;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod wer;

pub use error::{Error, Result};
