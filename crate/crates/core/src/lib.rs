//! Continual multilingual ASR on a small encoder-decoder transformer:
//! synthetic languages, split embedding tables, replay-based adaptation and
//! task-wise beam search.

pub mod cltrain;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod langgen;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod surgery;
pub mod vocab;

pub use error::{Error, Result};
