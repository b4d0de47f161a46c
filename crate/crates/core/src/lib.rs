//! Ensembles of character-level LSTM language models whose next-character
//! distributions are mixed by a live, user-controlled weight vector.
//!
//! The building blocks, bottom up: [`numeric`] primitives, the shared
//! ASCII-128 [`corpus`] codec, the [`lstm`] forward pass and its
//! [`checkpoint`] container, [`training`] by truncated BPTT, the
//! [`ensemble`] generation loop, and the optional [`beam`] decoder.

pub mod beam;
pub mod checkpoint;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod lstm;
pub mod numeric;
pub mod training;

pub use error::{Error, Result};
