//! Document-level event role-filler extraction as sequence tagging.
//!
//! Documents and their gold role fillers become BIO-tagged windows
//! ([`bio`]), which train BiLSTM-CRF readers ([`reader`], [`train`]) over
//! frozen word and contextual embeddings ([`embeddings`]). Extractions are
//! scored by head-noun and exact match ([`eval`]).

pub mod bio;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod nn;
pub mod reader;
pub mod train;

pub use error::{Error, Result};
