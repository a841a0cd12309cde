//! Table-text encoder pretraining at desk scale.
//!
//! One transformer encoder reads three input forms of a `<table, text>` pair:
//! text alone, the flattened table alone, and the two joined. Pretraining
//! combines masked-token prediction on all three forms with a contrastive
//! term that pulls the pooled representations of the same pair together.
//! Downstream harnesses cover dense table retrieval (with a BM25 baseline and
//! hard-negative mining) and a cell-selection QA head.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line live
//! in the companion `utp` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod qa;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod table;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use encoder::{Encoder, Modality, ModelConfig, SerializedInput};
pub use error::{Error, Result};
pub use table::{Corpus, Table, TableTextPair};
pub use tensor::{Graph, Tensor, Var};
pub use tokenize::Vocab;
