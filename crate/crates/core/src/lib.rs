//! Joint entity and relation extraction with a co-attention interaction
//! stack over table-filling classifiers.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO. It contains a
//! small reverse-mode autodiff engine ([`tape`]), the Adam optimizer
//! ([`optim`]), the annotation data model and gold label tables ([`data`]),
//! the model itself ([`encoder`], [`coattention`], [`classifier`],
//! [`model`]), table decoding and micro-F1 scoring ([`decode`], [`metrics`]),
//! and a deterministic training loop ([`train`]).
//!
//! File formats, checkpoints and the command line live in the `care` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod classifier;
pub mod coattention;
pub mod config;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod layers;
mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{CareConfig, EncoderProvider};
pub use data::{AnnotatedSentence, EntityMention, LabelTables, RelationTriplet, Schema, Vocab};
pub use decode::Prediction;
pub use error::{Error, Result};
pub use metrics::{MatchMode, Prf, Task};
pub use model::CareModel;
pub use optim::{Adam, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
