//! Named entity recognition for cyber threat intelligence text with
//! internal (domain nearest-neighbour) and external (contextual language
//! model) semantic augmentation fused by gates.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod external;
pub mod features;
pub mod fusion;
pub mod internal;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pos_tagger;
pub mod training;
pub mod word2vec;

pub use error::{Error, Result};
