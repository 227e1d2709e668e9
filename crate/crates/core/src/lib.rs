//! Visual place recognition with learned landmark localization.
//!
//! A small convolutional network (the LLN) turns a dense CNN feature grid
//! into a non-negative activation map. It is trained with a triplet ranking
//! loss on activation-weighted image embeddings, using hard negatives mined
//! once per epoch. At query time the most activated cells act as landmarks,
//! matched between images by mutual nearest neighbour and weighted by their
//! agreement with the dominant cell offset.
//!
//! Module map:
//! - [`tensor`]: convolution, pooling, normalization and Adam
//! - [`lln`]: the network, aggregation and its gradients
//! - [`trainer`]: manifests, mining, tuples and the training loop
//! - [`matcher`]: landmark selection and landmark-level similarity
//! - [`retrieval`]: map index, shortlist/rerank and PR evaluation
//! - [`io`]: file formats, toy extractor, configuration
//! - [`synthetic`]: planted-landmark benchmark generator

pub mod error;
pub mod io;
pub mod lln;
pub mod matcher;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
