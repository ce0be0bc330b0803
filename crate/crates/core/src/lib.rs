//! One-layer transformers on the in-context recall task.
//!
//! A sentence ends with a trigger token `q`; somewhere earlier the bigram
//! `(q, y)` appears, and the model must predict `y`. With probability `α`
//! the label is instead a generic noise token `τ`. The crate provides the
//! sampler ([`data`]), fixed orthogonal embeddings ([`embedding`]), the model
//! with its unconstrained and associative-memory parameterizations
//! ([`model`]), losses ([`losses`]), normalized gradient descent
//! ([`training`]), executable convergence and generalization checks
//! ([`checks`]) and file formats ([`io`]).

pub mod checks;
pub mod data;
pub mod embedding;
mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data-model.md")]
    struct DataModel;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/checks.md")]
    struct Checks;
}
