//! Multilevel hierarchical network for video question answering.
//!
//! Videos are read at several temporal scales, each scale interacts with the
//! question in its own level, and a shared encoder plus a question-weighted
//! fusion turn the levels into one answer feature. The `harness` module trains,
//! evaluates and ablates models; `data` holds the file formats and a synthetic
//! generator. The guide in `book/` walks through all of it.

pub mod data;
pub mod decoders;
pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod pvr;
pub mod rmi;
pub mod sampling;
pub mod tensor;
pub mod text;

pub use error::{MhnError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
}
