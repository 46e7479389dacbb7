//! Layout-conditioned video generation with an implicit coordinate network,
//! trained against frame and frame-pair discriminators.
//!
//! A clip is a `(T, 3, H, W)` tensor in `[-1, 1]`; layouts use normalized
//! box coordinates. The guide in `book/` walks through every module, and its
//! code blocks run as doc-tests of this crate.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod layout;
pub mod nn;
pub mod rng;
pub mod training;
pub mod video;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/layouts.md")]
    struct Layouts;
    #[doc = include_str!("../../../book/src/generator.md")]
    struct Generator;
    #[doc = include_str!("../../../book/src/discriminator.md")]
    struct Discriminator;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
