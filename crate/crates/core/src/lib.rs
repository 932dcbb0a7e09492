//! One-class human action anomaly detection.
//!
//! Skeletal clips are projected onto a truncated DCT basis, encoded by three
//! graph-convolutional streams (full body, upper body, lower body), fused into
//! one feature vector and mapped through an exactly invertible flow. Clips of
//! the single training class get high likelihood; anything else is scored as
//! anomalous either by its negative log-likelihood or by the distance of its
//! penultimate flow feature to its nearest training neighbours.
//!
//! The book under `book/` walks through each stage with runnable snippets.

pub mod autodiff;
pub mod dct;
pub mod encoder;
mod error;
pub mod flow;
pub mod motion;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

// The book's snippets run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/dct.md")]
    mod dct {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
