//! Expression engine, augmentation, harvesting game and the recursive
//! fine-tuning loop. The guide in `book/` walks through each part.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod game;
pub mod image;
pub mod label;
pub mod nn;
pub mod orchestrator;
pub mod simplayer;
pub mod verify;

pub use error::{Error, Result};
pub use image::Image;
pub use label::{ExpressionLabel, NUM_CLASSES};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/game.md")]
    mod game {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
