pub mod bench;
pub mod cost;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod moe;
pub mod nn;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    pub mod tape {}
    #[doc = include_str!("../../../book/src/routing.md")]
    pub mod routing {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    pub mod synthetic {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub mod analysis {}
    #[doc = include_str!("../../../book/src/cost.md")]
    pub mod cost {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
