pub mod corpus;
pub mod diffcore;
mod error;
pub mod harness;
pub mod lus;
pub mod mdc;
pub mod mefn;
pub mod objectives;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/least_disagreement.md")]
    mod least_disagreement {}
    #[doc = include_str!("../../../book/src/diversity.md")]
    mod diversity {}
    #[doc = include_str!("../../../book/src/active_loop.md")]
    mod active_loop {}
}
