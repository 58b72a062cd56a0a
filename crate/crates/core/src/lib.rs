pub mod attention;
pub mod backbone;
pub mod error;
pub mod gradsuite;
pub mod memory;
pub mod numerics;
pub mod streaming;
pub mod synthtask;
pub mod tdtb;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/streaming.md")]
    mod streaming {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/receptive-field.md")]
    mod receptive_field {}
    #[doc = include_str!("../../../book/src/synthetic-task.md")]
    mod synthetic_task {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
