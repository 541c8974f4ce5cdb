// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod json;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod schema;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/records.md")]
    mod records {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
