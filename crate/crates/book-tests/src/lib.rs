//! Compiles the guide's code listings as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/embeddings.md")]
pub mod embeddings {}

#[doc = include_str!("../../../book/src/explaining.md")]
pub mod explaining {}

#[doc = include_str!("../../../book/src/parameters.md")]
pub mod parameters {}

#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
