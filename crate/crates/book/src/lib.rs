//! Compiles every chapter under `book/src` as doc-tests, so the guide's
//! snippets break the build when the API drifts.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tempered-posterior.md")]
pub mod tempered_posterior {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/forward-models.md")]
pub mod forward_models {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/bayes-opt.md")]
pub mod bayes_opt {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
