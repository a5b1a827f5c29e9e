//! Mollified Feynman-Kac partition functions for the stochastic heat
//! equation in `d >= 3`.
//!
//! ```
//! use polymerlab::polymer::{partition_estimate, Method, PolymerParams};
//! use polymerlab::rng::SeedStream;
//!
//! let p = PolymerParams::new(0.5, 1.0);
//! let z = partition_estimate(&p, 4, Method::ReplicaGaussian, SeedStream::root(3))?;
//! assert!(z.value.is_finite());
//! # Ok::<(), polymerlab::Error>(())
//! ```

pub mod error;
pub mod mollifier;
pub mod quad;
pub mod rng;
pub mod special;
pub mod stats;
pub mod field;
pub mod paths;
pub mod polymer;
pub mod analysis;
pub mod gmc;
pub mod experiment;

pub use error::{Error, Result};
pub use mollifier::{CovarianceKernel, Mollifier, MollifierKind};
pub use polymer::{Method, PolymerParams};
pub use rng::SeedStream;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/partition.md")]
    mod partition {}
    #[doc = include_str!("../../../book/src/moments.md")]
    mod moments {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
