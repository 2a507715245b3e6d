pub mod ablation;
pub mod checkpoint;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod sampler;
pub mod seeds;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{CopeError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
