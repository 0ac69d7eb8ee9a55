//! Planning and simulation for heterogeneous restless multi-armed bandits.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod fixed_point;
pub mod horizon;
pub mod lp;
pub mod mdp;
pub mod model;
pub mod policies;
pub mod rounding;
pub mod simulator;
pub mod wmdp;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/fixed_point.md")]
    mod fixed_point {}
    #[doc = include_str!("../../../book/src/horizon.md")]
    mod horizon {}
    #[doc = include_str!("../../../book/src/rounding.md")]
    mod rounding {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/wmdp.md")]
    mod wmdp {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
