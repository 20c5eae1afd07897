//! The guide in `book/`, compiled so its listings run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/warping.md")]
pub mod warping {}

#[doc = include_str!("../../../book/src/flow-scores.md")]
pub mod flow_scores {}

#[doc = include_str!("../../../book/src/guidance.md")]
pub mod guidance {}

#[doc = include_str!("../../../book/src/trajectories.md")]
pub mod trajectories {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
