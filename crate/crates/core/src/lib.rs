//! Learned spatial partitioning for distance-join workloads.
//!
//! A `g x g` grid is laid over a point set and split into `m` rectangles by
//! guillotine cuts. [`baselines`] builds classical partitions, [`cost`]
//! prices a partition under a join workload, and [`trainer`] runs a deep
//! Q-learner seeded with a baseline demonstration.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cost;
pub mod data;
pub mod env;
pub mod io;
pub mod neural;
pub mod partition;
pub mod replay;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/partitions.md")]
    mod partitions {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
