//! Kernel-weighted CP tensor regression for spatially misaligned outcomes
//! and expression.
//!
//! Outcomes measured at plaques are regressed on the expression of nearby
//! cells, weighted by an Epanechnikov kernel. The `p × C × T` coefficient
//! tensor (genes, cell types, time points) is a low-rank CP model with an L1
//! penalty on the gene factors.
//!
//! * [`data`] loads and filters datasets;
//! * [`kernel`] turns neighbourhood sizes into bandwidths and weights;
//! * [`cp`] holds the coefficient model;
//! * [`solver`] fits it for one penalty;
//! * [`selection`] chooses the penalty and bandwidth;
//! * [`simulation`] and [`eval`] generate and score synthetic replicates.
//!
//! The guide in `book/` walks through each step; its code listings run as
//! doc-tests of this crate.

pub mod cp;
pub mod data;
pub mod design;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod ridge;
pub mod selection;
pub mod simulation;
pub mod solver;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

// Every listing in the guide runs as a doc-test.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/kernel.md")]
    mod kernel {}
    #[doc = include_str!("../../../book/src/cp.md")]
    mod cp {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
