//! Neural and grid-based estimates of regions of attraction.
//!
//! A stable equilibrium's region of attraction is recovered as the zero
//! sublevel set of the long-time solution of the Hamilton-Jacobi equation
//! `phi_t = min(0, grad(phi) . f(x))`, started from a bump-shaped initial
//! condition. The crate solves that equation two ways (a physics-informed
//! network and a WENO5 grid solver) and checks both against direct
//! trajectory simulation.

pub mod checkpoint;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod network;
pub mod numeric;
pub mod pde;
pub mod quadrature;
pub mod roa;
pub mod training;

pub use error::{Error, Result};

// Book chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/level_set.md")]
    mod level_set {}
    #[doc = include_str!("../../../book/src/grid_oracle.md")]
    mod grid_oracle {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/estimates.md")]
    mod estimates {}
    #[doc = include_str!("../../../book/src/limitations.md")]
    mod limitations {}
}
