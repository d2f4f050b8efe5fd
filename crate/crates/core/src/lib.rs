//! Simulation and exact analysis of the contact process in a random
//! environment on the half space `Z^d x Z_+`.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`]: points, edges, regions and balls.
//! * [`environment`]: the rate law `mu` and lazily evaluated edge rates.
//! * [`graphical`]: Poisson event streams, time reversal and thinning.
//! * [`dynamics`]: evolution of configurations along a stream or online.
//! * [`oracle`]: exact transient law on graphs of at most 12 vertices.
//! * [`estimators`]: survival, strong survival, critical values and the
//!   complete-convergence diagnostics.
//! * [`renorm`]: block conditions and the renormalised macro-grid.
//! * [`experiment`]: JSON run configurations and run records.

pub mod dynamics;
pub mod environment;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod graphical;
pub mod lattice;
pub mod oracle;
pub mod renorm;
pub mod rng;
pub mod stats;

pub use dynamics::{evolve, evolve_online, seed_hit, Configuration, TrajectoryStats};
pub use environment::{DistributionSpec, Environment, ModelParams};
pub use error::{Error, Result};
pub use estimators::{Estimate, Regime, SurvivalQuery};
pub use graphical::{generate_stream, reverse_stream, thin_stream, EventStream};
pub use lattice::{Edge, LatticePoint, Region};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lattice.md")]
    mod lattice {}
    #[doc = include_str!("../../../book/src/graphical.md")]
    mod graphical {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/renorm.md")]
    mod renorm {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
