//! Boundary control simulator for a two-class traffic flow model.
//!
//! The crate builds the full pipeline from physical parameters to controlled
//! simulation: fundamental diagrams and equilibria (`model`), linearization
//! into Riemann coordinates (`model`), backstepping kernel solvers
//! (`kernels`), an upwind simulator for the coupled transport system (`sim`),
//! the event-triggered control law with its Lyapunov trigger (`etc`), a
//! boundary observer for output feedback (`observer`), traffic performance
//! indices (`metrics`), and a configuration-driven scenario harness
//! (`harness`, `config`, `output`).

pub mod config;
pub mod error;
pub mod etc;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod observer;
pub mod output;
pub mod sim;

pub use error::{Error, Result};
