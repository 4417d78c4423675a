//! Neural networks with exact invariance `f(Ax) = p·f(x)` under an
//! involutory `A` (`A² = I`) and parity `p = ±1`.
//!
//! [`symmetry`] partitions input space and reparameterizes points into the
//! principal involutory domain; [`arch`] builds the invariant models on top
//! of the plain networks in [`nn`]. [`physics`] and [`cnn`] apply them to
//! Hamiltonian dynamics and mirror-symmetric images, and [`harness`] runs
//! the experiments behind the `involute` binary.

pub mod arch;
pub mod cnn;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod physics;
pub mod symmetry;
