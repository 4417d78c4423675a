// Every chapter is included as module docs so `cargo test` runs its listings.
// mdbook cannot do this for a library that lives outside the book.

#[doc = include_str!("../README.md")]
pub mod readme {}
#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/involutions.md")]
pub mod involutions {}
#[doc = include_str!("src/partition.md")]
pub mod partition {}
#[doc = include_str!("src/architectures.md")]
pub mod architectures {}
#[doc = include_str!("src/activation_audit.md")]
pub mod activation_audit {}
#[doc = include_str!("src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("src/hamiltonian.md")]
pub mod hamiltonian {}
#[doc = include_str!("src/cnn.md")]
pub mod cnn {}
#[doc = include_str!("src/experiments.md")]
pub mod experiments {}
