//! All-electron Kohn-Sham density functional theory on tetrahedral linear
//! finite elements.
//!
//! The crate is organised bottom-up:
//!
//! - [`mesh`], [`locate`] and [`medit`]: box meshes, octree point location,
//!   transfer of P1 fields between nonnested meshes, Medit file I/O.
//! - [`sparse`] and [`fem`]: CSR matrices, preconditioned conjugate
//!   gradients and P1 assembly with Dirichlet elimination.
//! - [`potentials`]: external, Hartree (with multipole boundary data) and
//!   LDA exchange-correlation potentials plus energy bookkeeping.
//! - [`eigensolve`]: block preconditioned eigensolver and dense fallback.
//! - [`scf`]: direct self-consistent field iteration with Anderson mixing.
//! - [`augmented`]: the augmented subspace solver that trades the fine-mesh
//!   nonlinear eigenproblem for shifted linear solves and a small
//!   eigenproblem on `S_H + span{Ψ̂}`.
//! - [`adapt`]: Hessian recovery, metric construction, r-adaptive mesh
//!   movement and the multilevel driver.

pub mod adapt;
pub mod augmented;
pub mod eigensolve;
mod error;
pub mod fem;
pub mod locate;
pub mod medit;
pub mod mesh;
pub mod potentials;
pub mod scf;
pub mod sparse;

pub use error::{Error, Result};

/// Points and vectors in bohr.
pub type Point = [f64; 3];

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
