//! Hybridizable discontinuous Galerkin (HDG) discretization of Biot's
//! consolidation model in two and three dimensions, with static condensation
//! onto the mesh skeleton and parameter-robust block-diagonal preconditioners
//! for the condensed system.
//!
//! The discretization solves the four-field form of the time-discrete Biot
//! equations in (displacement u, total pressure pT, Darcy flux z, fluid
//! pressure p), each cell field paired with a facet trace unknown where the
//! method needs one (ū, p̄T, p̄). Cell unknowns couple only within their own
//! cell, so they are eliminated per cell; the global solve runs on the facet
//! Schur complement `S_A` with preconditioned MINRES. Two preconditioners are
//! provided: `S_P`, built from parameter-weighted norms on the trace spaces,
//! and `S_P̂`, which swaps in the full HDG elasticity and reaction-diffusion
//! operators for the u- and p-blocks. Both are reduced to the skeleton by the
//! same cell-wise elimination as the operator.
//!
//! Pipeline: [`mesh`] → [`spaces`] → [`assembly`] → [`condense`] → [`krylov`],
//! with [`problems`] providing ready-made experiment drivers (manufactured
//! solutions, parameter sweeps, a footing benchmark with backward-Euler time
//! stepping).

pub mod assembly;
pub mod condense;
pub mod fe_basis;
pub mod jet;
pub mod krylov;
pub mod mesh;
pub mod problems;
pub mod sparse;
pub mod spaces;

pub use assembly::{BlockSystem, ModelParams, PcVariant, PreconditionerBlocks};
pub use condense::{CondensedSystem, ReducedPreconditioner};
pub use krylov::SolveReport;
pub use mesh::Mesh;
pub use sparse::CsrMatrix;
pub use spaces::{Field, Spaces, Variant};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("gmsh parse error: {0}")]
    GmshParse(String),
    #[error("unsupported element type {0}")]
    UnsupportedElement(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("quadrature exactness degree {requested} exceeds implemented maximum {max}")]
    QuadratureDegree { requested: usize, max: usize },
    #[error("field {0:?} does not admit Dirichlet constraints")]
    NotConstrainable(spaces::Field),
    #[error("singular local block on cell {cell}: {detail}")]
    SingularLocalBlock { cell: usize, detail: String },
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("preconditioner is not positive definite (z'v = {0:.3e} < 0)")]
    IndefinitePreconditioner(f64),
    #[error("solver did not converge: {0} iterations, relative residual {1:.3e}")]
    NoConvergence(usize, f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
