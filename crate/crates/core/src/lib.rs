//! Numerical laboratory for steady-state conduction through a host medium
//! containing randomly dispersed, perfectly conducting spherical inclusions.
//!
//! The crate is organized around the pipeline used by the studies:
//!
//! * [`domain`] — computational domains, admissible random configurations
//!   (hard-core + boundary clearance), volume fractions, cluster diagnostics.
//! * [`field`] — structured-grid scalar fields with masks, gradients, norms
//!   and spherical surface quadrature.
//! * [`solver`] — conservative finite-difference solver for the
//!   variable-coefficient problems, with inclusions realized as merged
//!   equipotential unknowns.
//! * [`kernels`] — closed-form building blocks: the conducting-sphere dipole
//!   field and its inhomogeneity constant, the Dirichlet Green's function of
//!   the ball, and a method-of-reflections fast solver.
//! * [`corrections`] — the single- and two-inclusion correction hierarchy,
//!   superposition approximations, and the N-particle capacity.
//! * [`ensemble`] — Monte Carlo ensemble averaging, effective-medium error
//!   norms, and scaling studies.

pub mod corrections;
pub mod domain;
pub mod ensemble;
pub mod error;
pub mod expr;
pub mod field;
pub mod fit;
pub mod geom;
pub mod kernels;
pub mod quad;
pub mod reduce;
pub mod rng;
pub mod solver;

pub use domain::{
    cluster_decomposition, global_volume_fraction, local_volume_fraction, sample_configuration,
    ClusterDecomposition, DensityModel, DiluteRegime, DomainSpec, InclusionConfiguration, Shape,
};
pub use error::CmError;
pub use field::{combine, gradient, norms, surface_flux, DomainMask, Grid, GridField, NormReport};
#[rustfmt::skip]
pub use solver::{
    apply_inverse_l, dirichlet_energy, solve_background, solve_effective, solve_with_inclusions,
    LinearSystemStats, SolveOutput, SolverOpts,
};
