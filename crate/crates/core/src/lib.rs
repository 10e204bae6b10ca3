//! Finite-dimensional reduction toolkit for clusters of boundary bubbles on
//! half-spheres: universal constants, the Kirchhoff-Routh function and its
//! critical points, bubble ensembles, and Monte Carlo checks of the gradient
//! expansions.

pub mod bubbles;
pub mod constants;
pub mod critical_points;
pub mod error;
pub mod expansion;
pub mod fit;
pub mod hamiltonian;
pub mod io;
pub mod mc;
pub mod quadrature;
pub mod reduction;

pub use bubbles::{Bubble, BubbleEnsemble, MEpsReport, Violation};
pub use constants::{closed_form_constants, compute_constants, UniversalConstants};
pub use critical_points::{CriticalPointReport, Method, SolverOptions};
pub use error::{Error, Result};
pub use expansion::{ChartConvention, IntegratorSpec, PairingKind, PairingReport};
pub use hamiltonian::{Configuration, CurvatureModel};
pub use reduction::{Perturbation, ReducedVariables};

/// Smallest pairwise separation tolerated before the pair term is treated as
/// singular.
pub const SEPARATION_GUARD: f64 = 1e-12;
