//! Gradient methods for nonlinear statistical inverse learning under random design.
//!
//! The library is organized around the pipeline of a rate-verification experiment:
//!
//! * [`spectral`] — dense symmetric eigendecompositions, fractional operator
//!   powers, shifted SPD solves, quadrature grids and seeded RNG streams.
//! * [`forward`] — nonlinear forward operators `A` with Fréchet derivative and
//!   adjoint actions (linear integral baseline, 1-D diffusion coefficient
//!   identification, pointwise nonlinear integral operator).
//! * [`tangent`] — tangent-kernel Gram matrices, empirical/population integral
//!   operators, effective dimension and eigenvalue-decay fits.
//! * [`sampling`] — random-design data generation, bounded/Bernstein noise
//!   models and source-condition-consistent truth construction.
//! * [`solver`] — constant-step gradient descent and mini-batch SGD with
//!   stopping times, batch-size bounds and schedule presets.
//! * [`diagnostics`] — interpolation-norm error functionals, concentration
//!   quantities with their probabilistic bounds, φ-sum inequalities and the
//!   Taylor-remainder check.
//! * [`harness`] — experiment configs, Monte Carlo replication, log-log rate
//!   regression and CSV/JSON/SVG report emission.

pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod harness;
pub mod sampling;
pub mod solver;
pub mod spectral;
pub mod tangent;

pub use error::{Error, Result};
