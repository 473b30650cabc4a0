//! Numerical laboratory for dissipative stochastic Hamiltonian systems.
//!
//! The systems under study have phase state (Q, P) on S x R^n, where the
//! position space S is a line, a circle, or a product of such factors.
//! Positions follow the velocity field of a Hamiltonian H(q, p) = V(q) +
//! p' M(q)^{-1} p / 2, while momenta feel the potential force, a
//! position-dependent viscous damping F(q), and Ito noise with diffusion
//! matrix D(q):
//!
//! ```text
//!     dQ = M(Q)^{-1} P dt
//!     dP = -(dH/dq + F(Q) M(Q)^{-1} P) dt + sqrt(D(Q)) dW .
//! ```
//!
//! When the fluctuation-dissipation relation F = (beta/2) D holds, the
//! Gibbs density f*(q, p) proportional to exp(-beta H) is invariant. The
//! crates' modules cover the model layer, the invariant measure, grid
//! fields and their conditioning structure, the kinetic Fokker-Planck
//! evolution, particle simulation, relative-entropy diagnostics, and the
//! spectra of the linearized dynamics near equilibrium.

pub mod entropy;
pub mod equilibrium;
pub mod error;
pub mod fpke;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod spectral;
pub mod spline;

pub use error::{Error, Result};
