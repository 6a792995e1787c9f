//! Invertible domain translation with neural Hamiltonian flows.
//!
//! A learned scalar function `H(p, q)` induces the vector field
//! `dx/dt = J grad H` on states `x = [p, q]`. Integrating that field
//! transports samples from one distribution toward another; because the
//! field is autonomous and smooth, integrating it backward undoes the
//! transport to within integration error — the translation map is invertible
//! by construction rather than by training a second network.
//!
//! Crate layout:
//! - [`diff`]: MLPs with hand-written first- and second-order backprop.
//! - [`field`]: Hamiltonian vector fields (neural and analytic) and their
//!   pullbacks.
//! - [`ode`]: fixed-step RK4 integration, reverse transport, and two
//!   independent routes to training gradients (continuous adjoint and
//!   backprop through the unrolled integrator).
//! - [`gan`]: adversarial training of the flow against an MLP discriminator.
//! - [`domains`]: seeded Gaussian-mixture sample sources and batch files.
//! - [`metrics`]: sliced Wasserstein distance, energy drift, round-trip
//!   error, and the long-horizon integration sweep.
//!
//! Batch math runs in fixed-size chunks (see [`exec`]) so results are
//! bit-identical whether the `parallel` feature is on or off.

pub mod diff;
pub mod domains;
pub mod error;
pub mod exec;
pub mod field;
pub mod gan;
pub mod metrics;
pub mod ode;
pub mod rng;

pub(crate) mod csvio;

pub use error::{Error, Result};
