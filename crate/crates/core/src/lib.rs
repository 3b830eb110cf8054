//! Station-keeping inside Earth-Moon libration-point orbit families.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`dynamics`]: the dimensionless CR3BP, RK4 propagation with state
//!    transition matrices and the impulse-then-coast transition map.
//! 2. [`family`]: Lyapunov, halo and near-rectilinear halo orbit families
//!    near L1/L2 from a linear seed, symmetric single shooting and
//!    pseudo-arclength continuation.
//! 3. [`model`]: a two-parameter `(chi, nu)` description of each family
//!    and piecewise polynomial surrogates of the family manifold.
//! 4. [`nmpc`], [`ekf`] and [`sim`]: a receding-horizon controller that
//!    tracks the whole family instead of one reference orbit, an EKF on
//!    range and line-of-sight measurements, and the closed-loop harness.

pub mod dynamics;
pub mod ekf;
pub mod error;
pub mod family;
pub mod model;
pub mod nmpc;
pub mod optim;
pub mod sim;
pub mod units;

pub use dynamics::{LibrationIndex, LibrationPoint, StateVector, Stm, SystemParams};
pub use error::{Error, Result};
