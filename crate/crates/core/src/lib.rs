//! Nash-equilibrium contracts for continuous-time common agency: several
//! principals hire one agent whose effort drives all of their projects.
//!
//! * [`model`]: drift/cost primitives, the contract generator and the
//!   agent's best response.
//! * [`lq`]: closed forms for the two-principal linear-quadratic model.
//! * [`hjb`]: finite-difference solver for risk-neutral principals built on
//!   the aggregated semilinear equation.
//! * [`sim`]: Monte Carlo verification of agent optimality and principal
//!   non-deviation.

pub mod error;
pub mod hjb;
pub mod lq;
pub mod model;
pub mod sim;

pub use error::{AgencyError, Result};
