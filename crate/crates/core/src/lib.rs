//! Incentive design for prosumers in a radial distribution feeder.
//!
//! The system operator steers rational prosumers with linear incentives
//! `g_n(d, xi) = xi (d - d_hat)` so that voltages and the substation power
//! stay in bounds at minimum cost. The optimal incentive solves a strictly
//! convex QP ([`program`]); when the operator lacks full information it can
//! be reached by feedback from grid measurements ([`controllers`]), closed
//! against a linearized feeder ([`sim`]).

pub mod cli;
pub mod controllers;
pub mod error;
pub mod feeder;
pub mod io;
pub mod market;
pub mod program;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};
