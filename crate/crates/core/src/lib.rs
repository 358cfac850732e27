//! Learned particle simulation with graph networks inside spatial and
//! temporal neural ODEs.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod commands;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod graph;
pub mod io;
pub mod model;
pub mod ode;
pub mod physics;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
