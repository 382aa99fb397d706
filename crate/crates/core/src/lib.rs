//! Desk-scale linearised-Laplace toolkit: normalised MLPs with analytic
//! derivatives, GGN curvature, evidence-based prior-precision selection and
//! scaling-invariance diagnostics, plus the data/config/pipeline plumbing
//! behind the `llap` command line tool.

pub mod error;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod laplace;
pub mod invariance;
pub mod data;
pub mod config;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
