//! Second-order influence estimates for weighted empirical risk minimization.

pub mod bounds;
pub mod curvature;
pub mod data;
pub mod experiment;
pub mod error;
pub mod expfamily;
pub mod influence;
pub mod linalg;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
