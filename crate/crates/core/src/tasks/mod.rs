//! Inference-objective pipelines built on [`crate::influence::Estimator`].

pub mod attribution;
pub mod cv;
pub mod fairness;
pub mod unlearn;
