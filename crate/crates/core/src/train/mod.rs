//! Training, evaluation, and verification tooling.

pub mod data;
pub mod fragments;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod probe;
pub mod trainer;
