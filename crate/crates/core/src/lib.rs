//! Population-dependent feedback controls for mean-field control problems
//! with common noise, learned by simulating interacting particle batches and
//! differentiating the sampled social cost end to end.

pub mod autodiff;
pub mod embed;
pub mod metrics;
pub mod nn;
pub mod problems;
pub mod sim;
pub mod train;
