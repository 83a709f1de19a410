//! Mean-field control problem data and the three benchmark instances.
//!
//! A [`ProblemSpec`] bundles dimensions, the time grid, the initial and
//! common-initial laws, the constant volatilities, and a [`MeanFieldModel`]
//! that records drift and costs for a whole particle batch on a tape. The
//! population measure enters only through statistics of that batch (mean
//! state, mean action, kernel density).

mod crowd_motion;
mod price_impact;
mod systemic_risk;

pub use crowd_motion::{crowd_motion_spec, CrowdMotion, CrowdMotionParams};
pub use price_impact::{price_impact_spec, PriceImpact, PriceImpactParams};
pub use systemic_risk::{
    systemic_risk_analytic, systemic_risk_spec, RiccatiSolution, SystemicRisk, SystemicRiskParams,
};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid problem parameters: {0}")]
    InvalidParams(String),
    #[error("Riccati solution blows up at t = {time}")]
    RiccatiBlowUp { time: f64 },
}

/// Drift and costs of an interacting particle system, recorded on a tape.
///
/// `x` is the `[n, d]` state batch and `a` the `[n, k]` action batch; the
/// empirical measure of `x` (and of `a`, where the model needs it) is the
/// population input. Costs are returned per particle as `[n, 1]`.
pub trait MeanFieldModel: Send + Sync + fmt::Debug {
    fn drift(&self, tape: &mut Tape, t: f64, x: Var, a: Var) -> Result<Var, AutodiffError>;
    fn running_cost(&self, tape: &mut Tape, t: f64, x: Var, a: Var) -> Result<Var, AutodiffError>;
    fn terminal_cost(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError>;
}

/// One-dimensional normal law; `std == 0` is a point mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    pub const fn dirac(at: f64) -> Self {
        Self { mean: at, std: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Per-dimension law of the idiosyncratic initial state.
    pub initial: Vec<Gaussian>,
    /// Per-dimension law of the shared initial shift `x0`.
    pub common_initial: Vec<Gaussian>,
    pub sigma: Vec<f64>,
    pub sigma_common: Vec<f64>,
    pub model: Arc<dyn MeanFieldModel>,
}

impl ProblemSpec {
    /// Number of Euler steps `n = T / dt`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |m: String| Err(ProblemError::InvalidParams(m));
        if self.state_dim == 0 || self.control_dim == 0 {
            return bad("state and control dimensions must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return bad(format!("need T > 0 and dt > 0, got T={} dt={}", self.horizon, self.dt));
        }
        let n = self.horizon / self.dt;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) || n.round() < 1.0 {
            return bad(format!("T={} is not an integer multiple of dt={}", self.horizon, self.dt));
        }
        for (what, len) in [
            ("initial", self.initial.len()),
            ("common_initial", self.common_initial.len()),
            ("sigma", self.sigma.len()),
            ("sigma_common", self.sigma_common.len()),
        ] {
            if len != self.state_dim {
                return bad(format!("{what} has {len} entries for state dimension {}", self.state_dim));
            }
        }
        let laws = self.initial.iter().chain(&self.common_initial);
        if laws.clone().any(|g| !(g.std >= 0.0) || !g.mean.is_finite() || !g.std.is_finite()) {
            return bad("initial laws need finite mean and std >= 0".into());
        }
        if self.sigma.iter().chain(&self.sigma_common).any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("volatilities must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Constant `[1, k]` row on the tape.
pub(crate) fn const_row(tape: &mut Tape, values: &[f64]) -> Result<Var, AutodiffError> {
    tape.leaf(Tensor::row(values.to_vec()))
}

/// `broadcast(mean_rows(x)) - x`, i.e. `Xbar - X` per particle.
pub(crate) fn deviation_from_mean(tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
    let n = tape.value(x).rows();
    let mean = tape.mean_rows(x)?;
    let mean = tape.broadcast_rows(mean, n)?;
    tape.sub(mean, x)
}

/// Row-wise squared distance `|x_i - target|^2` as `[n, 1]`.
pub(crate) fn squared_distance_to(tape: &mut Tape, x: Var, target: &[f64]) -> Result<Var, AutodiffError> {
    let neg: Vec<f64> = target.iter().map(|v| -v).collect();
    let shift = const_row(tape, &neg)?;
    let diff = tape.add_row(x, shift)?;
    let sq = tape.square(diff)?;
    tape.sum_cols(sq)
}
